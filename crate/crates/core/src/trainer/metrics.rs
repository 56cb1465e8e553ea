use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::Network;

use super::stages::sample_inputs;

/// Correct predictions and total samples on `data`.
pub fn accuracy_counts(net: &Network, data: &Dataset) -> Result<(usize, usize)> {
    if data.is_empty() {
        return Err(Error::Eval("test set is empty".into()));
    }
    let xs = sample_inputs(data)?;
    let mut correct = 0;
    for (x, s) in xs.iter().zip(&data.samples) {
        if net.predict(x)? == s.label {
            correct += 1;
        }
    }
    Ok((correct, data.len()))
}

pub fn evaluate(net: &Network, data: &Dataset) -> Result<f64> {
    let (c, n) = accuracy_counts(net, data)?;
    Ok(c as f64 / n as f64)
}

/// Mean of the per-stage accuracies `A_t`.
pub fn average_accuracy(acc: &[f64]) -> Option<f64> {
    if acc.is_empty() {
        None
    } else {
        Some(acc.iter().sum::<f64>() / acc.len() as f64)
    }
}

/// Average forgetting. `alpha[t][j]` is the accuracy on task `j` after
/// training task `t` (lower triangular). For every task but the last, the
/// best accuracy seen before the final stage minus the final accuracy.
/// Undefined for fewer than two tasks.
pub fn forgetting(alpha: &[Vec<f64>]) -> Option<f64> {
    let n = alpha.len();
    if n < 2 {
        return None;
    }
    let last = &alpha[n - 1];
    let mut total = 0.0;
    for j in 0..n - 1 {
        let peak = (j..n - 1)
            .map(|m| alpha[m][j])
            .fold(f64::NEG_INFINITY, f64::max);
        total += peak - last[j];
    }
    Some(total / (n - 1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn three_task_forgetting() {
        let alpha = vec![vec![0.9], vec![0.7, 0.8], vec![0.6, 0.8, 0.85]];
        let f = forgetting(&alpha).unwrap();
        assert_eq!(f, ((0.9 - 0.6) + (0.8 - 0.8)) / 2.0);
        assert!((f - 0.15).abs() < 1e-12);
    }

    #[test]
    fn single_task_has_no_forgetting() {
        assert_eq!(forgetting(&[vec![0.9]]), None);
        assert_eq!(forgetting(&[]), None);
    }

    #[test]
    fn improvement_gives_negative_forgetting() {
        let alpha = vec![vec![0.5], vec![0.7, 0.9]];
        assert!((forgetting(&alpha).unwrap() + 0.2).abs() < 1e-12);
    }

    #[test]
    fn averages() {
        assert_eq!(average_accuracy(&[0.5, 1.0]), Some(0.75));
        assert_eq!(average_accuracy(&[]), None);
    }
}
