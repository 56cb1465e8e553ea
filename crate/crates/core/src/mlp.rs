//! MLP layers with stability-aware selective retraining.
//!
//! Between tasks each layer compares its neurons' mean activations on the
//! new task's data against the statistics of the previous task. Neurons
//! whose mean moved by at most `eps` join the layer's stable set, and their
//! incoming weights and bias are masked out of every later update.

use std::collections::BTreeSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{randn, Graph, ParamId, ParamStore, Tensor2, Var};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MlpLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub last_avg_activation: Option<Vec<f64>>,
    pub stable: BTreeSet<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FreezeMasks {
    pub weight: Tensor2,
    pub bias: Tensor2,
}

/// Stability threshold: either absolute, or the given percentile (0–100)
/// of the layer's activation shifts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Epsilon {
    Absolute(f64),
    Percentile(f64),
}

impl Default for Epsilon {
    fn default() -> Self {
        Epsilon::Percentile(30.0)
    }
}

impl Epsilon {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Epsilon::Absolute(e) if e.is_nan() || e < 0.0 => {
                Err(Error::Config(format!("epsilon must be >= 0, got {e}")))
            }
            Epsilon::Percentile(p) if !(0.0..=100.0).contains(&p) => Err(Error::Config(format!(
                "epsilon percentile must be in [0,100], got {p}"
            ))),
            _ => Ok(()),
        }
    }

    pub fn resolve(&self, shifts: &[f64]) -> Result<f64> {
        self.validate()?;
        Ok(match *self {
            Epsilon::Absolute(e) => e,
            Epsilon::Percentile(p) => percentile(shifts, p),
        })
    }
}

/// Linear-interpolation percentile of `values` (`p` in 0..=100).
pub fn percentile(values: &[f64], p: f64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let pos = p / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Mean activation per neuron: each sample's `n × width` activation matrix
/// is averaged over time, then the per-sample vectors are averaged.
pub fn average_activations(samples: &[Tensor2]) -> Result<Vec<f64>> {
    let first = samples
        .first()
        .ok_or_else(|| Error::EmptyData("no samples for activation statistics".into()))?;
    let width = first.cols();
    let mut acc = vec![0.0f64; width];
    for s in samples {
        if s.cols() != width {
            return Err(Error::dim(
                "average_activations",
                format!("width {} vs {width}", s.cols()),
            ));
        }
        for (a, v) in acc.iter_mut().zip(s.mean_rows().data()) {
            *a += v;
        }
    }
    let inv = 1.0 / samples.len() as f64;
    Ok(acc.into_iter().map(|v| v * inv).collect())
}

/// Neurons whose mean activation changed by at most `eps`.
pub fn stable_neuron_set(curr: &[f64], prev: &[f64], eps: f64) -> Result<BTreeSet<usize>> {
    if curr.len() != prev.len() {
        return Err(Error::dim(
            "stable_neuron_set",
            format!("{} current vs {} previous", curr.len(), prev.len()),
        ));
    }
    if eps.is_nan() || eps < 0.0 {
        return Err(Error::Config(format!("epsilon must be >= 0, got {eps}")));
    }
    Ok(curr
        .iter()
        .zip(prev)
        .enumerate()
        .filter(|(_, (c, p))| (*c - *p).abs() <= eps)
        .map(|(i, _)| i)
        .collect())
}

impl MlpLayer {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        d_in: usize,
        d_out: usize,
    ) -> Self {
        let weight = store.add(
            format!("{name}.w"),
            randn(rng, d_in, d_out, (2.0 / d_in as f64).sqrt()),
        );
        let bias = store.add(format!("{name}.b"), Tensor2::zeros(1, d_out));
        Self::from_params(weight, bias)
    }

    pub fn from_params(weight: ParamId, bias: ParamId) -> Self {
        Self {
            weight,
            bias,
            last_avg_activation: None,
            stable: BTreeSet::new(),
        }
    }

    pub fn width(&self, store: &ParamStore) -> usize {
        store.value(self.weight).cols()
    }

    pub fn params(&self) -> [ParamId; 2] {
        [self.weight, self.bias]
    }

    /// `relu(x W + b)`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let z = g.matmul(x, w)?;
        let z = g.add_row(z, b)?;
        Ok(g.relu(z))
    }

    pub fn build_freeze_masks(&self, store: &ParamStore) -> FreezeMasks {
        let (d_in, d_out) = store.value(self.weight).shape();
        let mut weight = Tensor2::filled(d_in, d_out, 1.0);
        let mut bias = Tensor2::filled(1, d_out, 1.0);
        for &j in &self.stable {
            for i in 0..d_in {
                weight.set(i, j, 0.0);
            }
            bias.set(0, j, 0.0);
        }
        FreezeMasks { weight, bias }
    }

    pub fn install_masks(&self, store: &mut ParamStore) -> Result<()> {
        let masks = self.build_freeze_masks(store);
        store.get_mut(self.weight).set_mask(Some(masks.weight))?;
        store.get_mut(self.bias).set_mask(Some(masks.bias))?;
        Ok(())
    }

    pub fn clear_masks(&self, store: &mut ParamStore) {
        store.get_mut(self.weight).grad_mask = None;
        store.get_mut(self.bias).grad_mask = None;
    }

    /// Stores the statistics of the task just learned.
    pub fn record_statistics(&mut self, avg: Vec<f64>) {
        self.last_avg_activation = Some(avg);
    }

    /// Task-boundary update for task `task` (1-based): grows the stable set
    /// from the shift between `curr` and the stored statistics, reinstalls
    /// masks and keeps `curr` as the new reference. Task 1 is a no-op.
    /// Returns the number of newly stabilized neurons.
    pub fn selective_retrain_hook(
        &mut self,
        store: &mut ParamStore,
        task: usize,
        curr: Vec<f64>,
        eps: Epsilon,
    ) -> Result<usize> {
        eps.validate()?;
        if task <= 1 {
            return Ok(0);
        }
        let prev = self.last_avg_activation.as_ref().ok_or_else(|| {
            Error::State("no activation statistics recorded for the previous task".into())
        })?;
        let shifts: Vec<f64> = curr.iter().zip(prev).map(|(c, p)| (c - p).abs()).collect();
        let threshold = eps.resolve(&shifts)?;
        let stable = stable_neuron_set(&curr, prev, threshold)?;
        let before = self.stable.len();
        self.stable.extend(stable);
        self.install_masks(store)?;
        self.last_avg_activation = Some(curr);
        Ok(self.stable.len() - before)
    }
}
