//! Central finite-difference checks of graph gradients.

use super::{Graph, ParamId, ParamStore, Tensor2, Var};
use crate::error::{Error, Result};

/// `||a - n|| / max(||a||, ||n||)`, or the absolute difference when both
/// norms are below `1e-10`.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n) * (a - n))
        .sum::<f64>()
        .sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    let scale = na.max(nn);
    if scale < 1e-10 {
        diff
    } else {
        diff / scale
    }
}

fn scalar(g: &Graph, loss: Var) -> Result<f64> {
    let v = g.value(loss);
    if v.shape() != (1, 1) {
        return Err(Error::dim("gradcheck", format!("loss is {:?}", v.shape())));
    }
    Ok(v.item())
}

/// Checks the gradient of `build` with respect to every entry of `inputs`.
/// Returns the worst relative error over the inputs.
pub fn check_inputs<F>(inputs: &[Tensor2], h: f64, build: F) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor2]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.input(t.clone())).collect();
        let loss = build(&mut g, &vars)?;
        scalar(&g, loss)
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let loss = build(&mut g, &vars)?;
    scalar(&g, loss)?;
    g.backward(loss)?;

    let mut worst = 0.0f64;
    let mut values = inputs.to_vec();
    for (k, &var) in vars.iter().enumerate() {
        let analytic = match g.grad(var) {
            Some(t) => t.data().to_vec(),
            None => vec![0.0; inputs[k].len()],
        };
        let mut numeric = Vec::with_capacity(analytic.len());
        for i in 0..inputs[k].len() {
            let orig = values[k].data()[i];
            values[k].data_mut()[i] = orig + h;
            let up = eval(&values)?;
            values[k].data_mut()[i] = orig - h;
            let down = eval(&values)?;
            values[k].data_mut()[i] = orig;
            numeric.push((up - down) / (2.0 * h));
        }
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    Ok(worst)
}

/// Checks parameter gradients written by [`Graph::backward_into`] for the
/// params `ids` of the store reached through `store_of`. At most
/// `max_entries` evenly spaced entries per param are perturbed.
pub fn check_params<S, A, F>(
    state: &mut S,
    store_of: A,
    ids: &[ParamId],
    h: f64,
    max_entries: usize,
    build: F,
) -> Result<f64>
where
    A: Fn(&mut S) -> &mut ParamStore,
    F: Fn(&mut Graph, &S) -> Result<Var>,
{
    store_of(state).zero_grads();
    let mut g = Graph::new();
    let loss = build(&mut g, state)?;
    scalar(&g, loss)?;
    g.backward_into(loss, store_of(state))?;
    let analytic_all: Vec<Tensor2> = ids
        .iter()
        .map(|&id| store_of(state).get(id).grad.clone())
        .collect();
    store_of(state).zero_grads();

    let mut worst = 0.0f64;
    for (&id, grad) in ids.iter().zip(&analytic_all) {
        let len = grad.len();
        if len == 0 {
            continue;
        }
        let step = len.div_ceil(max_entries.max(1));
        let picks: Vec<usize> = (0..len).step_by(step.max(1)).collect();
        let mut analytic = Vec::with_capacity(picks.len());
        let mut numeric = Vec::with_capacity(picks.len());
        for &i in &picks {
            let orig = store_of(state).value(id).data()[i];
            store_of(state).get_mut(id).value.data_mut()[i] = orig + h;
            let mut g = Graph::new();
            let l = build(&mut g, state)?;
            let up = scalar(&g, l)?;
            store_of(state).get_mut(id).value.data_mut()[i] = orig - h;
            let mut g = Graph::new();
            let l = build(&mut g, state)?;
            let down = scalar(&g, l)?;
            store_of(state).get_mut(id).value.data_mut()[i] = orig;
            analytic.push(grad.data()[i]);
            numeric.push((up - down) / (2.0 * h));
        }
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    Ok(worst)
}
