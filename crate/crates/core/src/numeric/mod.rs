//! Minimal dense reverse-mode autodiff: matrices, parameters with gradient
//! masks, a per-batch computation graph and Adam.

pub mod gradcheck;
mod graph;
mod optim;
mod param;
mod tensor;

pub use graph::{inverse_softplus, softplus, Graph, Var, SIGMA_FLOOR};
pub use optim::{Adam, AdamConfig};
pub use param::{Param, ParamId, ParamStore};
pub use tensor::Tensor2;

use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Matrix with i.i.d. N(0, std²) entries.
pub fn randn<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Tensor2 {
    let normal = Normal::new(0.0, std).expect("std must be finite and non-negative");
    let data = (0..rows * cols).map(|_| normal.sample(rng)).collect();
    Tensor2::from_vec(rows, cols, data).expect("shape is consistent")
}

/// Inverted dropout mask: entries are 0 with probability `rate`, otherwise
/// `1 / (1 - rate)`.
pub fn dropout_mask<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, rate: f64) -> Tensor2 {
    let keep = 1.0 / (1.0 - rate);
    let data = (0..rows * cols)
        .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
        .collect();
    Tensor2::from_vec(rows, cols, data).expect("shape is consistent")
}
