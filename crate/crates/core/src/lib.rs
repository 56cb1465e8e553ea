//! Exemplar-free class-incremental learning for CSI activity sequences.
//!
//! The model is a single transformer block: a learnable Gaussian range
//! encoding, multi-head self-attention whose base weights are frozen after
//! the first task and extended with per-task key/value prefixes, and an MLP
//! whose stable neurons are frozen between tasks. A smaller student is
//! distilled from it after every task for deployment.

pub mod attention;
pub mod data;
pub mod distill;
pub mod encoding;
pub mod error;
pub mod mlp;
pub mod model;
pub mod numeric;
pub mod trainer;

pub use error::{Error, Result};
