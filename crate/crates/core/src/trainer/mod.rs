//! Continual training of the full-scale model, its lightweight student
//! and a naive fine-tuning baseline.

mod config;
mod metrics;
mod session;
mod stages;

pub use config::{CeScope, TrainConfig};
pub use metrics::{accuracy_counts, average_accuracy, evaluate, forgetting};
pub use session::{
    run_session, ArmReport, Learner, SessionOptions, SessionReport, StageTiming, TaskOutcome,
};
pub use stages::{
    layer_statistics, train_incremental, train_initial, train_naive_task, StageReport,
};

pub(crate) use stages::{cross_entropy, cross_entropy_from, fit, sample_inputs, FitSpec};
