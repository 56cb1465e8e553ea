//! CSI samples, the CSV container, task schedules and synthetic data.

mod csi;
mod dataset;
mod schedule;
pub mod synth;

pub use csi::{amplitude, CsiMatrix};
pub use dataset::{load_dataset, parse_csv, Dataset, LabeledSample};
pub use schedule::{make_schedule, Regime, TaskSchedule};
pub use synth::{generate, SynthConfig};
