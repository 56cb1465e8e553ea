//! Dataset and schedule selection shared by `train` and `simulate`.

use std::path::PathBuf;

use clap::{Args, ValueEnum};
use csicl_core::data::{generate, load_dataset, make_schedule, Dataset, Regime, SynthConfig, TaskSchedule};
use csicl_core::trainer::TrainConfig;

use crate::failure::{CliResult, Failure};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum RegimeArg {
    Short,
    Long,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Dataset file in the CSV container format.
    #[arg(long, conflicts_with = "synth", required_unless_present = "synth")]
    pub data: Option<PathBuf>,
    /// Separate test file; otherwise the dataset is split per class.
    #[arg(long, requires = "data")]
    pub test: Option<PathBuf>,
    /// Generate a synthetic dataset instead of reading one.
    #[arg(long)]
    pub synth: bool,
    /// Number of synthetic classes.
    #[arg(long, default_value_t = 6)]
    pub classes: usize,
    /// Synthetic samples per class.
    #[arg(long, default_value_t = 40)]
    pub per_class: usize,
    #[arg(long, value_enum, default_value_t = RegimeArg::Long)]
    pub regime: RegimeArg,
    /// Classes per incremental task.
    #[arg(long)]
    pub task_size: Option<usize>,
    /// Split into this many equal tasks (long regime only).
    #[arg(long, conflicts_with = "task_size")]
    pub tasks: Option<usize>,
    /// Training config in TOML.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides the config epoch count.
    #[arg(long)]
    pub epochs: Option<usize>,
}

pub struct Prepared {
    pub cfg: TrainConfig,
    pub train: Dataset,
    pub test: Dataset,
    pub schedule: TaskSchedule,
}

impl DataArgs {
    pub fn config(&self) -> CliResult<TrainConfig> {
        let mut cfg = match &self.config {
            Some(p) => TrainConfig::load(p)
                .map_err(|e| Failure::from(e).context(format!("reading config {}", p.display())))?,
            None => TrainConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(epochs) = self.epochs {
            cfg.epochs = epochs;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn prepare(&self) -> CliResult<Prepared> {
        let cfg = self.config()?;
        let read = |p: &PathBuf| {
            load_dataset(p).map_err(|e| Failure::from(e).context(format!("reading {}", p.display())))
        };
        let (train, test) = match (&self.data, &self.test) {
            (Some(d), Some(t)) => (read(d)?, read(t)?),
            (Some(d), None) => read(d)?.split(cfg.train_ratio),
            (None, _) => generate(&SynthConfig {
                classes: self.classes,
                per_class: self.per_class,
                seed: cfg.seed,
                ..SynthConfig::default()
            })?
            .split(cfg.train_ratio),
        };
        let classes = train.classes().len();
        if train.classes().iter().enumerate().any(|(i, &c)| i != c) {
            return Err(Failure::usage(anyhow::anyhow!(
                "class labels must be 0..{classes} without gaps"
            )));
        }
        let schedule = make_schedule(classes, &self.regime(classes)?)?;
        Ok(Prepared {
            cfg,
            train,
            test,
            schedule,
        })
    }

    fn regime(&self, classes: usize) -> CliResult<Regime> {
        let task_size = match self.tasks {
            None => self.task_size,
            Some(0) => return Err(Failure::usage(anyhow::anyhow!("--tasks must be at least 1"))),
            Some(t) if self.regime == RegimeArg::Short => {
                return Err(Failure::usage(anyhow::anyhow!(
                    "--tasks {t} applies to the long regime; use --task-size with --regime short"
                )))
            }
            Some(t) if classes % t != 0 => {
                return Err(Failure::usage(anyhow::anyhow!(
                    "{classes} classes do not split into {t} equal tasks"
                )))
            }
            Some(t) => Some(classes / t),
        };
        Ok(match self.regime {
            RegimeArg::Short => Regime::Short { task_size },
            RegimeArg::Long => Regime::Long { task_size },
        })
    }
}
