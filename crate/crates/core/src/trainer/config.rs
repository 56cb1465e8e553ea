use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::distill::DistillConfig;
use crate::error::{Error, Result};
use crate::mlp::Epsilon;
use crate::model::{ModelConfig, Network};
use crate::numeric::AdamConfig;

/// Which logits the cross-entropy of a later task is computed over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CeScope {
    /// All classes seen so far.
    Seen,
    /// Only the classes introduced by the current task.
    #[default]
    Current,
}

impl CeScope {
    /// First scored logit column for a task whose classes are appended to
    /// `net`'s current classifier.
    pub fn first_column(self, net: &Network) -> usize {
        match self {
            CeScope::Seen => 0,
            CeScope::Current => net.num_classes(),
        }
    }
}

/// Everything a session needs besides the data. Loadable from TOML; any
/// key left out takes its default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub distill: DistillConfig,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub epsilon: Epsilon,
    /// Share of each class used for training when a single file is split.
    pub train_ratio: f64,
    /// Keep the positional encoding trainable after the first task.
    pub train_encoding_after_first: bool,
    pub ce_scope: CeScope,
    /// Cross-entropy scope of the naive fine-tuning baseline.
    pub naive_ce_scope: CeScope,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            distill: DistillConfig::default(),
            lr: 1e-3,
            epochs: 50,
            batch_size: 4,
            seed: 0,
            epsilon: Epsilon::default(),
            train_ratio: 0.8,
            train_encoding_after_first: false,
            ce_scope: CeScope::Current,
            naive_ce_scope: CeScope::Seen,
        }
    }
}

impl TrainConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config is always serializable")
    }

    /// Checks everything that does not depend on the data shape.
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.train_ratio > 0.0 && self.train_ratio < 1.0) {
            return Err(Error::Config(format!(
                "train_ratio must be in (0,1), got {}",
                self.train_ratio
            )));
        }
        self.epsilon.validate()?;
        self.distill.validate()?;
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            ..AdamConfig::default()
        }
    }
}
