//! Model topology shared by the full-scale model and its lightweight student.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{AttentionBase, ParallelAdapter, PrefixBlock, PrefixStack};
use crate::encoding::{EncodingConfig, GaussianRangeEncoding};
use crate::error::{Error, Result};
use crate::mlp::MlpLayer;
use crate::numeric::{dropout_mask, randn, Graph, ParamId, ParamStore, Tensor2, Var};

/// How a new task's prefix block is initialized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrefixInit {
    #[default]
    Adapter,
    Zero,
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub heads: usize,
    pub ranges: usize,
    pub sigma: f64,
    /// Prefix rows per task per head.
    pub prefix_len: usize,
    /// Adapter bottleneck; `None` means `d / 4` (at least 1).
    pub adapter_rank: Option<usize>,
    pub mlp_hidden: usize,
    pub mlp_layers: usize,
    pub dropout: f64,
    pub prefix_init: PrefixInit,
    /// Standard deviation of [`PrefixInit::Random`] prefixes.
    pub random_prefix_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            heads: 4,
            ranges: 10,
            sigma: 8.0,
            prefix_len: 4,
            adapter_rank: None,
            mlp_hidden: 64,
            mlp_layers: 2,
            dropout: 0.1,
            prefix_init: PrefixInit::Adapter,
            random_prefix_std: 1.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.heads == 0 || dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "dim {dim} not divisible by heads {}",
                self.heads
            )));
        }
        if self.prefix_len == 0 || self.mlp_hidden == 0 || self.mlp_layers == 0 || self.ranges == 0 {
            return Err(Error::Config(
                "prefix_len, mlp_hidden, mlp_layers and ranges must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} not in [0,1)", self.dropout)));
        }
        Ok(())
    }

    pub fn rank(&self, dim: usize) -> usize {
        self.adapter_rank.unwrap_or((dim / 4).max(1))
    }
}

/// Output layer over the classes seen so far. `classes[k]` is the dataset
/// label of logit column `k`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Classifier {
    pub weight: ParamId,
    pub bias: ParamId,
    pub classes: Vec<usize>,
}

impl Classifier {
    pub fn params(&self) -> [ParamId; 2] {
        [self.weight, self.bias]
    }

    pub fn index_of(&self, label: usize) -> Option<usize> {
        self.classes.iter().position(|&c| c == label)
    }
}

/// Per-sample forward results needed by training and distillation.
pub struct Forward {
    pub logits: Var,
    pub attention: Vec<Var>,
    pub values: Vec<Var>,
    /// Post-activation output of every MLP layer.
    pub activations: Vec<Var>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Network {
    pub store: ParamStore,
    pub encoding: GaussianRangeEncoding,
    pub attention: AttentionBase,
    pub prefixes: PrefixStack,
    pub mlp: Vec<MlpLayer>,
    pub classifier: Classifier,
    pub dropout: f64,
}

impl Network {
    /// Fresh network for `n×dim` inputs with no classes yet.
    pub fn init<R: Rng + ?Sized>(rng: &mut R, n: usize, dim: usize, cfg: &ModelConfig) -> Result<Self> {
        cfg.validate(dim)?;
        let widths = vec![cfg.mlp_hidden; cfg.mlp_layers];
        Self::init_with_widths(rng, n, dim, cfg, &widths)
    }

    pub fn init_with_widths<R: Rng + ?Sized>(
        rng: &mut R,
        n: usize,
        dim: usize,
        cfg: &ModelConfig,
        widths: &[usize],
    ) -> Result<Self> {
        let mut store = ParamStore::new();
        let encoding = GaussianRangeEncoding::init(
            &mut store,
            rng,
            n,
            dim,
            EncodingConfig {
                ranges: cfg.ranges,
                sigma: cfg.sigma,
            },
        )?;
        let attention = AttentionBase::init(&mut store, rng, dim, cfg.heads)?;
        let mut mlp = Vec::with_capacity(widths.len());
        let mut d_in = dim;
        for (l, &w) in widths.iter().enumerate() {
            mlp.push(MlpLayer::init(&mut store, rng, &format!("mlp.{l}"), d_in, w));
            d_in = w;
        }
        let classifier = Classifier {
            weight: store.add("classifier.w", Tensor2::zeros(d_in, 0)),
            bias: store.add("classifier.b", Tensor2::zeros(1, 0)),
            classes: Vec::new(),
        };
        Ok(Self {
            store,
            encoding,
            attention,
            prefixes: PrefixStack::new(),
            mlp,
            classifier,
            dropout: cfg.dropout,
        })
    }

    pub fn dim(&self) -> usize {
        self.attention.dim
    }

    pub fn heads(&self) -> usize {
        self.attention.heads
    }

    pub fn num_classes(&self) -> usize {
        self.classifier.classes.len()
    }

    pub fn mlp_widths(&self) -> Vec<usize> {
        self.mlp.iter().map(|l| l.width(&self.store)).collect()
    }

    /// Total number of scalar parameters in the inference path.
    pub fn param_count(&self) -> usize {
        self.store.iter().map(|(_, p)| p.value.len()).sum()
    }

    /// Appends output columns for `new_classes`. Existing columns are
    /// copied unchanged.
    pub fn grow_classifier<R: Rng + ?Sized>(&mut self, rng: &mut R, new_classes: &[usize]) -> Result<()> {
        for (i, c) in new_classes.iter().enumerate() {
            if self.classifier.classes.contains(c) || new_classes[..i].contains(c) {
                return Err(Error::Config(format!("class {c} is already present")));
            }
        }
        if new_classes.is_empty() {
            return Ok(());
        }
        let old_w = self.store.value(self.classifier.weight).clone();
        let old_b = self.store.value(self.classifier.bias).clone();
        let fresh_w = randn(rng, old_w.rows(), new_classes.len(), 0.01);
        let fresh_b = Tensor2::zeros(1, new_classes.len());
        let w = Tensor2::concat_cols(&[&old_w, &fresh_w])?;
        let b = Tensor2::concat_cols(&[&old_b, &fresh_b])?;
        self.store.get_mut(self.classifier.weight).replace_value(w);
        self.store.get_mut(self.classifier.bias).replace_value(b);
        self.classifier.classes.extend_from_slice(new_classes);
        Ok(())
    }

    /// Builds the forward pass for one `n×d` sample. Dropout is applied
    /// after every MLP layer when `dropout_rng` is given.
    pub fn forward(
        &self,
        g: &mut Graph,
        x: &Tensor2,
        mut dropout_rng: Option<&mut dyn rand::RngCore>,
    ) -> Result<Forward> {
        let xv = g.input(x.clone());
        let encoded = self.encoding.encode_var(g, &self.store, xv)?;
        let prefixes: Vec<&PrefixBlock> = self.prefixes.refs();
        let attn = self.attention.forward(g, &self.store, encoded, &prefixes)?;
        let mut h = g.add(encoded, attn.output)?;
        let mut activations = Vec::with_capacity(self.mlp.len());
        for layer in &self.mlp {
            h = layer.forward(g, &self.store, h)?;
            activations.push(h);
            if let Some(rng) = dropout_rng.as_deref_mut() {
                if self.dropout > 0.0 {
                    let (r, c) = g.value(h).shape();
                    let mask = dropout_mask(rng, r, c, self.dropout);
                    h = g.mul_const(h, mask)?;
                }
            }
        }
        let pooled = g.mean_rows(h);
        let w = g.param(&self.store, self.classifier.weight);
        let b = g.param(&self.store, self.classifier.bias);
        let logits = g.matmul(pooled, w)?;
        let logits = g.add_row(logits, b)?;
        Ok(Forward {
            logits,
            attention: attn.weights,
            values: attn.values,
            activations,
        })
    }

    /// Eval-mode logits as a 1×C row.
    pub fn logits(&self, x: &Tensor2) -> Result<Tensor2> {
        let mut g = Graph::new();
        let f = self.forward(&mut g, x, None)?;
        Ok(g.value(f.logits).clone())
    }

    /// Predicted dataset label.
    pub fn predict(&self, x: &Tensor2) -> Result<usize> {
        let logits = self.logits(x)?;
        if logits.cols() == 0 {
            return Err(Error::State("model has no classes".into()));
        }
        Ok(self.classifier.classes[logits.argmax_row(0)])
    }

    /// Encoded input `X + beta E`.
    pub fn encode(&self, x: &Tensor2) -> Result<Tensor2> {
        self.encoding.encode(&self.store, x)
    }

    /// Freezes or unfreezes everything.
    pub fn set_all_trainable(&mut self, trainable: bool) {
        self.store.set_all_trainable(trainable);
    }
}

/// The edge-resident model: one prefix block per task and the adapters
/// that initialize them.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FullModel {
    pub net: Network,
    pub key_adapter: ParallelAdapter,
    pub value_adapter: ParallelAdapter,
    pub tasks_learned: usize,
}

impl FullModel {
    pub fn init<R: Rng + ?Sized>(rng: &mut R, n: usize, dim: usize, cfg: &ModelConfig) -> Result<Self> {
        let net = Network::init(rng, n, dim, cfg)?;
        let rank = cfg.rank(dim);
        let key_adapter = ParallelAdapter::init(rng, dim, rank)?;
        let value_adapter = ParallelAdapter::init(rng, dim, rank)?;
        Ok(Self {
            net,
            key_adapter,
            value_adapter,
            tasks_learned: 0,
        })
    }

    pub fn param_count(&self) -> usize {
        self.net.param_count()
    }
}

/// The deployable student: reduced MLP and a single consolidated prefix block.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LightModel {
    pub net: Network,
    pub tasks_learned: usize,
}

impl LightModel {
    pub fn param_count(&self) -> usize {
        self.net.param_count()
    }
}
