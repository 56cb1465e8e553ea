use rand::seq::SliceRandom;
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use super::TrainConfig;
use crate::attention::{adapter_init_prefix, PrefixBlock};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::mlp::average_activations;
use crate::model::{Forward, FullModel, Network, PrefixInit};
use crate::numeric::{randn, Adam, AdamConfig, Graph, ParamId, Tensor2, Var};

/// Loss trace and stability bookkeeping of one training stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub task: usize,
    /// Mean training loss per epoch.
    pub losses: Vec<f64>,
    /// Neurons newly added to each layer's stable set at this boundary.
    pub newly_stable: Vec<usize>,
}

pub(crate) struct FitSpec {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
}

pub(crate) fn cross_entropy(g: &mut Graph, logits: Var, label: usize) -> Result<Var> {
    g.softmax_cross_entropy(logits, &[label])
}

/// Cross-entropy over logit columns `first..`; `label` indexes all columns.
pub(crate) fn cross_entropy_from(g: &mut Graph, logits: Var, label: usize, first: usize) -> Result<Var> {
    if first == 0 {
        return cross_entropy(g, logits, label);
    }
    let cols = g.value(logits).cols();
    if label < first || first >= cols {
        return Err(Error::State(format!(
            "label column {label} outside the scored range {first}..{cols}"
        )));
    }
    let scored = g.slice_cols(logits, first, cols - first)?;
    g.softmax_cross_entropy(scored, &[label - first])
}

/// Input matrices with missing cells interpolated.
pub(crate) fn sample_inputs(data: &Dataset) -> Result<Vec<Tensor2>> {
    if data.is_empty() {
        return Err(Error::EmptyData("no training samples".into()));
    }
    data.samples
        .iter()
        .map(|s| {
            if s.matrix.has_missing() {
                Ok(s.matrix.interpolate_missing()?.values().clone())
            } else {
                Ok(s.matrix.values().clone())
            }
        })
        .collect()
}

/// Mini-batch Adam over the trainable params of `net`. The batch loss is
/// the mean of `sample_loss` over the batch plus `batch_loss`. Returns the
/// mean loss of every epoch.
pub(crate) fn fit<R, F, B>(
    net: &mut Network,
    xs: &[Tensor2],
    spec: &FitSpec,
    rng: &mut R,
    mut sample_loss: F,
    mut batch_loss: B,
) -> Result<Vec<f64>>
where
    R: Rng,
    F: FnMut(&mut Graph, &Network, usize, &Forward) -> Result<Var>,
    B: FnMut(&mut Graph, &Network) -> Result<Option<Var>>,
{
    if xs.is_empty() {
        return Err(Error::EmptyData("no training samples".into()));
    }
    let mut adam = Adam::new(spec.adam);
    let mut order: Vec<usize> = (0..xs.len()).collect();
    let mut losses = Vec::with_capacity(spec.epochs);
    for epoch in 0..spec.epochs {
        order.shuffle(rng);
        let mut total = 0.0;
        let mut batches = 0usize;
        for batch in order.chunks(spec.batch_size.max(1)) {
            let mut g = Graph::new();
            let mut acc: Option<Var> = None;
            for &i in batch {
                let f = net.forward(&mut g, &xs[i], Some(rng as &mut dyn RngCore))?;
                let l = sample_loss(&mut g, net, i, &f)?;
                acc = Some(match acc {
                    Some(a) => g.add(a, l)?,
                    None => l,
                });
            }
            let mut loss = g.scale(acc.expect("batches are never empty"), 1.0 / batch.len() as f64);
            if let Some(extra) = batch_loss(&mut g, net)? {
                loss = g.add(loss, extra)?;
            }
            let value = g.value(loss).item();
            if !value.is_finite() {
                return Err(Error::State(format!("loss became {value} in epoch {epoch}")));
            }
            g.backward_into(loss, &mut net.store)?;
            adam.step(&mut net.store)?;
            total += value;
            batches += 1;
        }
        let mean = total / batches as f64;
        log::debug!("epoch {epoch}: loss {mean:.5}");
        losses.push(mean);
    }
    Ok(losses)
}

fn label_indices(net: &Network, data: &Dataset) -> Result<Vec<usize>> {
    data.samples
        .iter()
        .map(|s| {
            net.classifier
                .index_of(s.label)
                .ok_or_else(|| Error::State(format!("label {} unknown to the model", s.label)))
        })
        .collect()
}

fn fit_ce<R: Rng>(
    net: &mut Network,
    data: &Dataset,
    xs: &[Tensor2],
    cfg: &TrainConfig,
    first: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let labels = label_indices(net, data)?;
    let spec = FitSpec {
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        adam: cfg.adam(),
    };
    fit(
        net,
        xs,
        &spec,
        rng,
        |g, _, i, f| cross_entropy_from(g, f.logits, labels[i], first),
        |_, _| Ok(None),
    )
}

/// Eval-mode mean activation of every MLP neuron over `xs`.
pub fn layer_statistics(net: &Network, xs: &[Tensor2]) -> Result<Vec<Vec<f64>>> {
    let mut per_layer: Vec<Vec<Tensor2>> = vec![Vec::with_capacity(xs.len()); net.mlp.len()];
    for x in xs {
        let mut g = Graph::new();
        let f = net.forward(&mut g, x, None)?;
        for (acc, &a) in per_layer.iter_mut().zip(&f.activations) {
            acc.push(g.value(a).clone());
        }
    }
    per_layer.iter().map(|acts| average_activations(acts)).collect()
}

fn record_statistics(net: &mut Network, xs: &[Tensor2]) -> Result<()> {
    let stats = layer_statistics(net, xs)?;
    for (layer, s) in net.mlp.iter_mut().zip(stats) {
        layer.record_statistics(s);
    }
    Ok(())
}

fn new_classes(net: &Network, data: &Dataset) -> Result<Vec<usize>> {
    let classes: Vec<usize> = data.classes().into_iter().collect();
    if let Some(dup) = classes.iter().find(|c| net.classifier.index_of(**c).is_some()) {
        return Err(Error::Schedule(format!("class {dup} was already learned")));
    }
    Ok(classes)
}

fn initial_prefix<R: Rng>(
    model: &FullModel,
    xs: &[Tensor2],
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<(Vec<Tensor2>, Vec<Tensor2>)> {
    let net = &model.net;
    let (h, p) = (net.heads(), cfg.model.prefix_len);
    let hd = net.dim() / h;
    Ok(match cfg.model.prefix_init {
        PrefixInit::Adapter => {
            let encoded = xs.iter().map(|x| net.encode(x)).collect::<Result<Vec<_>>>()?;
            (
                adapter_init_prefix(&model.key_adapter, &encoded, p, h)?,
                adapter_init_prefix(&model.value_adapter, &encoded, p, h)?,
            )
        }
        PrefixInit::Zero => (vec![Tensor2::zeros(p, hd); h], vec![Tensor2::zeros(p, hd); h]),
        PrefixInit::Random => {
            let std = cfg.model.random_prefix_std;
            (
                (0..h).map(|_| randn(rng, p, hd, std)).collect(),
                (0..h).map(|_| randn(rng, p, hd, std)).collect(),
            )
        }
    })
}

fn check_shape(net: &Network, data: &Dataset) -> Result<()> {
    if data.d != net.dim() {
        return Err(Error::dim(
            "train",
            format!("data has d={}, model expects {}", data.d, net.dim()),
        ));
    }
    Ok(())
}

/// First task: every parameter (including the task-1 prefix) is trained.
/// Afterwards the attention base, the prefix and, unless configured
/// otherwise, the encoding are frozen, and MLP statistics are recorded.
pub fn train_initial<R: Rng>(
    model: &mut FullModel,
    data: &Dataset,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<StageReport> {
    cfg.validate()?;
    if model.tasks_learned != 0 {
        return Err(Error::State(format!(
            "initial stage on a model that already learned {} tasks",
            model.tasks_learned
        )));
    }
    check_shape(&model.net, data)?;
    let xs = sample_inputs(data)?;
    let classes = new_classes(&model.net, data)?;
    model.net.grow_classifier(rng, &classes)?;
    let (keys, values) = initial_prefix(model, &xs, cfg, rng)?;
    let block = PrefixBlock::from_values(&mut model.net.store, 1, keys, values)?;
    model.net.prefixes.push(block)?;

    model.net.set_all_trainable(true);
    let losses = fit_ce(&mut model.net, data, &xs, cfg, 0, rng)?;

    let net = &mut model.net;
    net.attention.freeze(&mut net.store);
    net.prefixes.freeze_and_accumulate(&mut net.store, 1)?;
    if !cfg.train_encoding_after_first {
        let ids = net.encoding.params();
        net.store.set_trainable(&ids, false);
    }
    record_statistics(net, &xs)?;
    model.tasks_learned = 1;
    Ok(StageReport {
        task: 1,
        losses,
        newly_stable: vec![0; model.net.mlp.len()],
    })
}

/// Later tasks: stable neurons are frozen, the classifier grows, a fresh
/// prefix block is initialized and trained together with the unfrozen
/// MLP entries and the classifier.
pub fn train_incremental<R: Rng>(
    model: &mut FullModel,
    data: &Dataset,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<StageReport> {
    cfg.validate()?;
    if model.tasks_learned == 0 {
        return Err(Error::State("incremental stage before the initial one".into()));
    }
    check_shape(&model.net, data)?;
    let task = model.tasks_learned + 1;
    let xs = sample_inputs(data)?;
    let classes = new_classes(&model.net, data)?;

    let stats = layer_statistics(&model.net, &xs)?;
    let mut newly_stable = Vec::with_capacity(stats.len());
    {
        let net = &mut model.net;
        for (layer, curr) in net.mlp.iter_mut().zip(stats) {
            newly_stable.push(layer.selective_retrain_hook(&mut net.store, task, curr, cfg.epsilon)?);
        }
    }
    log::debug!("task {task}: newly stable neurons {newly_stable:?}");

    let first = cfg.ce_scope.first_column(&model.net);
    model.net.grow_classifier(rng, &classes)?;
    let (keys, values) = initial_prefix(model, &xs, cfg, rng)?;
    let block = PrefixBlock::from_values(&mut model.net.store, task, keys, values)?;

    let net = &mut model.net;
    let mut trainable: Vec<ParamId> = block.params();
    net.prefixes.push(block)?;
    for layer in &net.mlp {
        trainable.extend(layer.params());
    }
    trainable.extend(net.classifier.params());
    if cfg.train_encoding_after_first {
        trainable.extend(net.encoding.params());
    }
    net.set_all_trainable(false);
    net.store.set_trainable(&trainable, true);

    let losses = fit_ce(net, data, &xs, cfg, first, rng)?;

    net.prefixes.freeze_and_accumulate(&mut net.store, task)?;
    net.set_all_trainable(false);
    record_statistics(net, &xs)?;
    model.tasks_learned = task;
    Ok(StageReport {
        task,
        losses,
        newly_stable,
    })
}

/// Naive fine-tuning: grow the classifier and train everything on the
/// new task only.
pub fn train_naive_task<R: Rng>(
    net: &mut Network,
    data: &Dataset,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    check_shape(net, data)?;
    let xs = sample_inputs(data)?;
    let classes = new_classes(net, data)?;
    let first = cfg.naive_ce_scope.first_column(net);
    net.grow_classifier(rng, &classes)?;
    net.set_all_trainable(true);
    fit_ce(net, data, &xs, cfg, first, rng)
}
