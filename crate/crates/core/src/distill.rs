//! Teacher → student distillation.
//!
//! After the first task the student mimics the teacher's attention maps
//! and values (plus logits). After every later task the student keeps a
//! single consolidated prefix block that is regressed onto the teacher's
//! concatenated per-task prefixes.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{PrefixBlock, PrefixStack};
use crate::data::Dataset;
use crate::encoding::GaussianRangeEncoding;
use crate::error::{Error, Result};
use crate::mlp::MlpLayer;
use crate::model::{Classifier, FullModel, LightModel, Network};
use crate::numeric::{Graph, ParamId, ParamStore, Tensor2, Var};
use crate::trainer::{cross_entropy, cross_entropy_from, fit, sample_inputs, FitSpec, TrainConfig};
use crate::attention::AttentionBase;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DistillConfig {
    pub lambda_at: f64,
    pub lambda_vr: f64,
    pub lambda_log: f64,
    pub lambda_p: f64,
    pub lambda_ce: f64,
    pub epochs: usize,
    /// Student MLP width as a fraction of the teacher's.
    pub rho: f64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            lambda_at: 1.0,
            lambda_vr: 1.0,
            lambda_log: 1.0,
            lambda_p: 1.0,
            lambda_ce: 1.0,
            epochs: 20,
            rho: 0.25,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        let l = [
            self.lambda_at,
            self.lambda_vr,
            self.lambda_log,
            self.lambda_p,
            self.lambda_ce,
        ];
        if l.iter().any(|v| v.is_nan() || *v < 0.0) {
            return Err(Error::Distill(format!("loss weights must be >= 0, got {l:?}")));
        }
        if l.iter().all(|&v| v == 0.0) {
            return Err(Error::Distill("at least one loss weight must be positive".into()));
        }
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            return Err(Error::Distill(format!("rho must be in (0,1], got {}", self.rho)));
        }
        Ok(())
    }
}

fn mean_of(g: &mut Graph, terms: Vec<Var>) -> Result<Var> {
    let count = terms.len();
    let mut it = terms.into_iter();
    let mut acc = it
        .next()
        .ok_or_else(|| Error::Distill("no terms to average".into()))?;
    for t in it {
        acc = g.add(acc, t)?;
    }
    Ok(g.scale(acc, 1.0 / count as f64))
}

/// `(1/h) Σ_i MSE(teacher_i, student_i)` with constant teacher matrices.
pub fn head_relation_var(g: &mut Graph, teacher: &[Tensor2], student: &[Var]) -> Result<Var> {
    if teacher.len() != student.len() {
        return Err(Error::Distill(format!(
            "teacher has {} heads, student has {}",
            teacher.len(),
            student.len()
        )));
    }
    let mut terms = Vec::with_capacity(teacher.len());
    for (t, &s) in teacher.iter().zip(student) {
        let tv = g.input(t.clone());
        terms.push(g.mse(tv, s)?);
    }
    mean_of(g, terms)
}

fn value_level(teacher: &[Tensor2], student: &[Tensor2]) -> Result<f64> {
    let mut g = Graph::new();
    let s: Vec<Var> = student.iter().map(|t| g.input(t.clone())).collect();
    let l = head_relation_var(&mut g, teacher, &s)?;
    Ok(g.value(l).item())
}

/// Attention relation loss over per-head attention maps.
pub fn attention_relation_loss(teacher: &[Tensor2], student: &[Tensor2]) -> Result<f64> {
    value_level(teacher, student)
}

/// Value relation loss over per-head value matrices.
pub fn value_relation_loss(teacher: &[Tensor2], student: &[Tensor2]) -> Result<f64> {
    value_level(teacher, student)
}

/// MSE between raw logits.
pub fn logits_loss(teacher: &Tensor2, student: &Tensor2) -> Result<f64> {
    if teacher.shape() != student.shape() {
        return Err(Error::Distill(format!(
            "logit shapes differ: teacher {:?}, student {:?}",
            teacher.shape(),
            student.shape()
        )));
    }
    let mut g = Graph::new();
    let a = g.input(teacher.clone());
    let b = g.input(student.clone());
    let l = g.mse(a, b)?;
    Ok(g.value(l).item())
}

fn check_prefix_shapes(teacher: &[Tensor2], student: &[Tensor2]) -> Result<()> {
    if teacher.len() != student.len() || teacher.is_empty() {
        return Err(Error::Distill(format!(
            "teacher prefix has {} heads, student {}",
            teacher.len(),
            student.len()
        )));
    }
    let expected = teacher[0].shape();
    if let Some(bad) = student.iter().find(|s| s.shape() != expected) {
        return Err(Error::Distill(format!(
            "student prefix is {}x{}, expected {}x{} (tasks x prefix rows, head dim)",
            bad.rows(),
            bad.cols(),
            expected.0,
            expected.1
        )));
    }
    Ok(())
}

/// `MSE([P_K^t; P_K,frozen], P_K^stu) + MSE([P_V^t; P_V,frozen], P_V^stu)`,
/// each MSE taken over all heads.
pub fn prefix_relation_var(
    g: &mut Graph,
    teacher_keys: &[Tensor2],
    teacher_values: &[Tensor2],
    student_keys: &[Var],
    student_values: &[Var],
) -> Result<Var> {
    let k = head_relation_var(g, teacher_keys, student_keys)?;
    let v = head_relation_var(g, teacher_values, student_values)?;
    g.add(k, v)
}

pub fn prefix_relation_loss(
    teacher_keys: &[Tensor2],
    teacher_values: &[Tensor2],
    student_keys: &[Tensor2],
    student_values: &[Tensor2],
) -> Result<f64> {
    check_prefix_shapes(teacher_keys, student_keys)?;
    check_prefix_shapes(teacher_values, student_values)?;
    let mut g = Graph::new();
    let sk: Vec<Var> = student_keys.iter().map(|t| g.input(t.clone())).collect();
    let sv: Vec<Var> = student_values.iter().map(|t| g.input(t.clone())).collect();
    let l = prefix_relation_var(&mut g, teacher_keys, teacher_values, &sk, &sv)?;
    Ok(g.value(l).item())
}

/// Hidden widths of a student with ratio `rho`.
pub fn student_widths(teacher: &[usize], rho: f64) -> Vec<usize> {
    teacher
        .iter()
        .map(|&w| ((rho * w as f64).ceil() as usize).clamp(1, w))
        .collect()
}

fn copy(dst: &mut ParamStore, src: &ParamStore, id: ParamId) -> ParamId {
    dst.add(src.get(id).name.clone(), src.value(id).clone())
}

fn copy_block(dst: &mut ParamStore, src: &ParamStore, id: ParamId, rows: usize, cols: usize) -> Result<ParamId> {
    let v = src.value(id).slice_rows(0, rows)?.slice_cols(0, cols)?;
    Ok(dst.add(src.get(id).name.clone(), v))
}

/// Student network: encoding, attention and classes copied from the
/// teacher; MLP truncated to the first `rho`-fraction of neurons per layer;
/// the teacher's prefixes collapsed into one block.
pub fn build_student(teacher: &Network, rho: f64) -> Result<Network> {
    let src = &teacher.store;
    let mut store = ParamStore::new();
    let encoding = GaussianRangeEncoding {
        mu: copy(&mut store, src, teacher.encoding.mu),
        raw_sigma: copy(&mut store, src, teacher.encoding.raw_sigma),
        table: copy(&mut store, src, teacher.encoding.table),
    };
    let a = &teacher.attention;
    let fam = |ids: &[ParamId], store: &mut ParamStore| -> Vec<ParamId> {
        ids.iter().map(|&id| copy(store, src, id)).collect()
    };
    let query = fam(&a.query, &mut store);
    let key = fam(&a.key, &mut store);
    let value = fam(&a.value, &mut store);
    let attention = AttentionBase {
        heads: a.heads,
        dim: a.dim,
        query,
        key,
        value,
        output: copy(&mut store, src, a.output),
        frozen: false,
    };

    let widths = student_widths(&teacher.mlp_widths(), rho);
    let mut mlp = Vec::with_capacity(widths.len());
    let mut d_in = teacher.dim();
    for (layer, &w) in teacher.mlp.iter().zip(&widths) {
        let weight = copy_block(&mut store, src, layer.weight, d_in, w)?;
        let bias = copy_block(&mut store, src, layer.bias, 1, w)?;
        mlp.push(MlpLayer::from_params(weight, bias));
        d_in = w;
    }
    let c = teacher.num_classes();
    let classifier = Classifier {
        weight: copy_block(&mut store, src, teacher.classifier.weight, d_in, c)?,
        bias: copy(&mut store, src, teacher.classifier.bias),
        classes: teacher.classifier.classes.clone(),
    };

    let mut prefixes = PrefixStack::new();
    if let Some(newest) = teacher.prefixes.blocks().first() {
        let (keys, values) = teacher.prefixes.concatenated(src, teacher.heads())?;
        prefixes.push(PrefixBlock::from_values(&mut store, newest.task, keys, values)?)?;
    }
    Ok(Network {
        store,
        encoding,
        attention,
        prefixes,
        mlp,
        classifier,
        dropout: teacher.dropout,
    })
}

struct TeacherTargets {
    logits: Vec<Tensor2>,
    attention: Vec<Vec<Tensor2>>,
    values: Vec<Vec<Tensor2>>,
}

fn teacher_targets(teacher: &Network, xs: &[Tensor2]) -> Result<TeacherTargets> {
    let mut out = TeacherTargets {
        logits: Vec::with_capacity(xs.len()),
        attention: Vec::with_capacity(xs.len()),
        values: Vec::with_capacity(xs.len()),
    };
    for x in xs {
        let mut g = Graph::new();
        let f = teacher.forward(&mut g, x, None)?;
        out.logits.push(g.value(f.logits).clone());
        out.attention
            .push(f.attention.iter().map(|&v| g.value(v).clone()).collect());
        out.values
            .push(f.values.iter().map(|&v| g.value(v).clone()).collect());
    }
    Ok(out)
}

fn labels_for(net: &Network, data: &Dataset) -> Result<Vec<usize>> {
    data.samples
        .iter()
        .map(|s| {
            net.classifier
                .index_of(s.label)
                .ok_or_else(|| Error::State(format!("label {} unknown to the model", s.label)))
        })
        .collect()
}

/// Initial lightweight stage: distills the task-1 teacher into a student
/// with `rho`-scaled MLP using attention, value, logit and label losses.
pub fn distill_initial<R: Rng>(
    teacher: &FullModel,
    data: &Dataset,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<LightModel> {
    let dc = &cfg.distill;
    dc.validate()?;
    if teacher.tasks_learned != 1 {
        return Err(Error::State(format!(
            "initial distillation expects a teacher after task 1, got {} tasks",
            teacher.tasks_learned
        )));
    }
    let mut student = build_student(&teacher.net, dc.rho)?;
    student.set_all_trainable(true);
    let xs = sample_inputs(data)?;
    let labels = labels_for(&student, data)?;
    let targets = teacher_targets(&teacher.net, &xs)?;

    if dc.epochs > 0 {
        let spec = FitSpec {
            epochs: dc.epochs,
            batch_size: cfg.batch_size,
            adam: cfg.adam(),
        };
        fit(
            &mut student,
            &xs,
            &spec,
            rng,
            |g, _net, i, f| {
                let mut total = None;
                let mut add = |g: &mut Graph, term: Var, w: f64| -> Result<()> {
                    if w == 0.0 {
                        return Ok(());
                    }
                    let t = g.scale(term, w);
                    total = Some(match total {
                        Some(acc) => g.add(acc, t)?,
                        None => t,
                    });
                    Ok(())
                };
                let at = head_relation_var(g, &targets.attention[i], &f.attention)?;
                add(g, at, dc.lambda_at)?;
                let vr = head_relation_var(g, &targets.values[i], &f.values)?;
                add(g, vr, dc.lambda_vr)?;
                let tl = g.input(targets.logits[i].clone());
                let lg = g.mse(tl, f.logits)?;
                add(g, lg, dc.lambda_log)?;
                let ce = cross_entropy(g, f.logits, labels[i])?;
                add(g, ce, dc.lambda_ce)?;
                total.ok_or_else(|| Error::Distill("no active loss term in the initial stage".into()))
            },
            |_, _| Ok(None),
        )?;
    }
    freeze_deployed(&mut student);
    Ok(LightModel {
        net: student,
        tasks_learned: 1,
    })
}

fn freeze_deployed(student: &mut Network) {
    student.set_all_trainable(false);
    student.attention.frozen = true;
    let ids: Vec<ParamId> = student.prefixes.blocks().iter().flat_map(|b| b.params()).collect();
    student.store.set_trainable(&ids, false);
}

/// Incremental lightweight stage: the student's single prefix block is
/// replaced by one sized to the teacher's accumulated prefixes, then the
/// block, MLP and classifier are trained with prefix relation, logit and
/// label losses on the new task's data.
pub fn distill_incremental<R: Rng>(
    teacher: &FullModel,
    prev: &LightModel,
    data: &Dataset,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<LightModel> {
    let dc = &cfg.distill;
    dc.validate()?;
    let tnet = &teacher.net;
    if tnet.dim() != prev.net.dim() || tnet.heads() != prev.net.heads() {
        return Err(Error::Distill(format!(
            "teacher d={} h={} vs student d={} h={}",
            tnet.dim(),
            tnet.heads(),
            prev.net.dim(),
            prev.net.heads()
        )));
    }
    let newest = tnet
        .prefixes
        .blocks()
        .first()
        .ok_or_else(|| Error::State("teacher has no prefixes to distill".into()))?;
    let (tk, tv) = tnet.prefixes.concatenated(&tnet.store, tnet.heads())?;

    let mut student = prev.net.clone();
    let first = cfg.ce_scope.first_column(&student);
    let new_classes: Vec<usize> = tnet
        .classifier
        .classes
        .iter()
        .copied()
        .filter(|c| student.classifier.index_of(*c).is_none())
        .collect();
    student.grow_classifier(rng, &new_classes)?;
    if student.classifier.classes != tnet.classifier.classes {
        return Err(Error::Distill("student and teacher class orders diverged".into()));
    }
    install_consolidated_prefix(&mut student, newest.task, &tk, &tv)?;

    student.set_all_trainable(false);
    let block = student.prefixes.blocks()[0].clone();
    let mut trainable = block.params();
    for layer in &student.mlp {
        layer.clear_masks(&mut student.store);
        trainable.extend(layer.params());
    }
    trainable.extend(student.classifier.params());
    student.store.set_trainable(&trainable, true);

    let xs = sample_inputs(data)?;
    let labels = labels_for(&student, data)?;
    let targets = teacher_targets(tnet, &xs)?;

    if dc.epochs > 0 {
        let spec = FitSpec {
            epochs: dc.epochs,
            batch_size: cfg.batch_size,
            adam: cfg.adam(),
        };
        fit(
            &mut student,
            &xs,
            &spec,
            rng,
            |g, _net, i, f| {
                let tl = g.input(targets.logits[i].clone());
                let lg = g.mse(tl, f.logits)?;
                let lg = g.scale(lg, dc.lambda_log);
                let ce = cross_entropy_from(g, f.logits, labels[i], first)?;
                let ce = g.scale(ce, dc.lambda_ce);
                g.add(lg, ce)
            },
            |g, net| {
                if dc.lambda_p == 0.0 {
                    return Ok(None);
                }
                let b = &net.prefixes.blocks()[0];
                let sk: Vec<Var> = b.keys.iter().map(|&id| g.param(&net.store, id)).collect();
                let sv: Vec<Var> = b.values.iter().map(|&id| g.param(&net.store, id)).collect();
                let lp = prefix_relation_var(g, &tk, &tv, &sk, &sv)?;
                Ok(Some(g.scale(lp, dc.lambda_p)))
            },
        )?;
    }
    freeze_deployed(&mut student);
    Ok(LightModel {
        net: student,
        tasks_learned: teacher.tasks_learned,
    })
}

/// Resizes (or creates) the student's only prefix block to hold copies of
/// the teacher's concatenated prefixes.
fn install_consolidated_prefix(
    student: &mut Network,
    task: usize,
    keys: &[Tensor2],
    values: &[Tensor2],
) -> Result<()> {
    match student.prefixes.blocks().first().cloned() {
        Some(block) => {
            for (id, k) in block.keys.iter().zip(keys) {
                student.store.get_mut(*id).replace_value(k.clone());
            }
            for (id, v) in block.values.iter().zip(values) {
                student.store.get_mut(*id).replace_value(v.clone());
            }
            let mut stack = PrefixStack::new();
            stack.push(PrefixBlock {
                task,
                frozen: false,
                ..block
            })?;
            student.prefixes = stack;
        }
        None => {
            let block =
                PrefixBlock::from_values(&mut student.store, task, keys.to_vec(), values.to_vec())?;
            student.prefixes.push(block)?;
        }
    }
    Ok(())
}
