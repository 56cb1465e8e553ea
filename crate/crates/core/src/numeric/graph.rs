//! Define-by-run reverse-mode differentiation over [`Tensor2`] values.
//!
//! A [`Graph`] is built fresh for every batch. Parameters enter through
//! [`Graph::param`], which records a binding so that [`Graph::backward_into`]
//! can write the (masked) gradients back into the owning [`ParamStore`].

use std::collections::HashMap;

use super::param::{ParamId, ParamStore};
use super::tensor::Tensor2;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    RowSoftmax(Var),
    Tanh(Var),
    Relu(Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Tensor2),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    MeanRows(Var),
    Mse(Var, Var),
    SoftmaxCe(Var, Vec<usize>),
    GaussianLogits { mu: Var, raw_sigma: Var },
}

#[derive(Debug)]
struct Node {
    value: Tensor2,
    op: Op,
    requires_grad: bool,
}

/// Added to softplus(raw) so the Gaussian widths stay strictly positive.
pub const SIGMA_FLOOR: f64 = 1e-3;

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

pub fn inverse_softplus(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor2>>,
    bindings: Vec<(ParamId, Var)>,
    bound: HashMap<ParamId, Var>,
    backward_done: bool,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor2, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor2 {
        &self.nodes[v.0].value
    }

    /// Constant input; receives no gradient.
    pub fn input(&mut self, value: Tensor2) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Free leaf that does receive a gradient. Used by gradient checks.
    pub fn variable(&mut self, value: Tensor2) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Binds a parameter. Repeated calls with the same id return the same
    /// node so gradients from every use accumulate in one place.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let p = store.get(id);
        let v = self.push(p.value.clone(), Op::Leaf, p.trainable);
        self.bound.insert(id, v);
        self.bindings.push((id, v));
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        let rg = self.rg(a);
        self.push(value, Op::Transpose(a), rg)
    }

    pub fn row_softmax(&mut self, a: Var) -> Var {
        let value = self.value(a).row_softmax();
        let rg = self.rg(a);
        self.push(value, Op::RowSoftmax(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::tanh);
        let rg = self.rg(a);
        self.push(value, Op::Tanh(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|v| v.max(0.0));
        let rg = self.rg(a);
        self.push(value, Op::Relu(a), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    /// `a + 1·row`, broadcasting a 1×c row over every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let value = self.value(a).add_row(self.value(row))?;
        let rg = self.rg(a) || self.rg(row);
        Ok(self.push(value, Op::AddRow(a, row), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).scale(s);
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, s), rg)
    }

    /// Elementwise product with a constant (dropout masks).
    pub fn mul_const(&mut self, a: Var, c: Tensor2) -> Result<Var> {
        let value = self.value(a).zip_map(&c, "mul_const", |x, y| x * y)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::MulConst(a, c), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let refs: Vec<&Tensor2> = parts.iter().map(|&v| self.value(v)).collect();
        let value = Tensor2::concat_rows(&refs)?;
        let rg = parts.iter().any(|&v| self.rg(v));
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let refs: Vec<&Tensor2> = parts.iter().map(|&v| self.value(v)).collect();
        let value = Tensor2::concat_cols(&refs)?;
        let rg = parts.iter().any(|&v| self.rg(v));
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let value = self.value(a).slice_rows(start, len)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::SliceRows(a, start), rg))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let value = self.value(a).slice_cols(start, len)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::SliceCols(a, start), rg))
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let value = self.value(a).mean_rows();
        let rg = self.rg(a);
        self.push(value, Op::MeanRows(a), rg)
    }

    /// Mean of squared differences, as a 1×1 node.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        va.same_shape(vb, "mse")?;
        let n = va.len().max(1) as f64;
        let s: f64 = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor2::scalar(s / n), Op::Mse(a, b), rg))
    }

    /// Softmax cross-entropy averaged over rows; `labels[r]` indexes a column.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let l = self.value(logits);
        if labels.len() != l.rows() {
            return Err(Error::dim(
                "softmax_cross_entropy",
                format!("{} labels for logits {:?}", labels.len(), l.shape()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= l.cols()) {
            return Err(Error::dim(
                "softmax_cross_entropy",
                format!("label {bad} out of range for {} classes", l.cols()),
            ));
        }
        let mut total = 0.0;
        for (r, &y) in labels.iter().enumerate() {
            let row = l.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[y];
        }
        let value = Tensor2::scalar(total / labels.len().max(1) as f64);
        let rg = self.rg(logits);
        Ok(self.push(value, Op::SoftmaxCe(logits, labels.to_vec()), rg))
    }

    /// Log-density logits of `G` Gaussian ranges evaluated at positions
    /// 1..=n: `b[i][j] = -(i - mu_j)^2 / (2 sigma_j^2) - ln sigma_j` with
    /// `sigma_j = softplus(raw_j) + SIGMA_FLOOR`. `mu` and `raw_sigma` are 1×G.
    pub fn gaussian_logits(&mut self, mu: Var, raw_sigma: Var, n: usize) -> Result<Var> {
        let (m, r) = (self.value(mu), self.value(raw_sigma));
        if m.rows() != 1 || m.shape() != r.shape() {
            return Err(Error::dim(
                "gaussian_logits",
                format!("mu {:?}, sigma {:?}", m.shape(), r.shape()),
            ));
        }
        let g = m.cols();
        let mut out = Tensor2::zeros(n, g);
        for j in 0..g {
            let sigma = softplus(r.data()[j]) + SIGMA_FLOOR;
            let mu_j = m.data()[j];
            for i in 0..n {
                let pos = (i + 1) as f64;
                let z = pos - mu_j;
                out.set(i, j, -(z * z) / (2.0 * sigma * sigma) - sigma.ln());
            }
        }
        let rg = self.rg(mu) || self.rg(raw_sigma);
        Ok(self.push(out, Op::GaussianLogits { mu, raw_sigma }, rg))
    }

    /// Gradient of the last backward pass with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor2> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    fn accumulate(grads: &mut [Option<Tensor2>], v: Var, g: Tensor2) {
        match &mut grads[v.0] {
            Some(acc) => {
                for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::State(
                "backward called before the forward pass built the loss".into(),
            ));
        }
        if self.nodes[loss.0].value.shape() != (1, 1) {
            return Err(Error::State(format!(
                "loss must be 1x1, got {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor2>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor2::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let Some(out_grad) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            // Leaves and constants keep their gradient so callers can read it back.
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                grads[idx] = Some(out_grad);
                continue;
            }
            let nodes = &self.nodes;
            let needs = |v: &Var| nodes[v.0].requires_grad;
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    if needs(a) {
                        let g = out_grad.matmul(&nodes[b.0].value.transpose())?;
                        Self::accumulate(&mut grads, *a, g);
                    }
                    if needs(b) {
                        let g = nodes[a.0].value.transpose().matmul(&out_grad)?;
                        Self::accumulate(&mut grads, *b, g);
                    }
                }
                Op::Transpose(a) => Self::accumulate(&mut grads, *a, out_grad.transpose()),
                Op::RowSoftmax(a) => {
                    let y = &node.value;
                    let mut g = Tensor2::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let dr = out_grad.row(r);
                        let dot: f64 = yr.iter().zip(dr).map(|(p, q)| p * q).sum();
                        for c in 0..y.cols() {
                            g.set(r, c, yr[c] * (dr[c] - dot));
                        }
                    }
                    Self::accumulate(&mut grads, *a, g);
                }
                Op::Tanh(a) => {
                    let g = node
                        .value
                        .zip_map(&out_grad, "tanh_grad", |y, d| d * (1.0 - y * y))?;
                    Self::accumulate(&mut grads, *a, g);
                }
                Op::Relu(a) => {
                    let g = nodes[a.0].value.zip_map(&out_grad, "relu_grad", |x, d| {
                        if x > 0.0 {
                            d
                        } else {
                            0.0
                        }
                    })?;
                    Self::accumulate(&mut grads, *a, g);
                }
                Op::Add(a, b) => {
                    if needs(a) {
                        Self::accumulate(&mut grads, *a, out_grad.clone());
                    }
                    if needs(b) {
                        Self::accumulate(&mut grads, *b, out_grad);
                    }
                }
                Op::Sub(a, b) => {
                    if needs(a) {
                        Self::accumulate(&mut grads, *a, out_grad.clone());
                    }
                    if needs(b) {
                        Self::accumulate(&mut grads, *b, out_grad.scale(-1.0));
                    }
                }
                Op::AddRow(a, row) => {
                    if needs(row) {
                        let col_sums = out_grad.mean_rows().scale(out_grad.rows() as f64);
                        Self::accumulate(&mut grads, *row, col_sums);
                    }
                    if needs(a) {
                        Self::accumulate(&mut grads, *a, out_grad);
                    }
                }
                Op::Scale(a, s) => Self::accumulate(&mut grads, *a, out_grad.scale(*s)),
                Op::MulConst(a, c) => {
                    let g = out_grad.zip_map(c, "mul_const_grad", |d, m| d * m)?;
                    Self::accumulate(&mut grads, *a, g);
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let rows = nodes[p.0].value.rows();
                        if needs(p) {
                            Self::accumulate(&mut grads, *p, out_grad.slice_rows(start, rows)?);
                        }
                        start += rows;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let cols = nodes[p.0].value.cols();
                        if needs(p) {
                            Self::accumulate(&mut grads, *p, out_grad.slice_cols(start, cols)?);
                        }
                        start += cols;
                    }
                }
                Op::SliceRows(a, start) => {
                    let src = &nodes[a.0].value;
                    let mut g = Tensor2::zeros(src.rows(), src.cols());
                    let cols = src.cols();
                    g.data_mut()[start * cols..start * cols + out_grad.len()]
                        .copy_from_slice(out_grad.data());
                    Self::accumulate(&mut grads, *a, g);
                }
                Op::SliceCols(a, start) => {
                    let src = &nodes[a.0].value;
                    let mut g = Tensor2::zeros(src.rows(), src.cols());
                    for r in 0..out_grad.rows() {
                        for c in 0..out_grad.cols() {
                            g.set(r, start + c, out_grad.get(r, c));
                        }
                    }
                    Self::accumulate(&mut grads, *a, g);
                }
                Op::MeanRows(a) => {
                    let src = &nodes[a.0].value;
                    let inv = 1.0 / src.rows() as f64;
                    let mut g = Tensor2::zeros(src.rows(), src.cols());
                    for r in 0..src.rows() {
                        for c in 0..src.cols() {
                            g.set(r, c, out_grad.get(0, c) * inv);
                        }
                    }
                    Self::accumulate(&mut grads, *a, g);
                }
                Op::Mse(a, b) => {
                    let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                    let k = 2.0 * out_grad.item() / va.len().max(1) as f64;
                    let diff = va.zip_map(vb, "mse_grad", |x, y| k * (x - y))?;
                    if needs(b) {
                        Self::accumulate(&mut grads, *b, diff.scale(-1.0));
                    }
                    if needs(a) {
                        Self::accumulate(&mut grads, *a, diff);
                    }
                }
                Op::SoftmaxCe(a, labels) => {
                    let logits = &nodes[a.0].value;
                    let mut g = logits.row_softmax();
                    let k = out_grad.item() / labels.len().max(1) as f64;
                    for (r, &y) in labels.iter().enumerate() {
                        let v = g.get(r, y);
                        g.set(r, y, v - 1.0);
                    }
                    Self::accumulate(&mut grads, *a, g.scale(k));
                }
                Op::GaussianLogits { mu, raw_sigma } => {
                    let (m, raw) = (&nodes[mu.0].value, &nodes[raw_sigma.0].value);
                    let g_count = m.cols();
                    let mut d_mu = Tensor2::zeros(1, g_count);
                    let mut d_raw = Tensor2::zeros(1, g_count);
                    for j in 0..g_count {
                        let sigma = softplus(raw.data()[j]) + SIGMA_FLOOR;
                        let ds_draw = sigmoid(raw.data()[j]);
                        let (mut acc_mu, mut acc_sigma) = (0.0, 0.0);
                        for i in 0..out_grad.rows() {
                            let z = (i + 1) as f64 - m.data()[j];
                            let d = out_grad.get(i, j);
                            acc_mu += d * z / (sigma * sigma);
                            acc_sigma += d * (z * z / (sigma * sigma * sigma) - 1.0 / sigma);
                        }
                        d_mu.data_mut()[j] = acc_mu;
                        d_raw.data_mut()[j] = acc_sigma * ds_draw;
                    }
                    if needs(mu) {
                        Self::accumulate(&mut grads, *mu, d_mu);
                    }
                    if needs(raw_sigma) {
                        Self::accumulate(&mut grads, *raw_sigma, d_raw);
                    }
                }
            }
        }
        self.grads = grads;
        self.backward_done = true;
        Ok(())
    }

    /// Runs [`Graph::backward`] and adds the gradients of every bound
    /// trainable parameter into `store`, multiplied by its mask.
    pub fn backward_into(&mut self, loss: Var, store: &mut ParamStore) -> Result<()> {
        self.backward(loss)?;
        self.write_grads(store)
    }

    pub fn write_grads(&self, store: &mut ParamStore) -> Result<()> {
        if !self.backward_done {
            return Err(Error::State("gradients requested before backward".into()));
        }
        for &(id, var) in &self.bindings {
            let p = store.get_mut(id);
            if !p.trainable {
                continue;
            }
            let Some(g) = self.grad(var) else { continue };
            g.same_shape(&p.value, "write_grads")?;
            let mask = p.grad_mask.as_ref().map(Tensor2::data);
            for (i, (acc, &v)) in p.grad.data_mut().iter_mut().zip(g.data()).enumerate() {
                *acc += match mask {
                    Some(m) => v * m[i],
                    None => v,
                };
            }
        }
        store.mark_grads_ready();
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mse_grad_is_twice_difference() {
        let mut g = Graph::new();
        let a = g.variable(Tensor2::scalar(1.0));
        let b = g.input(Tensor2::scalar(0.0));
        let l = g.mse(a, b).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.grad(a).unwrap().item(), 2.0);
    }

    #[test]
    fn zero_mask_blocks_gradient() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor2::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        store
            .get_mut(w)
            .set_mask(Some(Tensor2::zeros(2, 2)))
            .unwrap();
        let mut g = Graph::new();
        let wv = g.param(&store, w);
        let x = g.input(Tensor2::from_rows(&[vec![1.0], vec![-1.0]]));
        let y = g.matmul(wv, x).unwrap();
        let ones = g.input(Tensor2::filled(1, 2, 1.0));
        let s = g.matmul(ones, y).unwrap();
        g.backward_into(s, &mut store).unwrap();
        assert!(store.get(w).grad.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn non_trainable_params_get_no_grad() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor2::scalar(3.0));
        store.get_mut(w).trainable = false;
        let mut g = Graph::new();
        let wv = g.param(&store, w);
        let z = g.input(Tensor2::scalar(0.0));
        let l = g.mse(wv, z).unwrap();
        g.backward_into(l, &mut store).unwrap();
        assert_eq!(store.get(w).grad.item(), 0.0);
    }

    #[test]
    fn backward_before_forward_is_state_error() {
        let mut empty = Graph::new();
        let mut other = Graph::new();
        let v = other.variable(Tensor2::scalar(1.0));
        assert!(matches!(empty.backward(v), Err(Error::State(_))));
        let mut store = ParamStore::new();
        assert!(matches!(empty.write_grads(&mut store), Err(Error::State(_))));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let v = g.variable(Tensor2::zeros(2, 2));
        assert!(g.backward(v).is_err());
    }

    #[test]
    fn repeated_param_binding_shares_node() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor2::scalar(2.0));
        let mut g = Graph::new();
        let a = g.param(&store, w);
        let b = g.param(&store, w);
        assert_eq!(a, b);
        let prod = g.matmul(a, b).unwrap();
        g.backward_into(prod, &mut store).unwrap();
        // d(w^2)/dw = 2w
        assert_eq!(store.get(w).grad.item(), 4.0);
    }
}
