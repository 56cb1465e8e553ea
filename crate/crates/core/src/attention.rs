//! Multi-head self-attention with per-task key/value prefixes.
//!
//! Prefix rows are concatenated along the sequence axis in front of the
//! keys and values computed from the input, newest task first:
//! `K' = [P_K^t; P_K^{t-1}; ...; P_K^1; X'W^K]`, likewise for `V'`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{randn, Graph, ParamId, ParamStore, Tensor2, Var};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttentionBase {
    pub heads: usize,
    pub dim: usize,
    pub query: Vec<ParamId>,
    pub key: Vec<ParamId>,
    pub value: Vec<ParamId>,
    pub output: ParamId,
    pub frozen: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PrefixBlock {
    pub task: usize,
    pub keys: Vec<ParamId>,
    pub values: Vec<ParamId>,
    pub frozen: bool,
}

/// Bottleneck `tanh(X W_down) W_up`, used only to initialize prefixes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParallelAdapter {
    pub down: Tensor2,
    pub up: Tensor2,
}

/// Ordered prefix blocks, newest first.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct PrefixStack {
    blocks: Vec<PrefixBlock>,
}

pub struct AttentionOutput {
    pub output: Var,
    /// Per-head attention weights, `n × (prefix rows + n)`.
    pub weights: Vec<Var>,
    /// Per-head values computed from the input, `n × d/h`.
    pub values: Vec<Var>,
}

impl AttentionBase {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        dim: usize,
        heads: usize,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!(
                "model dim {dim} is not divisible by {heads} heads"
            )));
        }
        let hd = dim / heads;
        let std = 1.0 / (dim as f64).sqrt();
        let mut family = |tag: &str, rng: &mut R| -> Vec<ParamId> {
            (0..heads)
                .map(|h| store.add(format!("attn.{tag}.{h}"), randn(rng, dim, hd, std)))
                .collect()
        };
        let query = family("q", rng);
        let key = family("k", rng);
        let value = family("v", rng);
        let output = store.add("attn.o", randn(rng, dim, dim, std));
        Ok(Self {
            heads,
            dim,
            query,
            key,
            value,
            output,
            frozen: false,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut ids = Vec::with_capacity(3 * self.heads + 1);
        ids.extend(&self.query);
        ids.extend(&self.key);
        ids.extend(&self.value);
        ids.push(self.output);
        ids
    }

    pub fn freeze(&mut self, store: &mut ParamStore) {
        store.set_trainable(&self.params(), false);
        self.frozen = true;
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        prefixes: &[&PrefixBlock],
    ) -> Result<AttentionOutput> {
        let (n, d) = g.value(x).shape();
        if d != self.dim {
            return Err(Error::dim(
                "mhsa",
                format!("input {n}x{d}, model dim {}", self.dim),
            ));
        }
        let hd = self.head_dim();
        for block in prefixes {
            for &id in block.keys.iter().chain(&block.values) {
                if store.value(id).cols() != hd {
                    return Err(Error::dim(
                        "mhsa_with_prefixes",
                        format!(
                            "prefix of task {} has head dim {}, expected {hd}",
                            block.task,
                            store.value(id).cols()
                        ),
                    ));
                }
            }
        }
        let scale = 1.0 / (hd as f64).sqrt();
        let mut heads = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        let mut values = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let wq = g.param(store, self.query[h]);
            let wk = g.param(store, self.key[h]);
            let wv = g.param(store, self.value[h]);
            let q = g.matmul(x, wq)?;
            let k = g.matmul(x, wk)?;
            let v = g.matmul(x, wv)?;
            let (k_all, v_all) = if prefixes.is_empty() {
                (k, v)
            } else {
                let mut ks: Vec<Var> = prefixes.iter().map(|b| g.param(store, b.keys[h])).collect();
                let mut vs: Vec<Var> =
                    prefixes.iter().map(|b| g.param(store, b.values[h])).collect();
                ks.push(k);
                vs.push(v);
                (g.concat_rows(&ks)?, g.concat_rows(&vs)?)
            };
            let kt = g.transpose(k_all);
            let scores = g.matmul(q, kt)?;
            let scores = g.scale(scores, scale);
            let attn = g.row_softmax(scores);
            heads.push(g.matmul(attn, v_all)?);
            weights.push(attn);
            values.push(v);
        }
        let cat = if heads.len() == 1 {
            heads[0]
        } else {
            g.concat_cols(&heads)?
        };
        let wo = g.param(store, self.output);
        let output = g.matmul(cat, wo)?;
        Ok(AttentionOutput {
            output,
            weights,
            values,
        })
    }
}

/// Plain multi-head self-attention on an `n×d` input.
pub fn mhsa(store: &ParamStore, base: &AttentionBase, x: &Tensor2) -> Result<Tensor2> {
    mhsa_with_prefixes(store, base, &[], x)
}

/// Attention with prefix blocks given newest first.
pub fn mhsa_with_prefixes(
    store: &ParamStore,
    base: &AttentionBase,
    prefixes: &[&PrefixBlock],
    x: &Tensor2,
) -> Result<Tensor2> {
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let out = base.forward(&mut g, store, xv, prefixes)?;
    Ok(g.value(out.output).clone())
}

impl PrefixBlock {
    /// Registers a new trainable block from per-head key and value rows.
    pub fn from_values(
        store: &mut ParamStore,
        task: usize,
        keys: Vec<Tensor2>,
        values: Vec<Tensor2>,
    ) -> Result<Self> {
        if keys.len() != values.len() || keys.is_empty() {
            return Err(Error::PrefixInit(format!(
                "{} key heads vs {} value heads",
                keys.len(),
                values.len()
            )));
        }
        let shape = keys[0].shape();
        if shape.0 == 0 || keys.iter().chain(&values).any(|t| t.shape() != shape) {
            return Err(Error::PrefixInit("inconsistent prefix shapes".into()));
        }
        let keys = keys
            .into_iter()
            .enumerate()
            .map(|(h, t)| store.add(format!("prefix.{task}.k.{h}"), t))
            .collect();
        let values = values
            .into_iter()
            .enumerate()
            .map(|(h, t)| store.add(format!("prefix.{task}.v.{h}"), t))
            .collect();
        Ok(Self {
            task,
            keys,
            values,
            frozen: false,
        })
    }

    pub fn rows(&self, store: &ParamStore) -> usize {
        store.value(self.keys[0]).rows()
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.keys.iter().chain(&self.values).copied().collect()
    }

    pub fn key_values(&self, store: &ParamStore) -> Vec<Tensor2> {
        self.keys.iter().map(|&id| store.value(id).clone()).collect()
    }

    pub fn value_values(&self, store: &ParamStore) -> Vec<Tensor2> {
        self.values.iter().map(|&id| store.value(id).clone()).collect()
    }
}

impl PrefixStack {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn blocks(&self) -> &[PrefixBlock] {
        &self.blocks
    }

    pub fn refs(&self) -> Vec<&PrefixBlock> {
        self.blocks.iter().collect()
    }

    pub fn current(&self) -> Option<&PrefixBlock> {
        self.blocks.first().filter(|b| !b.frozen)
    }

    pub fn total_rows(&self, store: &ParamStore) -> usize {
        self.blocks.iter().map(|b| b.rows(store)).sum()
    }

    /// Prepends a new trainable block. Only one block may be trainable.
    pub fn push(&mut self, block: PrefixBlock) -> Result<()> {
        if self.current().is_some() {
            return Err(Error::State(
                "previous prefix block must be frozen before adding a new one".into(),
            ));
        }
        self.blocks.insert(0, block);
        Ok(())
    }

    /// Freezes the trainable block of `finished_task`.
    pub fn freeze_and_accumulate(&mut self, store: &mut ParamStore, finished_task: usize) -> Result<()> {
        let block = self
            .blocks
            .iter_mut()
            .find(|b| b.task == finished_task)
            .ok_or_else(|| Error::State(format!("no prefix block for task {finished_task}")))?;
        if block.frozen {
            return Err(Error::State(format!(
                "prefix block of task {finished_task} is already frozen"
            )));
        }
        block.frozen = true;
        store.set_trainable(&block.params(), false);
        Ok(())
    }

    /// Per-head concatenation of every block's keys and values, newest first.
    pub fn concatenated(&self, store: &ParamStore, heads: usize) -> Result<(Vec<Tensor2>, Vec<Tensor2>)> {
        let mut keys = Vec::with_capacity(heads);
        let mut values = Vec::with_capacity(heads);
        for h in 0..heads {
            let k: Vec<&Tensor2> = self.blocks.iter().map(|b| store.value(b.keys[h])).collect();
            let v: Vec<&Tensor2> = self.blocks.iter().map(|b| store.value(b.values[h])).collect();
            keys.push(Tensor2::concat_rows(&k)?);
            values.push(Tensor2::concat_rows(&v)?);
        }
        Ok((keys, values))
    }
}

impl ParallelAdapter {
    pub fn init<R: Rng + ?Sized>(rng: &mut R, dim: usize, rank: usize) -> Result<Self> {
        if rank == 0 {
            return Err(Error::Config("adapter rank must be at least 1".into()));
        }
        Ok(Self {
            down: randn(rng, dim, rank, 1.0 / (dim as f64).sqrt()),
            up: randn(rng, rank, dim, 1.0 / (rank as f64).sqrt()),
        })
    }

    pub fn rank(&self) -> usize {
        self.down.cols()
    }

    /// `tanh(X W_down) W_up` for one `n×d` input.
    pub fn apply(&self, x: &Tensor2) -> Result<Tensor2> {
        x.matmul(&self.down)?.map(f64::tanh).matmul(&self.up)
    }
}

/// Means of `p` equal-width row segments.
pub fn segment_pool(x: &Tensor2, p: usize) -> Result<Tensor2> {
    let n = x.rows();
    if p == 0 || p > n {
        return Err(Error::PrefixInit(format!(
            "cannot pool {n} rows into {p} prefix rows"
        )));
    }
    let mut out = Tensor2::zeros(p, x.cols());
    for k in 0..p {
        let (lo, hi) = (k * n / p, (k + 1) * n / p);
        let seg = x.slice_rows(lo, hi - lo)?.mean_rows();
        for c in 0..x.cols() {
            out.set(k, c, seg.get(0, c));
        }
    }
    Ok(out)
}

/// Prefix initialization from a task's encoded inputs: the adapter output
/// averaged over the batch, pooled to `p` rows and split per head.
pub fn adapter_init_prefix(
    adapter: &ParallelAdapter,
    batch: &[Tensor2],
    p: usize,
    heads: usize,
) -> Result<Vec<Tensor2>> {
    let first = batch
        .first()
        .ok_or_else(|| Error::PrefixInit("empty task batch".into()))?;
    let (n, d) = first.shape();
    if p > n {
        return Err(Error::PrefixInit(format!(
            "prefix length {p} exceeds sequence length {n}"
        )));
    }
    if heads == 0 || d % heads != 0 {
        return Err(Error::PrefixInit(format!("{d} columns over {heads} heads")));
    }
    let mut acc = Tensor2::zeros(n, d);
    for x in batch {
        acc = acc.add(&adapter.apply(x)?)?;
    }
    let mean = acc.scale(1.0 / batch.len() as f64);
    let pooled = segment_pool(&mean, p)?;
    let hd = d / heads;
    (0..heads).map(|h| pooled.slice_cols(h * hd, hd)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    #[test]
    fn rejects_indivisible_heads() {
        let mut store = ParamStore::new();
        assert!(AttentionBase::init(&mut store, &mut rng(), 10, 3).is_err());
    }

    #[test]
    fn single_row_attends_to_itself() {
        let mut store = ParamStore::new();
        let mut r = rng();
        let base = AttentionBase::init(&mut store, &mut r, 4, 2).unwrap();
        let x = randn(&mut r, 1, 4, 1.0);
        let out = mhsa(&store, &base, &x).unwrap();
        let heads: Vec<Tensor2> = base
            .value
            .iter()
            .map(|&id| x.matmul(store.value(id)).unwrap())
            .collect();
        let refs: Vec<&Tensor2> = heads.iter().collect();
        let expected = Tensor2::concat_cols(&refs)
            .unwrap()
            .matmul(store.value(base.output))
            .unwrap();
        assert!(out.max_abs_diff(&expected) < 1e-12);
    }

    #[test]
    fn empty_prefix_list_is_bitwise_plain() {
        let mut store = ParamStore::new();
        let mut r = rng();
        let base = AttentionBase::init(&mut store, &mut r, 6, 3).unwrap();
        let x = randn(&mut r, 5, 6, 1.0);
        let a = mhsa(&store, &base, &x).unwrap();
        let b = mhsa_with_prefixes(&store, &base, &[], &x).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn head_dim_mismatch_is_error() {
        let mut store = ParamStore::new();
        let mut r = rng();
        let base = AttentionBase::init(&mut store, &mut r, 4, 2).unwrap();
        let block =
            PrefixBlock::from_values(&mut store, 1, vec![Tensor2::zeros(2, 3); 2], vec![Tensor2::zeros(2, 3); 2])
                .unwrap();
        let x = Tensor2::zeros(3, 4);
        assert!(mhsa_with_prefixes(&store, &base, &[&block], &x).is_err());
    }

    #[test]
    fn zero_up_projection_gives_zero_prefix() {
        let mut r = rng();
        let mut adapter = ParallelAdapter::init(&mut r, 4, 2).unwrap();
        adapter.up = Tensor2::zeros(2, 4);
        let batch = vec![randn(&mut r, 6, 4, 1.0)];
        let p = adapter_init_prefix(&adapter, &batch, 3, 2).unwrap();
        assert!(p.iter().all(|t| t.data().iter().all(|&v| v == 0.0)));
        assert_eq!(p[0].shape(), (3, 2));
    }

    #[test]
    fn identical_batch_matches_single_sample() {
        let mut r = rng();
        let adapter = ParallelAdapter::init(&mut r, 4, 2).unwrap();
        let x = randn(&mut r, 6, 4, 1.0);
        let one = adapter_init_prefix(&adapter, &[x.clone()], 2, 2).unwrap();
        let many = adapter_init_prefix(&adapter, &[x.clone(), x.clone(), x], 2, 2).unwrap();
        for (a, b) in one.iter().zip(&many) {
            assert!(a.max_abs_diff(b) < 1e-12);
        }
    }

    #[test]
    fn prefix_longer_than_sequence_is_error() {
        let mut r = rng();
        let adapter = ParallelAdapter::init(&mut r, 4, 2).unwrap();
        let err = adapter_init_prefix(&adapter, &[Tensor2::zeros(2, 4)], 3, 2).unwrap_err();
        assert!(matches!(err, Error::PrefixInit(_)));
        assert!(adapter_init_prefix(&adapter, &[], 1, 2).is_err());
    }

    #[test]
    fn freeze_twice_is_error_and_counts_accumulate() {
        let mut store = ParamStore::new();
        let mut stack = PrefixStack::new();
        for task in 1..=3 {
            let block = PrefixBlock::from_values(
                &mut store,
                task,
                vec![Tensor2::zeros(4, 2); 2],
                vec![Tensor2::zeros(4, 2); 2],
            )
            .unwrap();
            stack.push(block).unwrap();
            stack.freeze_and_accumulate(&mut store, task).unwrap();
        }
        assert_eq!(stack.total_rows(&store), 12);
        assert_eq!(stack.blocks()[0].task, 3);
        assert!(stack.freeze_and_accumulate(&mut store, 3).is_err());
    }

    #[test]
    fn cannot_stack_two_trainable_blocks() {
        let mut store = ParamStore::new();
        let mut stack = PrefixStack::new();
        let mk = |store: &mut ParamStore, t| {
            PrefixBlock::from_values(store, t, vec![Tensor2::zeros(1, 2)], vec![Tensor2::zeros(1, 2)])
                .unwrap()
        };
        let a = mk(&mut store, 1);
        let b = mk(&mut store, 2);
        stack.push(a).unwrap();
        assert!(stack.push(b).is_err());
    }
}
