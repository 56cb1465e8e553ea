//! Learnable Gaussian range positional encoding.
//!
//! Each of `G` ranges is a Gaussian over time positions with trainable
//! centre `mu_j` and width `sigma_j`. Position `i` (1-based) gets the
//! softmax of the Gaussian log-densities as its weights over ranges, and
//! the encoded stream is `X + beta · E` with a learnable `G×d` table `E`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{inverse_softplus, randn, Graph, ParamId, ParamStore, Tensor2, Var, SIGMA_FLOOR};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EncodingConfig {
    pub ranges: usize,
    pub sigma: f64,
}

impl Default for EncodingConfig {
    fn default() -> Self {
        Self {
            ranges: 10,
            sigma: 8.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GaussianRangeEncoding {
    pub mu: ParamId,
    /// Unconstrained width; `sigma = softplus(raw) + SIGMA_FLOOR`.
    pub raw_sigma: ParamId,
    pub table: ParamId,
}

/// Range centres at the midpoints of `G` equal segments of `[0, n]`, e.g.
/// 13.5, 40.5, ..., 256.5 for n = 270 and G = 10.
pub fn default_centres(n: usize, ranges: usize) -> Vec<f64> {
    let step = n as f64 / ranges as f64;
    (0..ranges).map(|j| (j as f64 + 0.5) * step).collect()
}

impl GaussianRangeEncoding {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        n: usize,
        d: usize,
        cfg: EncodingConfig,
    ) -> Result<Self> {
        if cfg.ranges == 0 || !(cfg.sigma > SIGMA_FLOOR) {
            return Err(Error::Config(format!(
                "encoding needs ranges >= 1 and sigma > {SIGMA_FLOOR}, got {cfg:?}"
            )));
        }
        let g = cfg.ranges;
        let mu = Tensor2::from_vec(1, g, default_centres(n, g))?;
        let raw = Tensor2::filled(1, g, inverse_softplus(cfg.sigma - SIGMA_FLOOR));
        let table = randn(rng, g, d, 0.1);
        Ok(Self {
            mu: store.add("encoding.mu", mu),
            raw_sigma: store.add("encoding.raw_sigma", raw),
            table: store.add("encoding.table", table),
        })
    }

    pub fn ranges(&self, store: &ParamStore) -> usize {
        store.value(self.mu).cols()
    }

    pub fn dim(&self, store: &ParamStore) -> usize {
        store.value(self.table).cols()
    }

    pub fn params(&self) -> [ParamId; 3] {
        [self.mu, self.raw_sigma, self.table]
    }

    pub fn sigmas(&self, store: &ParamStore) -> Vec<f64> {
        store
            .value(self.raw_sigma)
            .data()
            .iter()
            .map(|&r| crate::numeric::softplus(r) + SIGMA_FLOOR)
            .collect()
    }

    /// `n×G` log-density logits.
    pub fn logits_var(&self, g: &mut Graph, store: &ParamStore, n: usize) -> Result<Var> {
        let mu = g.param(store, self.mu);
        let raw = g.param(store, self.raw_sigma);
        g.gaussian_logits(mu, raw, n)
    }

    /// Row-stochastic `n×G` range weights.
    pub fn weights_var(&self, g: &mut Graph, store: &ParamStore, n: usize) -> Result<Var> {
        let b = self.logits_var(g, store, n)?;
        Ok(g.row_softmax(b))
    }

    /// `X + beta · E` for an `n×d` input node.
    pub fn encode_var(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let (n, d) = g.value(x).shape();
        if d != self.dim(store) {
            return Err(Error::dim(
                "encode",
                format!("input has {d} columns, encoding table has {}", self.dim(store)),
            ));
        }
        let beta = self.weights_var(g, store, n)?;
        let table = g.param(store, self.table);
        let bias = g.matmul(beta, table)?;
        g.add(x, bias)
    }

    pub fn compute_b(&self, store: &ParamStore, n: usize) -> Result<Tensor2> {
        let mut g = Graph::new();
        let v = self.logits_var(&mut g, store, n)?;
        Ok(g.value(v).clone())
    }

    pub fn compute_beta(&self, store: &ParamStore, n: usize) -> Result<Tensor2> {
        let mut g = Graph::new();
        let v = self.weights_var(&mut g, store, n)?;
        Ok(g.value(v).clone())
    }

    pub fn encode(&self, store: &ParamStore, x: &Tensor2) -> Result<Tensor2> {
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let v = self.encode_var(&mut g, store, xv)?;
        Ok(g.value(v).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(n: usize, d: usize, g: usize) -> (ParamStore, GaussianRangeEncoding) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let enc = GaussianRangeEncoding::init(
            &mut store,
            &mut rng,
            n,
            d,
            EncodingConfig {
                ranges: g,
                sigma: 8.0,
            },
        )
        .unwrap();
        (store, enc)
    }

    fn set_sigma(store: &mut ParamStore, enc: &GaussianRangeEncoding, sigmas: &[f64]) {
        let raw: Vec<f64> = sigmas
            .iter()
            .map(|s| inverse_softplus(s - SIGMA_FLOOR))
            .collect();
        store.get_mut(enc.raw_sigma).value = Tensor2::from_vec(1, raw.len(), raw).unwrap();
    }

    #[test]
    fn default_centres_are_segment_midpoints() {
        let centres = default_centres(270, 10);
        assert_eq!(centres[0], 13.5);
        assert_eq!(centres[9], 256.5);
        assert_eq!(default_centres(10, 10)[0], 0.5);
        assert_eq!(default_centres(50, 10)[9], 47.5);
    }

    #[test]
    fn logit_at_centre_with_unit_sigma_is_zero() {
        let (mut store, enc) = setup(5, 2, 1);
        store.get_mut(enc.mu).value = Tensor2::scalar(3.0);
        set_sigma(&mut store, &enc, &[1.0]);
        let b = enc.compute_b(&store, 5).unwrap();
        assert!(b.get(2, 0).abs() < 1e-12, "{}", b.get(2, 0));
        // two positions away
        assert!((b.get(4, 0) + 2.0).abs() < 1e-12);
    }

    #[test]
    fn single_range_weights_are_one() {
        let (store, enc) = setup(7, 3, 1);
        let beta = enc.compute_beta(&store, 7).unwrap();
        assert!(beta.data().iter().all(|&v| (v - 1.0).abs() < 1e-15));
    }

    #[test]
    fn symmetric_ranges_split_evenly() {
        let (mut store, enc) = setup(9, 2, 2);
        store.get_mut(enc.mu).value = Tensor2::from_rows(&[vec![3.0, 7.0]]);
        set_sigma(&mut store, &enc, &[2.0, 2.0]);
        let beta = enc.compute_beta(&store, 9).unwrap();
        // position 5 (row 4) is equidistant
        assert!((beta.get(4, 0) - 0.5).abs() < 1e-12);
        assert!((beta.get(4, 1) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn zero_table_is_identity() {
        let (mut store, enc) = setup(4, 3, 2);
        store.get_mut(enc.table).value = Tensor2::zeros(2, 3);
        let x = Tensor2::from_rows(&[
            vec![1.0, 2.0, 3.0],
            vec![4.0, 5.0, 6.0],
            vec![7.0, 8.0, 9.0],
            vec![0.0, -1.0, 2.0],
        ]);
        assert_eq!(enc.encode(&store, &x).unwrap(), x);
    }

    #[test]
    fn zero_input_single_range_repeats_table_row() {
        let (store, enc) = setup(4, 3, 1);
        let out = enc.encode(&store, &Tensor2::zeros(4, 3)).unwrap();
        let row = store.value(enc.table).row(0).to_vec();
        for r in 0..4 {
            for (a, b) in out.row(r).iter().zip(&row) {
                assert!((a - b).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn column_mismatch_is_error() {
        let (store, enc) = setup(4, 3, 2);
        assert!(enc.encode(&store, &Tensor2::zeros(4, 5)).is_err());
    }
}
