use serde::{Deserialize, Serialize};

use super::param::ParamStore;
use super::tensor::Tensor2;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
struct Moments {
    m: Tensor2,
    v: Tensor2,
}

/// Adam over a [`ParamStore`]. Positions whose mask is zero, and params that
/// are not trainable, are skipped entirely: their values and moments stay
/// bit-identical.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    moments: Vec<Option<Moments>>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        if !store.take_grads_ready() {
            return Err(Error::State(
                "adam step without populated gradients".into(),
            ));
        }
        self.step += 1;
        let t = self.step as i32;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        if self.moments.len() < store.len() {
            self.moments.resize(store.len(), None);
        }
        for (id, p) in store.iter_mut() {
            if !p.trainable {
                continue;
            }
            let shape = p.shape();
            let slot = &mut self.moments[id.0];
            if slot.as_ref().map_or(true, |mo| mo.m.shape() != shape) {
                *slot = Some(Moments {
                    m: Tensor2::zeros(shape.0, shape.1),
                    v: Tensor2::zeros(shape.0, shape.1),
                });
            }
            let mo = slot.as_mut().expect("moments initialised above");
            for i in 0..p.value.len() {
                if p.masked(i) {
                    continue;
                }
                let g = p.grad.data()[i];
                let m = beta1 * mo.m.data()[i] + (1.0 - beta1) * g;
                let v = beta2 * mo.v.data()[i] + (1.0 - beta2) * g * g;
                mo.m.data_mut()[i] = m;
                mo.v.data_mut()[i] = v;
                let update = lr * (m / bc1) / ((v / bc2).sqrt() + eps);
                let w = p.value.data()[i] - update;
                p.value.data_mut()[i] = w as f32 as f64;
            }
        }
        store.zero_grads();
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::{Graph, ParamStore};

    fn store_with_grad(value: f64, grad: f64) -> ParamStore {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor2::scalar(value));
        // loss = grad * w
        let mut g = Graph::new();
        let wv = g.param(&store, w);
        let k = g.input(Tensor2::scalar(grad));
        let l = g.matmul(k, wv).unwrap();
        g.backward_into(l, &mut store).unwrap();
        store
    }

    #[test]
    fn zero_grad_leaves_value() {
        let mut store = store_with_grad(0.75, 0.0);
        Adam::new(AdamConfig::default()).step(&mut store).unwrap();
        assert_eq!(store.value(crate::numeric::ParamId(0)).item(), 0.75);
    }

    #[test]
    fn one_step_matches_hand_recurrence() {
        let mut store = store_with_grad(1.0, 1.0);
        Adam::new(AdamConfig::default()).step(&mut store).unwrap();
        // m = 0.1, v = 0.001; m_hat = 1, v_hat = 1; w = 1 - 1e-3 * 1 / (1 + 1e-8)
        let expected = (1.0f64 - 1e-3 / (1.0 + 1e-8)) as f32 as f64;
        let got = store.value(crate::numeric::ParamId(0)).item();
        assert!(got < 1.0);
        assert_eq!(got, expected);
    }

    #[test]
    fn step_without_grads_is_state_error() {
        let mut store = ParamStore::new();
        store.add("w", Tensor2::scalar(1.0));
        let err = Adam::new(AdamConfig::default()).step(&mut store).unwrap_err();
        assert!(matches!(err, Error::State(_)));
    }

    #[test]
    fn masked_position_is_untouched() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor2::from_rows(&[vec![0.3, -0.7]]));
        store
            .get_mut(w)
            .set_mask(Some(Tensor2::from_rows(&[vec![1.0, 0.0]])))
            .unwrap();
        let before = store.value(w).clone();
        let mut adam = Adam::new(AdamConfig::default());
        for _ in 0..5 {
            let mut g = Graph::new();
            let wv = g.param(&store, w);
            let x = g.input(Tensor2::from_rows(&[vec![2.0], vec![5.0]]));
            let l = g.matmul(wv, x).unwrap();
            g.backward_into(l, &mut store).unwrap();
            adam.step(&mut store).unwrap();
        }
        let after = store.value(w);
        assert_ne!(after.get(0, 0), before.get(0, 0));
        assert_eq!(after.get(0, 1).to_bits(), before.get(0, 1).to_bits());
    }
}
