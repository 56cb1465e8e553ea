use serde::{Deserialize, Serialize};

use super::tensor::Tensor2;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// A trainable matrix with its gradient buffer and an optional {0,1} mask
/// that is multiplied into every gradient written to it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub value: Tensor2,
    pub grad: Tensor2,
    pub trainable: bool,
    pub grad_mask: Option<Tensor2>,
}

impl Param {
    pub fn new(name: impl Into<String>, mut value: Tensor2) -> Self {
        value.round_to_f32();
        let grad = Tensor2::zeros(value.rows(), value.cols());
        Self {
            name: name.into(),
            value,
            grad,
            trainable: true,
            grad_mask: None,
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        self.value.shape()
    }

    pub fn set_mask(&mut self, mask: Option<Tensor2>) -> Result<()> {
        if let Some(m) = &mask {
            m.same_shape(&self.value, "set_mask")?;
            if m.data().iter().any(|&v| v != 0.0 && v != 1.0) {
                return Err(Error::State(format!(
                    "mask for {} has entries outside {{0,1}}",
                    self.name
                )));
            }
        }
        self.grad_mask = mask;
        Ok(())
    }

    /// Replaces the value (e.g. when the classifier grows), resetting the
    /// gradient and dropping any mask whose shape no longer applies.
    pub fn replace_value(&mut self, mut value: Tensor2) {
        value.round_to_f32();
        self.grad = Tensor2::zeros(value.rows(), value.cols());
        if self
            .grad_mask
            .as_ref()
            .is_some_and(|m| m.shape() != value.shape())
        {
            self.grad_mask = None;
        }
        self.value = value;
    }

    pub fn masked(&self, pos: usize) -> bool {
        self.grad_mask
            .as_ref()
            .is_some_and(|m| m.data()[pos] == 0.0)
    }
}

/// Flat owner of all parameters of one model instance. Model structs refer
/// into it by [`ParamId`], which lets a graph write gradients back without
/// holding borrows across the forward pass.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ParamStore {
    params: Vec<Param>,
    #[serde(skip)]
    grads_ready: bool,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor2) -> ParamId {
        self.params.push(Param::new(name, value));
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor2 {
        &self.params[id.0].value
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Param)> {
        self.params
            .iter_mut()
            .enumerate()
            .map(|(i, p)| (ParamId(i), p))
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(0.0);
        }
        self.grads_ready = false;
    }

    pub(crate) fn mark_grads_ready(&mut self) {
        self.grads_ready = true;
    }

    pub(crate) fn take_grads_ready(&mut self) -> bool {
        std::mem::replace(&mut self.grads_ready, false)
    }

    pub fn set_trainable(&mut self, ids: &[ParamId], trainable: bool) {
        for id in ids {
            self.params[id.0].trainable = trainable;
        }
    }

    pub fn set_all_trainable(&mut self, trainable: bool) {
        for p in &mut self.params {
            p.trainable = trainable;
        }
    }
}
