//! Named registry of trainable tensors and their gradient slots.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Handle to a tensor registered in a [`ParameterStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Dense row-major tensor with a same-shape gradient accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
    grad: Vec<f64>,
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        if numel(&shape) != values.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} needs {} values, got {}", numel(&shape), values.len()),
            ));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("tensor"));
        }
        let grad = vec![0.0; values.len()];
        Ok(Tensor {
            shape,
            values,
            grad,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = numel(&shape);
        Tensor {
            shape,
            values: vec![0.0; n],
            grad: vec![0.0; n],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn grad(&self) -> &[f64] {
        &self.grad
    }

    pub fn grad_mut(&mut self) -> &mut [f64] {
        &mut self.grad
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }
}

/// Adam first/second moment buffers for one tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub first: Vec<f64>,
    pub second: Vec<f64>,
}

#[derive(Debug, Clone)]
struct Entry {
    name: String,
    tensor: Tensor,
    moments: Moments,
}

/// Every trainable tensor of a model, addressed by name or [`ParamId`].
#[derive(Debug, Clone, Default)]
pub struct ParameterStore {
    entries: Vec<Entry>,
    index: HashMap<String, ParamId>,
    step: u64,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: &str, tensor: Tensor) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(Error::Invalid(format!("parameter `{name}` registered twice")));
        }
        let id = ParamId(self.entries.len());
        let n = tensor.len();
        self.entries.push(Entry {
            name: name.to_string(),
            tensor,
            moments: Moments {
                first: vec![0.0; n],
                second: vec![0.0; n],
            },
        });
        self.index.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].tensor
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].tensor
    }

    pub fn values(&self, id: ParamId) -> &[f64] {
        self.entries[id.0].tensor.values()
    }

    pub fn values_mut(&mut self, id: ParamId) -> &mut [f64] {
        self.entries[id.0].tensor.values_mut()
    }

    pub fn shape(&self, id: ParamId) -> &[usize] {
        self.entries[id.0].tensor.shape()
    }

    pub fn moments(&self, id: ParamId) -> &Moments {
        &self.entries[id.0].moments
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub(crate) fn set_step(&mut self, step: u64) {
        self.step = step;
    }

    /// Mutable access to a tensor together with its moment buffers.
    pub(crate) fn slot_mut(&mut self, id: ParamId) -> (&mut Tensor, &mut Moments) {
        let e = &mut self.entries[id.0];
        (&mut e.tensor, &mut e.moments)
    }

    pub fn zero_grad(&mut self) {
        for e in &mut self.entries {
            e.tensor.zero_grad();
        }
    }

    /// Adds `grads` into the stored gradient slots.
    pub fn accumulate(&mut self, grads: &Gradients) {
        for (e, g) in self.entries.iter_mut().zip(&grads.bufs) {
            if let Some(g) = g {
                for (dst, src) in e.tensor.grad.iter_mut().zip(g) {
                    *dst += src;
                }
            }
        }
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.len()).sum()
    }

    pub fn manifest(&self) -> Vec<(String, Vec<usize>)> {
        self.entries
            .iter()
            .map(|e| (e.name.clone(), e.tensor.shape.clone()))
            .collect()
    }

    pub(crate) fn restore_moments(&mut self, id: ParamId, moments: Moments) -> Result<()> {
        let e = &mut self.entries[id.0];
        if moments.first.len() != e.tensor.len() || moments.second.len() != e.tensor.len() {
            return Err(Error::Validation(format!(
                "moment buffers for `{}` have the wrong length",
                e.name
            )));
        }
        e.moments = moments;
        Ok(())
    }
}

/// Gradients produced by one backward pass, one optional buffer per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    bufs: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn for_store(store: &ParameterStore) -> Self {
        Gradients {
            bufs: vec![None; store.len()],
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.bufs.get(id.0).and_then(|b| b.as_deref())
    }

    pub(crate) fn buf_mut(&mut self, id: ParamId, len: usize) -> &mut [f64] {
        self.bufs[id.0].get_or_insert_with(|| vec![0.0; len])
    }

    /// Element-wise sum of two gradient sets.
    pub fn add_assign(&mut self, other: &Gradients) {
        for (dst, src) in self.bufs.iter_mut().zip(&other.bufs) {
            match (dst.as_mut(), src) {
                (_, None) => {}
                (None, Some(s)) => *dst = Some(s.clone()),
                (Some(d), Some(s)) => d.iter_mut().zip(s).for_each(|(a, b)| *a += b),
            }
        }
    }

    pub fn scale(&mut self, k: f64) {
        for b in self.bufs.iter_mut().flatten() {
            b.iter_mut().for_each(|v| *v *= k);
        }
    }

    /// Parameters with at least one non-zero gradient entry.
    pub fn touched(&self) -> Vec<ParamId> {
        self.bufs
            .iter()
            .enumerate()
            .filter(|(_, b)| b.as_ref().is_some_and(|b| b.iter().any(|v| *v != 0.0)))
            .map(|(i, _)| ParamId(i))
            .collect()
    }
}
