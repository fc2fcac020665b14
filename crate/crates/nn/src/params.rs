use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{NnError, Result};
use crate::graph::Graph;
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named trainable tensors plus their accumulated gradients.
///
/// Parameters keep insertion order, which is also the order they are persisted in.
#[derive(Clone, Debug)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
    grads: Vec<Vec<T>>,
    touched: Vec<bool>,
    index: HashMap<String, usize>,
    /// Number of optimizer updates applied so far.
    pub updates: u64,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
            grads: Vec::new(),
            touched: Vec::new(),
            index: HashMap::new(),
            updates: 0,
        }
    }

    pub fn add(&mut self, name: &str, value: Tensor<T>) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(NnError::DuplicateParam(name.to_string()));
        }
        let id = self.values.len();
        self.index.insert(name.to_string(), id);
        self.names.push(name.to_string());
        self.grads.push(vec![T::zero(); value.numel()]);
        self.touched.push(false);
        self.values.push(value);
        Ok(ParamId(id))
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.index
            .get(name)
            .map(|&i| ParamId(i))
            .ok_or_else(|| NnError::UnknownParam(name.to_string()))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn grad(&self, id: ParamId) -> &[T] {
        &self.grads[id.0]
    }

    /// True if the parameter received a gradient since the last `zero_grad`.
    pub fn touched(&self, id: ParamId) -> bool {
        self.touched[id.0]
    }

    pub fn num_values(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    pub fn zero_grad(&mut self) {
        for (g, t) in self.grads.iter_mut().zip(self.touched.iter_mut()) {
            g.iter_mut().for_each(|x| *x = T::zero());
            *t = false;
        }
    }

    /// Adds the parameter gradients of the last backward pass of `graph`.
    pub fn accumulate(&mut self, graph: &Graph<T>) {
        for (id, g) in graph.param_grads() {
            self.touched[id.0] = true;
            for (d, &s) in self.grads[id.0].iter_mut().zip(g) {
                *d += s;
            }
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.grads
            .iter()
            .flat_map(|g| g.iter())
            .map(|&x| x.f64() * x.f64())
            .sum::<f64>()
            .sqrt()
    }

    /// Scales gradients down so their global norm is at most `max_norm`. Returns the norm before clipping.
    pub fn clip_grad_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.grad_norm();
        if norm > max_norm && norm > 0.0 {
            let s = T::of(max_norm / norm);
            for g in &mut self.grads {
                g.iter_mut().for_each(|x| *x *= s);
            }
        }
        norm
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(Tensor::cast).collect(),
            grads: self.grads.iter().map(|g| vec![U::zero(); g.len()]).collect(),
            touched: vec![false; self.touched.len()],
            index: self.index.clone(),
            updates: self.updates,
        }
    }

    /// Copies values from `other`, matching parameters by name and shape.
    pub fn copy_values_from<U: Real>(&mut self, other: &ParamStore<U>) -> Result<()> {
        for (i, name) in self.names.iter().enumerate() {
            let src = other.value(other.id(name)?);
            if src.shape() != self.values[i].shape() {
                return Err(NnError::CheckpointShape {
                    name: name.clone(),
                    found: src.shape().to_vec(),
                    expected: self.values[i].shape().to_vec(),
                });
            }
            self.values[i] = src.cast();
        }
        Ok(())
    }
}
