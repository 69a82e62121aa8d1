use std::collections::HashMap;

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered collection of trainable tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Usage(format!("duplicate parameter name {name}")));
        }
        let id = self.tensors.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(tensor.with_requires_grad(true));
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Replace a parameter's values, keeping its shape.
    pub fn set_data(&mut self, id: ParamId, data: &[f64]) -> Result<()> {
        let t = &mut self.tensors[id.0];
        if t.numel() != data.len() {
            return Err(Error::Shape {
                op: "set_data",
                lhs: t.shape().to_vec(),
                rhs: vec![data.len()],
            });
        }
        t.data_mut().copy_from_slice(data);
        Ok(())
    }
}

/// Dense gradient buffers aligned with a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    per_param: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Gradients {
            per_param: store.tensors.iter().map(|t| vec![0.0; t.numel()]).collect(),
        }
    }

    /// Collect accumulated gradients from a tape after `backward`.
    pub fn from_tape(store: &ParamStore, tape: &super::Tape) -> Self {
        let mut g = Self::zeros_like(store);
        for (id, grad) in tape.param_grads() {
            g.per_param[id.0].iter_mut().zip(grad).for_each(|(a, b)| *a += b);
        }
        g
    }

    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.per_param[id.0]
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.per_param.iter_mut().zip(&other.per_param) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.per_param.iter_mut().flatten().for_each(|x| *x *= s);
    }

    pub fn global_norm(&self) -> f64 {
        self.per_param.iter().flatten().map(|x| x * x).sum::<f64>().sqrt()
    }

    /// Rescale so the global L2 norm is at most `max_norm`. Returns the norm
    /// before clipping.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let n = self.global_norm();
        if max_norm > 0.0 && n > max_norm {
            self.scale(max_norm / n);
        }
        n
    }

    pub fn is_finite(&self) -> bool {
        self.per_param.iter().flatten().all(|x| x.is_finite())
    }
}

#[cfg(test)]
impl Gradients {
    pub(crate) fn per_param_mut(&mut self) -> &mut [Vec<f64>] {
        &mut self.per_param
    }
}
