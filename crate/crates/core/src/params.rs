//! Named parameter storage shared by every model in the crate.

use std::collections::HashMap;

use crate::error::{config_err, Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Trainable weights receive gradients; buffers (batch-norm running
/// statistics) are only overwritten by forward passes in training mode.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Buffer,
}

#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    pub kind: ParamKind,
    pub frozen: bool,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        self.insert(name.into(), value, ParamKind::Weight)
    }

    pub fn register_buffer(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        self.insert(name.into(), value, ParamKind::Buffer)
    }

    fn insert(&mut self, name: String, value: Tensor, kind: ParamKind) -> Result<ParamId> {
        if self.by_name.contains_key(&name) {
            return config_err(format!("duplicate parameter name '{name}'"));
        }
        let id = ParamId(self.params.len());
        let grad = Tensor::zeros(value.shape());
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter {
            name,
            value,
            grad,
            kind,
            frozen: false,
        });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    /// Number of trainable scalars, optionally restricted to a name prefix.
    pub fn count_weights(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|p| p.kind == ParamKind::Weight && p.name.starts_with(prefix))
            .map(|p| p.value.numel())
            .sum()
    }

    /// Marks every parameter under `prefix` as frozen (or unfrozen).
    /// Returns how many entries matched.
    pub fn set_frozen(&mut self, prefix: &str, frozen: bool) -> usize {
        let mut n = 0;
        for p in self
            .params
            .iter_mut()
            .filter(|p| p.name.starts_with(prefix))
        {
            p.frozen = frozen;
            n += 1;
        }
        n
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(0.0);
        }
    }

    /// Adds a backward pass's parameter gradients and applies its buffer updates.
    pub fn accumulate(&mut self, grads: &crate::graph::Gradients) {
        for (id, g) in &grads.params {
            self.params[id.0].grad.add_assign(g);
        }
        for (id, v) in &grads.buffers {
            self.params[id.0].value = v.clone();
        }
    }

    /// Copies values for every name present in both stores; shapes must agree.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<usize> {
        let mut n = 0;
        for p in &mut self.params {
            if let Some(&id) = other.by_name.get(&p.name) {
                let src = &other.params[id.0].value;
                if src.shape() != p.value.shape() {
                    return Err(Error::Version(format!(
                        "parameter '{}' has shape {:?} in checkpoint but {:?} in model",
                        p.name,
                        src.shape(),
                        p.value.shape()
                    )));
                }
                p.value = src.clone();
                n += 1;
            }
        }
        Ok(n)
    }

    /// Sum of squared values over parameters under `prefix`, used to verify
    /// that frozen sub-networks are untouched.
    pub fn fingerprint(&self, prefix: &str) -> Vec<f64> {
        self.params
            .iter()
            .filter(|p| p.name.starts_with(prefix))
            .map(|p| p.value.norm())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique() {
        let mut s = ParamStore::new();
        s.register("a/w", Tensor::zeros(&[2])).unwrap();
        assert!(matches!(
            s.register("a/w", Tensor::zeros(&[2])),
            Err(Error::Config(_))
        ));
        assert_eq!(s.set_frozen("a/", true), 1);
    }
}
