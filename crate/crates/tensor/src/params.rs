use std::sync::atomic::{AtomicU64, Ordering};

use crate::graph::{Grads, Graph};
use crate::scalar::Real;
use crate::tensor::Tensor;

static NEXT_UID: AtomicU64 = AtomicU64::new(1);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    /// Per-parameter learning-rate multiplier.
    pub lr_mult: f64,
}

/// Named, ordered collection of trainable tensors.
#[derive(Debug)]
pub struct ParamStore<T> {
    uid: u64,
    params: Vec<Param<T>>,
}

impl<T: Real> Clone for ParamStore<T> {
    fn clone(&self) -> Self {
        // a clone is a distinct store as far as graph binding is concerned
        Self {
            uid: NEXT_UID.fetch_add(1, Ordering::Relaxed),
            params: self.params.clone(),
        }
    }
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            uid: NEXT_UID.fetch_add(1, Ordering::Relaxed),
            params: Vec::new(),
        }
    }

    pub fn uid(&self) -> u64 {
        self.uid
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.add_with_lr(name, value, 1.0)
    }

    pub fn add_with_lr(
        &mut self,
        name: impl Into<String>,
        value: Tensor<T>,
        lr_mult: f64,
    ) -> ParamId {
        let name = name.into();
        assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.params.push(Param {
            name,
            value,
            lr_mult,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    pub fn param(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Gradient of each parameter from a backward pass over `graph`.
    /// Parameters the forward pass never touched get `None`.
    pub fn collect_grads(&self, graph: &Graph<T>, grads: &Grads<T>) -> Vec<Option<Tensor<T>>> {
        self.ids()
            .map(|id| {
                graph
                    .bound_param(self, id)
                    .and_then(|v| grads.get(v).cloned())
            })
            .collect()
    }

    /// Element-wise conversion into another precision.
    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new();
        for p in &self.params {
            out.add_with_lr(p.name.clone(), p.value.cast(), p.lr_mult);
        }
        out
    }
}
