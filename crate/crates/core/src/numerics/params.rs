use std::sync::Arc;

use indexmap::IndexMap;

use crate::error::{Error, Result};

use super::tensor::Tensor;

/// Named parameter tensors in a fixed insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: IndexMap<String, Arc<Tensor>>,
}

/// Gradients keyed by parameter name.
pub type GradMap = IndexMap<String, Tensor>;

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.entries.insert(name.into(), Arc::new(value));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name).map(|t| &**t)
    }

    pub fn get_arc(&self, name: &str) -> Result<Arc<Tensor>> {
        self.entries
            .get(name)
            .cloned()
            .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))
    }

    /// Mutable access; copies the tensor first if a tape still shares it.
    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name).map(Arc::make_mut)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), &**v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Number of named tensors.
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.entries.values().map(|t| t.numel()).sum()
    }
}

pub fn zero_grads(params: &ParamStore) -> GradMap {
    params.iter().map(|(n, t)| (n.to_string(), Tensor::zeros(t.shape()))).collect()
}

/// `acc += other`, entry by entry in `acc`'s order.
pub fn accumulate_grads(acc: &mut GradMap, other: &GradMap) {
    for (name, g) in acc.iter_mut() {
        if let Some(o) = other.get(name) {
            g.add_assign(o);
        }
    }
}
