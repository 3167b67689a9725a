//! Named parameter tensors and their binding into a graph.
//!
//! A model owns a [`ParamSet`] (plain tensors, insertion-ordered). Each
//! forward pass binds the set to fresh [`Var`] leaves; after `backward`, the
//! gradients are collected by name and handed to the optimizer. Insertion
//! order is the iteration order everywhere, which keeps updates and
//! checkpoints deterministic.

use indexmap::IndexMap;

use super::{NnError, Tensor, Var};

#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    entries: IndexMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<(), NnError> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(NnError::InvalidArg(format!("duplicate parameter name {name:?}")));
        }
        self.entries.insert(name, value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.entries.iter_mut()
    }

    /// Total number of scalar values across all tensors.
    pub fn param_count(&self) -> usize {
        self.entries.values().map(Tensor::numel).sum()
    }

    /// Bind every tensor to a fresh graph leaf.
    pub fn bind(&self, trainable: bool) -> BoundParams {
        let vars = self
            .entries
            .iter()
            .map(|(name, tensor)| (name.clone(), Var::leaf(tensor.clone(), trainable)))
            .collect();
        BoundParams { vars }
    }
}

/// One forward pass's view of a [`ParamSet`].
pub struct BoundParams {
    vars: IndexMap<String, Var>,
}

impl BoundParams {
    /// Look up a bound parameter. Model code asks only for names it created,
    /// so a miss is a programming error.
    pub fn var(&self, name: &str) -> &Var {
        self.vars
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name:?}"))
    }

    /// Collect the gradients accumulated by `backward`, keyed by name.
    /// Parameters that did not participate in the graph are absent.
    pub fn grads(&self) -> IndexMap<String, Tensor> {
        self.vars
            .iter()
            .filter_map(|(name, var)| var.grad().map(|g| (name.clone(), g)))
            .collect()
    }
}
