//! Named parameter tensors grouped into freeze groups.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    /// Freeze group this tensor belongs to; every tensor has exactly one.
    pub group: String,
    pub value: Tensor,
}

/// Parameters of one network. `key` distinguishes stores on a shared tape.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    key: u32,
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new(key: u32) -> Self {
        Self { key, params: Vec::new() }
    }

    pub fn key(&self) -> u32 {
        self.key
    }

    pub fn add(&mut self, name: impl Into<String>, group: impl Into<String>, value: Tensor) -> ParamId {
        self.params.push(Param { name: name.into(), group: group.into(), value });
        ParamId(self.params.len() - 1)
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Distinct group names in first-seen order.
    pub fn groups(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for p in &self.params {
            if !out.contains(&p.group) {
                out.push(p.group.clone());
            }
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.is_finite())
    }

    /// Replaces all values from `other`, which must have identical names and shapes.
    pub fn load_values(&mut self, other: &[Tensor]) -> Result<(), crate::Error> {
        if other.len() != self.params.len() {
            return Err(crate::Error::Malformed(alloc::format!(
                "expected {} parameter tensors, found {}",
                self.params.len(),
                other.len()
            )));
        }
        for (p, t) in self.params.iter_mut().zip(other) {
            if p.value.shape() != t.shape() {
                return Err(crate::Error::Shape(alloc::format!(
                    "parameter {}: {:?} vs {:?}",
                    p.name,
                    p.value.shape(),
                    t.shape()
                )));
            }
            p.value = t.clone();
        }
        Ok(())
    }
}

/// Per-group trainable flags for one [`ParamStore`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FreezeMask {
    trainable: BTreeMap<String, bool>,
}

impl FreezeMask {
    pub fn all_trainable(store: &ParamStore) -> Self {
        Self::from_fn(store, |_| true)
    }

    pub fn from_fn(store: &ParamStore, f: impl Fn(&str) -> bool) -> Self {
        let trainable = store.groups().into_iter().map(|g| {
            let t = f(&g);
            (g, t)
        });
        Self { trainable: trainable.collect() }
    }

    pub fn is_trainable(&self, group: &str) -> bool {
        self.trainable.get(group).copied().unwrap_or(false)
    }

    pub fn param_trainable(&self, store: &ParamStore, id: ParamId) -> bool {
        self.is_trainable(&store.get(id).group)
    }

    pub fn groups(&self) -> impl Iterator<Item = (&str, bool)> {
        self.trainable.iter().map(|(k, v)| (k.as_str(), *v))
    }

    pub fn set(&mut self, group: &str, trainable: bool) {
        if let Some(v) = self.trainable.get_mut(group) {
            *v = trainable;
        }
    }

    /// `(total, trainable)` scalar parameter counts.
    pub fn count(&self, store: &ParamStore) -> (usize, usize) {
        let total = store.numel();
        let trainable = store
            .iter()
            .filter(|(_, p)| self.is_trainable(&p.group))
            .map(|(_, p)| p.value.len())
            .sum();
        (total, trainable)
    }
}
