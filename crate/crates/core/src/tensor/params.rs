use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use super::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Role of a parameter; decides e.g. whether weight decay applies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamKind {
    ConvWeight,
    LinearWeight,
    LinearBias,
    NormScale,
    NormShift,
}

impl ParamKind {
    pub fn is_weight(self) -> bool {
        matches!(self, ParamKind::ConvWeight | ParamKind::LinearWeight)
    }
}

#[derive(Debug)]
pub struct ParamEntry<T> {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor<T>,
    accesses: AtomicU64,
}

impl<T: Clone> Clone for ParamEntry<T> {
    fn clone(&self) -> Self {
        ParamEntry {
            name: self.name.clone(),
            kind: self.kind,
            value: self.value.clone(),
            accesses: AtomicU64::new(self.accesses.load(Ordering::Relaxed)),
        }
    }
}

/// Named, ordered parameter tensors with per-entry read counters.
///
/// The counters record how often a forward pass fetched each tensor, which
/// lets callers check that a partial forward pass never touches deeper
/// layers.
#[derive(Debug)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
}

impl<T: Clone> Clone for ParamStore<T> {
    fn clone(&self) -> Self {
        ParamStore {
            entries: self.entries.clone(),
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
        ParamStore {
            entries: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, kind: ParamKind, value: Tensor<T>) -> ParamId {
        self.entries.push(ParamEntry {
            name: name.into(),
            kind,
            value,
            accesses: AtomicU64::new(0),
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<T> {
        &self.entries[id.0]
    }

    /// Value lookup that counts as an access.
    pub fn fetch(&self, id: ParamId) -> &Tensor<T> {
        let entry = &self.entries[id.0];
        entry.accesses.fetch_add(1, Ordering::Relaxed);
        &entry.value
    }

    /// Value lookup that does not count as an access.
    pub fn peek(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn set(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        let entry = &mut self.entries[id.0];
        if entry.value.shape() != value.shape() {
            return Err(Error::shape(format!(
                "parameter {} has shape {:?}, got {:?}",
                entry.name,
                entry.value.shape(),
                value.shape()
            )));
        }
        entry.value = value;
        Ok(())
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn access_count(&self, id: ParamId) -> u64 {
        self.entries[id.0].accesses.load(Ordering::Relaxed)
    }

    pub fn reset_access_counts(&self) {
        for e in &self.entries {
            e.accesses.store(0, Ordering::Relaxed);
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    /// Applies `f` to every parameter value in place.
    pub fn for_each_mut(&mut self, mut f: impl FnMut(&str, ParamKind, &mut [T])) {
        for e in &mut self.entries {
            let (name, kind) = (e.name.as_str(), e.kind);
            f(name, kind, e.value.data_mut());
        }
    }
}
