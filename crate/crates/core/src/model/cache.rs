use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::hook::HookId;
use crate::tensor::Tensor;

/// Snapshot of every hook site from one forward run. Activations keep the
/// position axis as their leading extent.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationCache {
    entries: BTreeMap<HookId, Tensor>,
    seq_len: usize,
}

impl ActivationCache {
    pub(crate) fn from_entries(entries: BTreeMap<HookId, Tensor>, seq_len: usize) -> Self {
        Self { entries, seq_len }
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn get(&self, hook: &HookId) -> Option<&Tensor> {
        self.entries.get(hook)
    }

    pub fn require(&self, hook: &HookId) -> Result<&Tensor> {
        self.get(hook)
            .ok_or_else(|| Error::Input(format!("activation cache has no entry for {hook}")))
    }

    pub fn contains(&self, hook: &HookId) -> bool {
        self.entries.contains_key(hook)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&HookId, &Tensor)> {
        self.entries.iter()
    }

    /// A new cache equal to this one except at `hook`; `self` is untouched.
    pub fn with_entry(&self, hook: HookId, value: Tensor) -> Result<Self> {
        if value.rows() != self.seq_len {
            return Err(Error::Input(format!(
                "replacement for {hook} has {} rows, cache seq_len is {}",
                value.rows(),
                self.seq_len
            )));
        }
        if let Some(old) = self.entries.get(&hook) {
            if old.shape() != value.shape() {
                return Err(Error::Shape {
                    op: "cache entry",
                    lhs: old.shape().to_vec(),
                    rhs: value.shape().to_vec(),
                });
            }
        }
        let mut entries = self.entries.clone();
        entries.insert(hook, value);
        Ok(Self {
            entries,
            seq_len: self.seq_len,
        })
    }
}
