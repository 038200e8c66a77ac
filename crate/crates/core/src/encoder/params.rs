//! Named parameter tensors partitioned into groups, with snapshot/restore.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ParamGroup {
    /// Frozen backbone weights (theta).
    Backbone,
    /// Bottleneck adapters (phi).
    Adapter,
    /// Layer-norm scale and shift (gamma, beta).
    Norm,
    /// Temporary classification head used in supervised training.
    Head,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 4] = [Self::Backbone, Self::Adapter, Self::Norm, Self::Head];

    pub fn code(self) -> u8 {
        match self {
            Self::Backbone => 0,
            Self::Adapter => 1,
            Self::Norm => 2,
            Self::Head => 3,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|g| g.code() == code)
    }
}

/// Which parameters are optimized.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ParamMode {
    Norm,
    Adapter,
    /// Backbone, adapters and norms; never the head.
    All,
    Head,
}

impl ParamMode {
    pub fn includes(self, group: ParamGroup) -> bool {
        match self {
            Self::Norm => group == ParamGroup::Norm,
            Self::Adapter => group == ParamGroup::Adapter,
            Self::All => group != ParamGroup::Head,
            Self::Head => group == ParamGroup::Head,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Norm => "norm",
            Self::Adapter => "adapter",
            Self::All => "all",
            Self::Head => "head",
        }
    }
}

impl fmt::Display for ParamMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ParamMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "norm" => Ok(Self::Norm),
            "adapter" => Ok(Self::Adapter),
            "all" => Ok(Self::All),
            "head" => Ok(Self::Head),
            other => Err(Error::UnknownMode(other.to_string())),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor,
}

#[derive(Clone, Debug, Default)]
pub struct ParameterStore {
    entries: Vec<ParamEntry>,
    index: HashMap<String, usize>,
}

/// Immutable copy of every parameter, used to reset a model.
#[derive(Clone, Debug)]
pub struct ModelCheckpoint {
    entries: Arc<[ParamEntry]>,
}

impl ModelCheckpoint {
    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn from_entries(entries: Vec<ParamEntry>) -> Self {
        Self {
            entries: entries.into(),
        }
    }
}

impl PartialEq for ModelCheckpoint {
    /// Bitwise comparison of names, groups and values.
    fn eq(&self, other: &Self) -> bool {
        self.entries.len() == other.entries.len()
            && self.entries.iter().zip(other.entries.iter()).all(|(a, b)| {
                a.name == b.name && a.group == b.group && a.value.bitwise_eq(&b.value)
            })
    }
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, group: ParamGroup, value: Tensor) -> Result<usize> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter `{name}`")));
        }
        let idx = self.entries.len();
        self.index.insert(name.clone(), idx);
        self.entries.push(ParamEntry { name, group, value });
        Ok(idx)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entry(&self, idx: usize) -> &ParamEntry {
        &self.entries[idx]
    }

    pub fn value_mut(&mut self, idx: usize) -> &mut Tensor {
        &mut self.entries[idx].value
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index_of(name).map(|i| &self.entries[i].value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index_of(name).map(|i| &mut self.entries[i].value)
    }

    /// Removes every parameter in `group`.
    pub fn remove_group(&mut self, group: ParamGroup) {
        self.entries.retain(|e| e.group != group);
        self.reindex();
    }

    fn reindex(&mut self) {
        self.index = self
            .entries
            .iter()
            .enumerate()
            .map(|(i, e)| (e.name.clone(), i))
            .collect();
    }

    /// Total scalar count in `group`.
    pub fn count(&self, group: ParamGroup) -> usize {
        self.entries
            .iter()
            .filter(|e| e.group == group)
            .map(|e| e.value.numel())
            .sum()
    }

    /// Indices of the parameters trained under `mode`.
    pub fn select(&self, mode: ParamMode) -> Vec<usize> {
        self.entries
            .iter()
            .enumerate()
            .filter(|(_, e)| mode.includes(e.group))
            .map(|(i, _)| i)
            .collect()
    }

    /// Mutable references to the parameters at `indices`, in that order.
    pub fn values_mut(&mut self, indices: &[usize]) -> Vec<&mut Tensor> {
        let mut slots: Vec<Option<&mut Tensor>> =
            self.entries.iter_mut().map(|e| Some(&mut e.value)).collect();
        indices
            .iter()
            .map(|&i| slots[i].take().expect("indices must be distinct"))
            .collect()
    }

    pub fn snapshot(&self) -> ModelCheckpoint {
        ModelCheckpoint::from_entries(self.entries.clone())
    }

    /// Copies every value from `checkpoint`; names, groups and shapes must
    /// match this store exactly.
    pub fn restore(&mut self, checkpoint: &ModelCheckpoint) -> Result<()> {
        self.check_schema(checkpoint)?;
        for (e, c) in self.entries.iter_mut().zip(checkpoint.entries()) {
            e.value.data_mut().copy_from_slice(c.value.data());
        }
        Ok(())
    }

    pub fn check_schema(&self, checkpoint: &ModelCheckpoint) -> Result<()> {
        let theirs = checkpoint.entries();
        if theirs.len() != self.entries.len() {
            return Err(Error::SchemaMismatch(format!(
                "checkpoint has {} tensors, model has {}",
                theirs.len(),
                self.entries.len()
            )));
        }
        for (e, c) in self.entries.iter().zip(theirs) {
            if e.name != c.name || e.group != c.group || e.value.shape() != c.value.shape() {
                return Err(Error::SchemaMismatch(format!(
                    "model `{}` ({:?}, {:?}) vs checkpoint `{}` ({:?}, {:?})",
                    e.name,
                    e.group,
                    e.value.shape(),
                    c.name,
                    c.group,
                    c.value.shape()
                )));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParameterStore {
        let mut s = ParameterStore::new();
        s.push("w", ParamGroup::Backbone, Tensor::vector(vec![1.0, 2.0])).unwrap();
        s.push("a", ParamGroup::Adapter, Tensor::vector(vec![3.0])).unwrap();
        s.push("g", ParamGroup::Norm, Tensor::vector(vec![4.0])).unwrap();
        s.push("h", ParamGroup::Head, Tensor::vector(vec![5.0])).unwrap();
        s
    }

    #[test]
    fn unknown_mode_is_rejected() {
        assert!(matches!("bias".parse::<ParamMode>(), Err(Error::UnknownMode(_))));
        assert_eq!("norm".parse::<ParamMode>().unwrap(), ParamMode::Norm);
    }

    #[test]
    fn selection_follows_groups() {
        let s = store();
        assert_eq!(s.select(ParamMode::Norm), vec![2]);
        assert_eq!(s.select(ParamMode::Adapter), vec![1]);
        assert_eq!(s.select(ParamMode::All), vec![0, 1, 2]);
        assert_eq!(s.select(ParamMode::Head), vec![3]);
    }

    #[test]
    fn restore_is_bitwise_and_idempotent() {
        let mut s = store();
        let snap = s.snapshot();
        for i in 0..s.len() {
            s.value_mut(i).data_mut().iter_mut().for_each(|v| *v = -*v * 1.5);
        }
        s.restore(&snap).unwrap();
        assert_eq!(s.snapshot(), snap);
        s.restore(&snap).unwrap();
        assert_eq!(s.snapshot(), snap);
    }

    #[test]
    fn restore_rejects_schema_mismatch() {
        let mut s = store();
        let snap = s.snapshot();
        s.remove_group(ParamGroup::Head);
        assert!(matches!(s.restore(&snap), Err(Error::SchemaMismatch(_))));
        assert_eq!(s.index_of("h"), None);
        assert_eq!(s.index_of("g"), Some(2));
    }

    #[test]
    fn duplicate_names_are_rejected() {
        let mut s = store();
        assert!(s.push("w", ParamGroup::Head, Tensor::scalar(0.0)).is_err());
    }
}
