//! Named collection of trainable parameters.

use super::Tensor;
use crate::error::{Error, Result};
use std::collections::BTreeMap;

/// Map from dotted parameter paths (e.g. `encoder.conv1.weight`) to
/// gradient-tracked tensors. Iteration order is lexicographic, which
/// keeps the optimizer and checkpoints deterministic.
#[derive(Default)]
pub struct ParameterStore {
    params: BTreeMap<String, Tensor>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Identifiers must be unique and the tensor
    /// must require gradients.
    pub fn insert(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        if !tensor.requires_grad() {
            return Err(Error::Config(format!(
                "parameter '{name}' does not require gradients"
            )));
        }
        if self.params.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter '{name}'")));
        }
        self.params.insert(name.to_string(), tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Lexicographic (name, tensor) iteration.
    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn names(&self) -> Vec<String> {
        self.params.keys().cloned().collect()
    }

    pub fn zero_grad(&self) {
        for t in self.params.values() {
            t.zero_grad();
        }
    }

    /// Store sharing the same tensors, restricted to names accepted by
    /// the predicate. Updates through either store are visible in both.
    pub fn subset(&self, keep: impl Fn(&str) -> bool) -> ParameterStore {
        let params = self
            .params
            .iter()
            .filter(|(name, _)| keep(name))
            .map(|(name, t)| (name.clone(), t.clone()))
            .collect();
        ParameterStore { params }
    }

    /// Deep copy of all parameter values, for snapshots and bit-identity
    /// assertions.
    pub fn snapshot(&self) -> BTreeMap<String, Vec<f64>> {
        self.params
            .iter()
            .map(|(name, t)| (name.clone(), t.values()))
            .collect()
    }

    /// Restores values from a snapshot; names and lengths must line up
    /// for every parameter present in the snapshot.
    pub fn restore(&self, snapshot: &BTreeMap<String, Vec<f64>>) -> Result<()> {
        for (name, values) in snapshot {
            let t = self
                .params
                .get(name)
                .ok_or_else(|| Error::Config(format!("unknown parameter '{name}' in snapshot")))?;
            if t.len() != values.len() {
                return Err(Error::Config(format!(
                    "parameter '{name}' has {} elements, snapshot has {}",
                    t.len(),
                    values.len()
                )));
            }
            t.set_values(values);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(n: usize) -> Tensor {
        Tensor::parameter(&[n], vec![0.0; n]).unwrap()
    }

    #[test]
    fn iteration_is_lexicographic() {
        let mut store = ParameterStore::new();
        store.insert("b.w", param(1)).unwrap();
        store.insert("a.w", param(1)).unwrap();
        store.insert("a.b", param(1)).unwrap();
        assert_eq!(store.names(), vec!["a.b", "a.w", "b.w"]);
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut store = ParameterStore::new();
        store.insert("w", param(1)).unwrap();
        assert!(store.insert("w", param(1)).is_err());
    }

    #[test]
    fn subset_shares_tensors() {
        let mut store = ParameterStore::new();
        store.insert("enc.w", param(2)).unwrap();
        store.insert("dec.w", param(2)).unwrap();
        let enc = store.subset(|n| n.starts_with("enc."));
        assert_eq!(enc.names(), vec!["enc.w"]);
        enc.get("enc.w").unwrap().set_values(&[1.0, 2.0]);
        assert_eq!(store.get("enc.w").unwrap().values(), vec![1.0, 2.0]);
    }

    #[test]
    fn snapshot_restore_round_trip() {
        let mut store = ParameterStore::new();
        store.insert("w", param(2)).unwrap();
        let snap = store.snapshot();
        store.get("w").unwrap().set_values(&[9.0, 9.0]);
        store.restore(&snap).unwrap();
        assert_eq!(store.get("w").unwrap().values(), vec![0.0, 0.0]);
    }
}
