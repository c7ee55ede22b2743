use std::collections::BTreeMap;

use super::{NnError, Tensor};

#[derive(Debug, Clone, PartialEq)]
struct Entry {
    value: Tensor,
    trainable: bool,
}

/// Named parameters with per-parameter trainable flags.
///
/// Names are dotted paths (`encoder.layers.0.attn.wq`); freeze masks operate
/// on path prefixes. Iteration order is lexicographic so that everything
/// derived from a set (checkpoints, optimizer updates) is deterministic.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParameterSet {
    entries: BTreeMap<String, Entry>,
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<(), NnError> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(NnError::DuplicateParameter(name));
        }
        self.entries.insert(
            name,
            Entry {
                value,
                trainable: true,
            },
        );
        Ok(())
    }

    /// Inserts or overwrites a parameter, keeping the existing trainable flag.
    pub fn set(&mut self, name: &str, value: Tensor) {
        match self.entries.get_mut(name) {
            Some(e) => e.value = value,
            None => {
                self.entries.insert(
                    name.to_string(),
                    Entry {
                        value,
                        trainable: true,
                    },
                );
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name).map(|e| &e.value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name).map(|e| &mut e.value)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.entries.get(name).map(|e| e.trainable).unwrap_or(false)
    }

    pub fn set_trainable(&mut self, name: &str, trainable: bool) -> Result<(), NnError> {
        let e = self
            .entries
            .get_mut(name)
            .ok_or_else(|| NnError::UnknownParameter(name.to_string()))?;
        e.trainable = trainable;
        Ok(())
    }

    /// Sets the flag of every parameter whose path starts with `prefix`.
    /// Returns how many parameters matched.
    pub fn set_trainable_prefix(&mut self, prefix: &str, trainable: bool) -> usize {
        let mut n = 0;
        for (name, e) in self.entries.iter_mut() {
            if name.starts_with(prefix) {
                e.trainable = trainable;
                n += 1;
            }
        }
        n
    }

    pub fn freeze_all(&mut self) {
        for e in self.entries.values_mut() {
            e.trainable = false;
        }
    }

    pub fn unfreeze_all(&mut self) {
        for e in self.entries.values_mut() {
            e.trainable = true;
        }
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, e)| (k.as_str(), &e.value))
    }

    pub fn trainable_names(&self) -> impl Iterator<Item = &str> {
        self.entries
            .iter()
            .filter(|(_, e)| e.trainable)
            .map(|(k, _)| k.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar values.
    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(|e| e.value.numel()).sum()
    }

    /// Copies every parameter of `other` into `self`, overwriting on name clash.
    pub fn merge_from(&mut self, other: &ParameterSet) {
        for (name, e) in &other.entries {
            self.entries.insert(name.clone(), e.clone());
        }
    }

    /// Sub-set of parameters under `prefix`.
    pub fn subset(&self, prefix: &str) -> ParameterSet {
        ParameterSet {
            entries: self
                .entries
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, e)| (k.clone(), e.clone()))
                .collect(),
        }
    }

    /// True when every parameter under `prefix` has bit-identical values in
    /// both sets (and both sets hold the same names under it).
    pub fn bit_identical_under(&self, other: &ParameterSet, prefix: &str) -> bool {
        let a: Vec<_> = self.entries.iter().filter(|(k, _)| k.starts_with(prefix)).collect();
        let b: Vec<_> = other.entries.iter().filter(|(k, _)| k.starts_with(prefix)).collect();
        a.len() == b.len()
            && a.iter().zip(&b).all(|((ka, ea), (kb, eb))| {
                ka == kb
                    && ea.value.shape() == eb.value.shape()
                    && ea
                        .value
                        .data()
                        .iter()
                        .zip(eb.value.data())
                        .all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }
}

/// Gradients keyed by parameter name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradients {
    map: BTreeMap<String, Tensor>,
}

impl Gradients {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, grad: Tensor) {
        self.map.insert(name.into(), grad);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.map.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Adds `other` into `self`, name by name.
    pub fn accumulate(&mut self, other: Gradients) {
        for (k, v) in other.map {
            match self.map.get_mut(&k) {
                Some(acc) => acc.add_assign(&v),
                None => {
                    self.map.insert(k, v);
                }
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for v in self.map.values_mut() {
            v.scale_assign(s);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.map
            .values()
            .flat_map(|t| t.data().iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales so the global L2 norm is at most `max_norm`.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm && norm > 0.0 {
            self.scale(max_norm / norm);
        }
        norm
    }
}
