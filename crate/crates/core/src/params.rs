//! Named tensor collections: network parameters, gradients, optimizer moments.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Ordered map from parameter name to tensor. Insertion order is the
/// canonical order for initialization, serialization and optimizer updates.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<T = f32> {
    entries: Vec<(String, Tensor<T>)>,
    index: HashMap<String, usize>,
    generation: u64,
}

impl<T: Scalar> Default for ParamSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients share the parameter container; names match the parameters
/// they differentiate.
pub type Gradients<T = f32> = ParamSet<T>;

/// Batch-norm running statistics are state, not trainable parameters.
pub fn is_trainable(name: &str) -> bool {
    !(name.ends_with(".running_mean") || name.ends_with(".running_var"))
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            index: HashMap::new(),
            generation: 0,
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter name {name}")));
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push((name, tensor));
        Ok(())
    }

    /// Insert, or add into an existing entry of the same shape.
    pub fn accumulate(&mut self, name: &str, tensor: Tensor<T>) -> Result<()> {
        match self.index.get(name) {
            Some(&i) => self.entries[i].1.add_assign(&tensor),
            None => self.insert(name, tensor),
        }
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor<T>> {
        let i = self.index.remove(name)?;
        let (_, t) = self.entries.remove(i);
        for idx in self.index.values_mut() {
            if *idx > i {
                *idx -= 1;
            }
        }
        Some(t)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.index
            .get(name)
            .map(|&i| &self.entries[i].1)
            .ok_or_else(|| Error::ManifestMismatch(format!("missing tensor {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        match self.index.get(name) {
            Some(&i) => Ok(&mut self.entries[i].1),
            None => Err(Error::ManifestMismatch(format!("missing tensor {name}"))),
        }
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn scope<'a>(&'a self, prefix: &'a str) -> Scope<'a, T> {
        Scope { set: self, prefix }
    }

    /// Number of scalar values across all entries.
    pub fn element_count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        let mut out = ParamSet::new();
        for (n, t) in self.iter() {
            out.insert(n, t.cast()).expect("names already unique");
        }
        out.generation = self.generation;
        out
    }

    /// Counter bumped by every optimizer update; tapes compare against it.
    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn bump_generation(&mut self) {
        self.generation += 1;
    }

    /// Zero tensors with the same names and shapes.
    pub fn zeros_like(&self) -> Self {
        let mut out = ParamSet::new();
        for (n, t) in self.iter() {
            out.insert(n, Tensor::zeros(t.shape().to_vec()))
                .expect("names already unique");
        }
        out
    }

    /// Bitwise equality of names, shapes and payloads, ignoring generation.
    pub fn bitwise_eq(&self, other: &Self) -> bool {
        self.len() == other.len()
            && self
                .iter()
                .zip(other.iter())
                .all(|((na, ta), (nb, tb))| na == nb && ta.bitwise_eq(tb))
    }
}

/// Read-only view of the parameters under `prefix.`.
#[derive(Clone, Copy)]
pub struct Scope<'a, T> {
    set: &'a ParamSet<T>,
    prefix: &'a str,
}

impl<'a, T: Scalar> Scope<'a, T> {
    pub fn get(&self, local: &str) -> Result<&'a Tensor<T>> {
        self.set.get(&self.name(local))
    }

    pub fn name(&self, local: &str) -> String {
        if self.prefix.is_empty() {
            local.to_string()
        } else {
            format!("{}.{local}", self.prefix)
        }
    }

    pub fn prefix(&self) -> &'a str {
        self.prefix
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn insertion_order_and_duplicates() {
        let mut p = ParamSet::<f32>::new();
        p.insert("b", Tensor::zeros(vec![2])).unwrap();
        p.insert("a", Tensor::zeros(vec![3])).unwrap();
        assert!(p.insert("a", Tensor::zeros(vec![1])).is_err());
        assert_eq!(p.names().collect::<Vec<_>>(), vec!["b", "a"]);
        assert_eq!(p.element_count(), 5);
        p.remove("b");
        assert_eq!(p.get("a").unwrap().len(), 3);
        assert!(p.get("b").is_err());
    }

    #[test]
    fn scope_prefixes_names() {
        let mut p = ParamSet::<f32>::new();
        p.insert("audio.stem.conv.w", Tensor::zeros(vec![1])).unwrap();
        let s = p.scope("audio.stem");
        assert!(s.get("conv.w").is_ok());
        assert_eq!(s.name("bn.gamma"), "audio.stem.bn.gamma");
    }

    #[test]
    fn trainable_excludes_running_stats() {
        assert!(is_trainable("x.bn.gamma"));
        assert!(!is_trainable("x.bn.running_mean"));
        assert!(!is_trainable("x.bn.running_var"));
    }
}
