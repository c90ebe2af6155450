use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::ops;
use crate::tensor::Tensor;

/// An ordered collection of named tensors. Iteration always follows insertion
/// order, which keeps flattening, checkpointing, and gradient pairing
/// deterministic.
#[derive(Clone, Default)]
pub struct ParamSet {
    entries: IndexMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> ParamSet {
        ParamSet {
            entries: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, t: Tensor) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(Error::ParamMismatch(format!("duplicate name {name:?}")));
        }
        self.entries.insert(name.to_string(), t);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    /// Like `get`, but a missing name is an error that names the parameter.
    pub fn expect(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::ParamMismatch(format!("missing parameter {name:?}")))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|k| k.as_str())
    }

    /// Total number of scalar elements across all entries.
    pub fn numel(&self) -> usize {
        self.entries.values().map(|t| t.numel()).sum()
    }

    /// The same values with all tape history removed.
    pub fn detached(&self) -> ParamSet {
        let mut out = ParamSet::new();
        for (name, t) in self.iter() {
            out.insert(name, t.detach()).expect("unique in source");
        }
        out
    }

    /// Entries concatenated into one flat vector, in insertion order.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut flat = Vec::with_capacity(self.numel());
        for (_, t) in self.iter() {
            flat.extend_from_slice(t.data());
        }
        flat
    }

    /// A set with this set's names and shapes but values taken from `flat`.
    pub fn from_flat(&self, flat: &[f64]) -> Result<ParamSet> {
        if flat.len() != self.numel() {
            return Err(Error::ParamMismatch(format!(
                "flat vector has {} elements, set has {}",
                flat.len(),
                self.numel()
            )));
        }
        let mut out = ParamSet::new();
        let mut offset = 0;
        for (name, t) in self.iter() {
            let n = t.numel();
            out.insert(name, Tensor::from_vec(t.dims(), flat[offset..offset + n].to_vec())?)
                .expect("unique in source");
            offset += n;
        }
        Ok(out)
    }

    /// Exact equality of names, order, shapes, and every element bit.
    pub fn bit_eq(&self, other: &ParamSet) -> bool {
        self.len() == other.len()
            && self
                .iter()
                .zip(other.iter())
                .all(|((an, at), (bn, bt))| an == bn && at.bit_eq(bt))
    }
}

impl std::fmt::Debug for ParamSet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_map()
            .entries(self.iter().map(|(k, v)| (k, v.shape())))
            .finish()
    }
}

/// One functional gradient-descent step: returns `params - lr * grads` as a
/// new set, pairing entries by name. Recorded like any other operation, so a
/// step taken on watched parameters stays differentiable.
pub fn sgd_step(params: &ParamSet, grads: &ParamSet, lr: f64) -> Result<ParamSet> {
    if params.len() != grads.len() {
        return Err(Error::ParamMismatch(format!(
            "{} parameters vs {} gradients",
            params.len(),
            grads.len()
        )));
    }
    let mut out = ParamSet::new();
    for (name, p) in params.iter() {
        let g = grads.expect(name)?;
        if p.shape() != g.shape() {
            return Err(Error::ParamMismatch(format!(
                "shape mismatch for {name:?}: {} vs {}",
                p.shape(),
                g.shape()
            )));
        }
        out.insert(name, ops::sub(p, &ops::scale(g, lr)?)?)
            .expect("unique in source");
    }
    Ok(out)
}
