use std::collections::btree_map;
use std::collections::BTreeMap;

use super::{NdArray, Tensor};
use crate::error::{Error, Result};

/// Named parameter values, ordered lexicographically by name.
///
/// A `ParamSet` is a plain value snapshot (no tape), so it can be moved
/// across threads and serialized.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    entries: BTreeMap<String, NdArray>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts `value` under `name`, returning the previous value if any.
    pub fn insert(&mut self, name: impl Into<String>, value: NdArray) -> Option<NdArray> {
        self.entries.insert(name.into(), value)
    }

    pub fn get(&self, name: &str) -> Option<&NdArray> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut NdArray> {
        self.entries.get_mut(name)
    }

    pub fn require(&self, name: &str) -> Result<&NdArray> {
        self.get(name).ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn iter(&self) -> btree_map::Iter<'_, String, NdArray> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> btree_map::IterMut<'_, String, NdArray> {
        self.entries.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar values across all entries.
    pub fn num_values(&self) -> usize {
        self.entries.values().map(NdArray::len).sum()
    }

    /// A set with the same names and shapes, filled with zeros.
    pub fn zeros_like(&self) -> Self {
        self.entries.iter().map(|(k, v)| (k.clone(), NdArray::zeros(v.shape()))).collect()
    }

    pub fn sq_norm(&self) -> f64 {
        self.entries.values().map(NdArray::sq_norm).sum()
    }

    /// Entries whose names start with `prefix`.
    pub fn with_prefix(&self, prefix: &str) -> Self {
        self.entries.iter().filter(|(k, _)| k.starts_with(prefix)).map(|(k, v)| (k.clone(), v.clone())).collect()
    }

    /// Merges `other` into `self`; names must be disjoint.
    pub fn extend_disjoint(&mut self, other: ParamSet) -> Result<()> {
        for (k, v) in other.entries {
            if self.entries.contains_key(&k) {
                return Err(Error::Config(format!("duplicate parameter name `{k}`")));
            }
            self.entries.insert(k, v);
        }
        Ok(())
    }

    /// Elementwise `self + scale * other` over matching names and shapes.
    pub fn axpy(&self, scale: f64, other: &ParamSet) -> Result<ParamSet> {
        let mut out = ParamSet::new();
        for (k, v) in &self.entries {
            let o = other.require(k)?;
            if o.shape() != v.shape() {
                return Err(Error::shape("axpy", format!("`{k}`: {:?} vs {:?}", v.shape(), o.shape())));
            }
            out.insert(k.clone(), v.zip_map(o, |a, b| a + scale * b));
        }
        Ok(out)
    }

    /// Flattens all values in name order.
    pub fn flatten(&self) -> Vec<f64> {
        self.entries.values().flat_map(|v| v.data().iter().copied()).collect()
    }
}

impl FromIterator<(String, NdArray)> for ParamSet {
    fn from_iter<I: IntoIterator<Item = (String, NdArray)>>(iter: I) -> Self {
        ParamSet { entries: iter.into_iter().collect() }
    }
}

impl<'a> IntoIterator for &'a ParamSet {
    type Item = (&'a String, &'a NdArray);
    type IntoIter = btree_map::Iter<'a, String, NdArray>;
    fn into_iter(self) -> Self::IntoIter {
        self.entries.iter()
    }
}

/// Named tensors: the differentiable counterpart of [`ParamSet`].
#[derive(Clone, Debug, Default)]
pub struct ParamVars {
    entries: BTreeMap<String, Tensor>,
}

impl ParamVars {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Option<Tensor> {
        self.entries.insert(name.into(), t)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name).ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn iter(&self) -> btree_map::Iter<'_, String, Tensor> {
        self.entries.iter()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn with_prefix(&self, prefix: &str) -> Self {
        self.entries.iter().filter(|(k, _)| k.starts_with(prefix)).map(|(k, v)| (k.clone(), v.clone())).collect()
    }

    /// Snapshot of the current values.
    pub fn values(&self) -> ParamSet {
        self.entries.iter().map(|(k, t)| (k.clone(), t.value().clone())).collect()
    }

    /// Constants holding the same values.
    pub fn detached(&self) -> Self {
        self.entries.iter().map(|(k, t)| (k.clone(), t.detach())).collect()
    }

    /// Wraps a value snapshot as constants.
    pub fn constants(params: &ParamSet) -> Self {
        params.iter().map(|(k, v)| (k.clone(), Tensor::constant(v.clone()))).collect()
    }
}

impl FromIterator<(String, Tensor)> for ParamVars {
    fn from_iter<I: IntoIterator<Item = (String, Tensor)>>(iter: I) -> Self {
        ParamVars { entries: iter.into_iter().collect() }
    }
}

impl<'a> IntoIterator for &'a ParamVars {
    type Item = (&'a String, &'a Tensor);
    type IntoIter = btree_map::Iter<'a, String, Tensor>;
    fn into_iter(self) -> Self::IntoIter {
        self.entries.iter()
    }
}
