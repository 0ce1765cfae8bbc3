use std::collections::BTreeMap;

use super::Array;

/// Named arrays: trainable parameters, or the gradients with respect to them.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Params {
    arrays: BTreeMap<String, Array>,
}

pub type Gradients = Params;

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Array) {
        self.arrays.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Array> {
        self.arrays.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Array> {
        self.arrays.get_mut(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Array> {
        self.arrays.remove(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.arrays.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array)> {
        self.arrays.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Array)> {
        self.arrays.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.arrays.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.arrays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.arrays.is_empty()
    }

    /// Total number of scalar elements.
    pub fn n_elements(&self) -> usize {
        self.arrays.values().map(Array::len).sum()
    }

    /// Adds `alpha * other` for every array present in both maps.
    pub fn axpy(&mut self, alpha: f64, other: &Params) {
        for (name, a) in self.arrays.iter_mut() {
            if let Some(b) = other.get(name) {
                for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                    *x += alpha * y;
                }
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.arrays.values().all(Array::all_finite)
    }
}
