use std::collections::HashMap;

use rand::Rng;

use super::mat::Mat;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

/// Named trainable tensors in insertion order.
///
/// Values are kept representable in `f32` (see [`ParamStore::round_to_f32`])
/// so that checkpoints, which store little-endian `f32`, are lossless.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Mat>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Mat) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Checkpoint(format!("duplicate tensor name `{name}`")));
        }
        let id = self.names.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(value);
        Ok(ParamId(id))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn require(&self, name: &str) -> Result<ParamId> {
        self.id(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))
    }

    pub fn get(&self, id: ParamId) -> &Mat {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.tensors[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Mat> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.names.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Mat)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn num_elements(&self) -> usize {
        self.tensors.iter().map(Mat::len).sum()
    }

    /// Copy without the tensors whose name starts with `prefix`.
    pub fn without_prefix(&self, prefix: &str) -> ParamStore {
        let mut out = ParamStore::new();
        for (name, t) in self.iter() {
            if !name.starts_with(prefix) {
                out.insert(name, t.clone()).expect("names unique in source");
            }
        }
        out
    }

    pub fn round_to_f32(&mut self) {
        for t in &mut self.tensors {
            for x in t.data_mut() {
                *x = *x as f32 as f64;
            }
        }
    }

    pub fn check_finite(&self) -> Result<()> {
        for (name, t) in self.iter() {
            if !t.is_finite() {
                return Err(Error::NonFinite(format!("parameter {name}")));
            }
        }
        Ok(())
    }
}

/// Uniform in `[-bound, bound]`, rounded to `f32`.
pub fn uniform<R: Rng>(rng: &mut R, rows: usize, cols: usize, bound: f64) -> Mat {
    let data = (0..rows * cols)
        .map(|_| (rng.gen_range(-bound..=bound) as f32) as f64)
        .collect();
    Mat::from_vec(rows, cols, data)
}
