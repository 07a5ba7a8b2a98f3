use std::collections::BTreeMap;

use rand::Rng;

use super::matrix::Matrix;
use crate::error::{Error, Result};

/// Named parameter arrays, iterated in name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: BTreeMap<String, Matrix>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Matrix> {
        self.entries.get_mut(name)
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Matrix) {
        self.entries.insert(name.into(), value);
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Matrix)> {
        self.entries.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn n_scalars(&self) -> usize {
        self.entries.values().map(Matrix::len).sum()
    }

    /// Fan-in scaled uniform weights `U(-√(6/fan_in), √(6/fan_in))`.
    pub fn init_kaiming<R: Rng>(&mut self, name: &str, fan_in: usize, rows: usize, cols: usize, rng: &mut R) {
        let bound = (6.0 / fan_in.max(1) as f64).sqrt();
        let data = (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect();
        self.insert(name, Matrix::new(rows, cols, data).expect("sized above"));
    }

    /// Replaces the values of `self` with those of `other`. Every name and
    /// shape must agree.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        for (name, value) in &self.entries {
            match other.get(name) {
                None => {
                    return Err(Error::Checkpoint {
                        param: name.clone(),
                        message: "missing from checkpoint".into(),
                    })
                }
                Some(v) if v.shape() != value.shape() => {
                    return Err(Error::Checkpoint {
                        param: name.clone(),
                        message: format!("expected shape {:?}, checkpoint has {:?}", value.shape(), v.shape()),
                    })
                }
                Some(_) => {}
            }
        }
        if let Some(extra) = other.names().find(|n| !self.contains(n)) {
            return Err(Error::Checkpoint {
                param: extra.clone(),
                message: "not part of the model".into(),
            });
        }
        self.entries = other.entries.clone();
        Ok(())
    }
}
