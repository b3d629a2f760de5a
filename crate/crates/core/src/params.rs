//! Named parameter registry.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{GaitError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug)]
pub struct ParamEntry<F> {
    pub name: String,
    pub value: Tensor<F>,
}

/// Flat registry of learnable tensors with stable, unique names.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<F> {
    entries: Vec<ParamEntry<F>>,
    index: HashMap<String, usize>,
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, value: Tensor<F>) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(GaitError::InvalidArgument(format!(
                "duplicate parameter name {name}"
            )));
        }
        let id = self.entries.len();
        self.entries.push(ParamEntry {
            name: name.to_string(),
            value,
        });
        self.index.insert(name.to_string(), id);
        Ok(ParamId(id))
    }

    /// Normal(0, std) initialisation.
    pub fn insert_normal<R: Rng>(
        &mut self,
        name: &str,
        shape: &[usize],
        std: f64,
        rng: &mut R,
    ) -> Result<ParamId> {
        let dist = Normal::new(0.0, std).map_err(|e| GaitError::InvalidArgument(e.to_string()))?;
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| F::from_f64_lossy(dist.sample(rng))).collect();
        self.insert(name, Tensor::from_vec(shape, data)?)
    }

    pub fn insert_const(&mut self, name: &str, shape: &[usize], v: f64) -> Result<ParamId> {
        self.insert(name, Tensor::full(shape, F::from_f64_lossy(v)))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<F> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn entries(&self) -> &[ParamEntry<F>] {
        &self.entries
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|e| e.value.is_finite())
    }

    /// Group key of a parameter: its name without the trailing component.
    pub fn group_of(&self, id: ParamId) -> &str {
        let name = self.name(id);
        name.rsplit_once('.').map(|(g, _)| g).unwrap_or(name)
    }

    /// Replace every value from `other`, which must hold the same names and shapes.
    pub fn load_from(&mut self, other: &ParamStore<F>) -> Result<()> {
        if other.len() != self.len() {
            return Err(GaitError::Checkpoint(format!(
                "parameter count {} != {}",
                other.len(),
                self.len()
            )));
        }
        for entry in other.entries() {
            let id = self.id_of(&entry.name).ok_or_else(|| {
                GaitError::Checkpoint(format!("unexpected parameter {}", entry.name))
            })?;
            let slot = self.get_mut(id);
            if slot.shape() != entry.value.shape() {
                return Err(GaitError::Checkpoint(format!(
                    "shape of {} is {:?}, expected {:?}",
                    entry.name,
                    entry.value.shape(),
                    slot.shape()
                )));
            }
            *slot = entry.value.clone();
        }
        Ok(())
    }
}
