use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered collection of trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, tensor: Tensor) -> ParamId {
        debug_assert!(self.find(name).is_none(), "duplicate parameter {name}");
        self.names.push(name.to_string());
        self.tensors.push(tensor.with_grad());
        ParamId(self.tensors.len() - 1)
    }

    /// Adds a tensor filled from N(0, std²).
    pub fn add_normal(&mut self, name: &str, shape: &[usize], std: f64, rng: &mut Rng) -> ParamId {
        let mut t = Tensor::zeros(shape);
        let normal = Normal::new(0.0, std).expect("positive std");
        for v in t.data_mut() {
            *v = normal.sample(rng);
        }
        self.add(name, t)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter())
    }

    pub fn zero_grads(&mut self) {
        for t in &mut self.tensors {
            t.zero_grad();
        }
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Overwrites the values of a parameter; the shape must match.
    pub fn set_values(&mut self, name: &str, shape: &[usize], data: &[f64]) -> Result<()> {
        let id = self
            .find(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))?;
        let t = &mut self.tensors[id.0];
        if t.shape() != shape {
            return Err(Error::Architecture(alloc::format!(
                "{name}: expected shape {:?}, found {:?}",
                t.shape(),
                shape
            )));
        }
        t.data_mut().copy_from_slice(data);
        Ok(())
    }

    pub fn global_grad_norm(&self) -> f64 {
        let sq: f64 = self
            .tensors
            .iter()
            .filter_map(Tensor::grad)
            .flat_map(|g| g.iter())
            .map(|g| g * g)
            .sum();
        libm::sqrt(sq)
    }
}
