use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::training::tape::ParamId;

/// Named tensors owned by a model. Buffers (e.g. batch-norm running
/// statistics) live here too so checkpoints capture them, but optimisers
/// skip them.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    trainable: Vec<bool>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            trainable: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor<T>) -> ParamId {
        self.push(name.into(), t, true)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, t: Tensor<T>) -> ParamId {
        self.push(name.into(), t, false)
    }

    fn push(&mut self, name: String, t: Tensor<T>, trainable: bool) -> ParamId {
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(t);
        self.trainable.push(trainable);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.trainable[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// Number of trainable scalars.
    pub fn count(&self) -> usize {
        self.tensors
            .iter()
            .zip(&self.trainable)
            .filter(|(_, &t)| t)
            .map(|(x, _)| x.len())
            .sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.is_finite())
    }

    /// Copies values from `other`, matching tensors by name and shape.
    pub fn load_from(&mut self, other: &ParamStore<T>) -> Result<()> {
        for (i, name) in self.names.iter().enumerate() {
            let j = other
                .find(name)
                .ok_or_else(|| Error::Shape(format!("missing tensor `{name}`")))?;
            let src = other.get(j);
            if src.shape() != self.tensors[i].shape() {
                return Err(Error::Shape(format!(
                    "tensor `{name}`: {:?} vs {:?}",
                    src.shape(),
                    self.tensors[i].shape()
                )));
            }
            self.tensors[i] = src.clone();
        }
        Ok(())
    }

    /// Flat view of every scalar, in registration order.
    pub fn flatten(&self) -> Vec<T> {
        self.tensors.iter().flat_map(|t| t.data().iter().copied()).collect()
    }
}
