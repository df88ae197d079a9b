use rand::RngCore;
use rand_distr::{Distribution, Normal};

use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Index of a parameter tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Entry<F> {
    path: String,
    tensor: Tensor<F>,
    trainable: bool,
}

/// All trainable tensors of a codec tree, addressed by stable slash paths.
///
/// Registration order is the allocation order of `compile`, so ids and
/// flattened gradient layouts are stable for a given schema.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<F> {
    entries: Vec<Entry<F>>,
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        Self { entries: vec![] }
    }

    pub fn insert(&mut self, path: impl Into<String>, tensor: Tensor<F>) -> Result<ParamId> {
        self.insert_with(path, tensor, true)
    }

    pub fn insert_with(
        &mut self,
        path: impl Into<String>,
        tensor: Tensor<F>,
        trainable: bool,
    ) -> Result<ParamId> {
        let path = path.into();
        if self.id(&path).is_some() {
            return Err(Error::Config(format!("duplicate parameter path {path}")));
        }
        self.entries.push(Entry {
            path,
            tensor,
            trainable,
        });
        Ok(ParamId(self.entries.len() - 1))
    }

    /// Inserts a tensor drawn from normal(0, std).
    pub fn insert_normal(
        &mut self,
        path: impl Into<String>,
        shape: &[usize],
        std: f64,
        rng: &mut dyn RngCore,
    ) -> Result<ParamId> {
        let normal = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| F::lit(normal.sample(rng))).collect();
        self.insert(path, Tensor::new(shape.to_vec(), data)?)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn id(&self, path: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.path == path).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<F> {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.entries[id.0].tensor
    }

    pub fn by_path(&self, path: &str) -> Option<&Tensor<F>> {
        self.id(path).map(|id| self.get(id))
    }

    pub fn path(&self, id: ParamId) -> &str {
        &self.entries[id.0].path
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.entries[id.0].trainable = trainable;
    }

    pub fn paths(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.path.as_str())
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.len()).sum()
    }

    /// Scalars across trainable tensors only.
    pub fn trainable_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.tensor.len())
            .sum()
    }
}
