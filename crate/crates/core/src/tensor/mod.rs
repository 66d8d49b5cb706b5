//! Dense row-major tensors with a small reverse-mode autodiff tape.
//!
//! Everything here is `f64`. The model only ever needs matrices (`[rows, cols]`),
//! row vectors (`[n]`) and scalars, so the op set is deliberately narrow.

mod checkpoint;
mod gradcheck;
mod graph;
mod optim;

pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use gradcheck::{gradient_check, weighted_sum};
pub use graph::{AttnLayout, AttnSegment, GradMap, Graph, Segment, Var};
pub use optim::{Adam, AdamConfig, NoamSchedule};

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::Shape(format!(
                "shape {shape:?} needs {numel} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; numel] }
    }

    pub fn scalar(value: f64) -> Self {
        Self { shape: vec![], data: vec![value] }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Leading dimension for matrices, 1 for vectors and scalars.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 | 1 => 1,
            _ => self.shape[..self.shape.len() - 1].iter().product(),
        }
    }

    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.iter().all(|&d| d == 1)
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Named, densely indexed parameter set.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Panics on a duplicate name: names are chosen by the
    /// model constructor, so a clash is a programming error.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let id = ParamId(self.values.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        id
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    /// Element-wise arithmetic mean of several stores with identical layout.
    pub fn average(stores: &[&ParamStore]) -> Result<ParamStore> {
        let first = stores
            .first()
            .ok_or_else(|| TensorError::Shape("cannot average zero parameter sets".into()))?;
        let mut out = (*first).clone();
        for other in &stores[1..] {
            if other.names != first.names {
                return Err(TensorError::Shape("parameter names differ".into()));
            }
            for (acc, v) in out.values.iter_mut().zip(&other.values) {
                if acc.shape != v.shape {
                    return Err(TensorError::Shape(format!(
                        "parameter shape {:?} vs {:?}",
                        acc.shape, v.shape
                    )));
                }
                for (a, b) in acc.data.iter_mut().zip(&v.data) {
                    *a += b;
                }
            }
        }
        let n = stores.len() as f64;
        if stores.len() > 1 {
            for v in &mut out.values {
                for a in &mut v.data {
                    *a /= n;
                }
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_bad_length() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert_eq!(Tensor::new(vec![2, 3], vec![0.0; 6]).unwrap().rows(), 2);
    }

    #[test]
    fn average_identity_and_cancellation() {
        let mut a = ParamStore::new();
        a.add("w", Tensor::matrix(1, 3, vec![1.0, -2.0, 0.5]).unwrap());
        let avg = ParamStore::average(&[&a]).unwrap();
        assert_eq!(avg, a);
        let avg = ParamStore::average(&[&a, &a]).unwrap();
        assert_eq!(avg, a);

        let mut neg = a.clone();
        for v in neg.get_mut(ParamId(0)).data_mut() {
            *v = -*v;
        }
        let avg = ParamStore::average(&[&a, &neg]).unwrap();
        assert!(avg.get(ParamId(0)).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn average_shape_mismatch() {
        let mut a = ParamStore::new();
        a.add("w", Tensor::zeros(&[2, 2]));
        let mut b = ParamStore::new();
        b.add("w", Tensor::zeros(&[2, 3]));
        assert!(matches!(ParamStore::average(&[&a, &b]), Err(TensorError::Shape(_))));
    }
}
