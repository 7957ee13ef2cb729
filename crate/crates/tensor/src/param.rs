use serde::{Deserialize, Serialize};

use crate::error::{Result, TensorError};
use crate::tensor::{numel, Tensor};

/// One named trainable array.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

/// Named trainable arrays in insertion order.
///
/// This is the plain-data form of model weights: it is `Send + Sync`, can be
/// snapshotted and compared, and is turned into graph leaves with
/// [`ParameterSet::bind`] for each forward pass.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParameterSet {
    params: Vec<Param>,
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, shape: &[usize], values: Vec<f64>) -> Result<()> {
        if self.params.iter().any(|p| p.name == name) {
            return Err(TensorError::DuplicateParameter(name.to_string()));
        }
        if numel(shape) != values.len() {
            return Err(TensorError::DataLength {
                len: values.len(),
                shape: shape.to_vec(),
            });
        }
        self.params.push(Param {
            name: name.to_string(),
            shape: shape.to_vec(),
            values,
        });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn get(&self, name: &str) -> Result<&Param> {
        self.params
            .iter()
            .find(|p| p.name == name)
            .ok_or_else(|| TensorError::UnknownParameter(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param> {
        self.params
            .iter_mut()
            .find(|p| p.name == name)
            .ok_or_else(|| TensorError::UnknownParameter(name.to_string()))
    }

    pub fn names(&self) -> Vec<&str> {
        self.params.iter().map(|p| p.name.as_str()).collect()
    }

    /// Total number of scalar entries.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.values.len()).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.params
            .iter()
            .flat_map(|p| p.values.iter().copied())
            .collect()
    }

    /// Overwrites all values from a flat vector laid out like [`flatten`](Self::flatten).
    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_scalars() {
            return Err(TensorError::DataLength {
                len: flat.len(),
                shape: vec![self.num_scalars()],
            });
        }
        let mut at = 0;
        for p in &mut self.params {
            let n = p.values.len();
            p.values.copy_from_slice(&flat[at..at + n]);
            at += n;
        }
        Ok(())
    }

    /// Largest absolute element-wise difference to `other`.
    pub fn max_abs_diff(&self, other: &ParameterSet) -> Result<f64> {
        let (a, b) = (self.flatten(), other.flatten());
        if a.len() != b.len() {
            return Err(TensorError::ShapeMismatch {
                op: "max_abs_diff",
                lhs: vec![a.len()],
                rhs: vec![b.len()],
            });
        }
        Ok(a.iter()
            .zip(&b)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max))
    }

    /// Same names and shapes, ignoring values.
    pub fn same_layout(&self, other: &ParameterSet) -> bool {
        self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|(a, b)| a.name == b.name && a.shape == b.shape)
    }

    /// Trainable graph leaves for one forward/backward pass.
    pub fn bind(&self) -> BoundParams {
        self.bind_with(true)
    }

    /// Constant leaves: the forward pass builds no graph through them.
    pub fn bind_frozen(&self) -> BoundParams {
        self.bind_with(false)
    }

    fn bind_with(&self, trainable: bool) -> BoundParams {
        let tensors = self
            .params
            .iter()
            .map(|p| {
                let make = if trainable { Tensor::param } else { Tensor::new };
                make(&p.shape, p.values.clone()).expect("layout validated on insert")
            })
            .collect();
        BoundParams {
            names: self.params.iter().map(|p| p.name.clone()).collect(),
            tensors,
        }
    }
}

/// Graph leaves created from a [`ParameterSet`], aligned with its order.
pub struct BoundParams {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl BoundParams {
    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.tensors[i])
            .ok_or_else(|| TensorError::UnknownParameter(name.to_string()))
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    /// Gradient per parameter; zeros where nothing was accumulated.
    pub fn grads(&self) -> Vec<Vec<f64>> {
        self.tensors
            .iter()
            .map(|t| t.grad().unwrap_or_else(|| vec![0.0; t.numel()]))
            .collect()
    }

    pub fn flat_grad(&self) -> Vec<f64> {
        self.grads().into_iter().flatten().collect()
    }

    pub fn zero_grad(&self) {
        self.tensors.iter().for_each(Tensor::zero_grad);
    }
}
