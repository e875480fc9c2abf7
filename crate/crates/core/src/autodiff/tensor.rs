//! Dense row-major tensors.

use super::real::Real;
use std::fmt;

/// Shape or data mismatch when constructing or combining tensors.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TensorError {
    /// Element count does not match the product of the shape dimensions.
    DataLength { expected: usize, got: usize },
    /// A dimension of size zero was supplied where data is required.
    EmptyDim { shape: Vec<usize> },
}

impl fmt::Display for TensorError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TensorError::DataLength { expected, got } => {
                write!(f, "shape needs {expected} values, got {got}")
            }
            TensorError::EmptyDim { shape } => {
                write!(f, "tensor shape {shape:?} has a zero dimension")
            }
        }
    }
}

impl std::error::Error for TensorError {}

/// Row-major tensor of scalars.
///
/// `requires_grad` only matters when the tensor is registered as a graph
/// leaf; interior nodes track gradient need from their inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<F> {
    pub shape: Vec<usize>,
    pub values: Vec<F>,
    pub requires_grad: bool,
}

impl<F: Real> Tensor<F> {
    /// Builds a tensor, checking that the data length matches the shape.
    pub fn new(shape: Vec<usize>, values: Vec<F>) -> Result<Self, TensorError> {
        if shape.contains(&0) {
            return Err(TensorError::EmptyDim { shape });
        }
        let expected: usize = shape.iter().product();
        if values.len() != expected {
            return Err(TensorError::DataLength {
                expected,
                got: values.len(),
            });
        }
        Ok(Tensor {
            shape,
            values,
            requires_grad: false,
        })
    }

    /// Tensor filled with zeros.
    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape,
            values: vec![F::zero(); n],
            requires_grad: false,
        }
    }

    /// Single-element tensor of shape `[1]`.
    pub fn scalar(x: F) -> Self {
        Tensor {
            shape: vec![1],
            values: vec![x],
            requires_grad: false,
        }
    }

    /// Marks the tensor as a differentiable leaf and returns it.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    /// Total element count.
    pub fn numel(&self) -> usize {
        self.values.len()
    }

    /// Size of the trailing dimension.
    pub fn last_dim(&self) -> usize {
        *self.shape.last().expect("tensor has at least one dim")
    }

    /// Number of rows when the tensor is viewed as `[rows, last_dim]`.
    pub fn rows(&self) -> usize {
        self.numel() / self.last_dim()
    }

    /// Converts every element to f64.
    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.values.iter().map(|v| v.as_f64()).collect()
    }

    /// Builds a tensor from f64 data, converting into the target scalar type.
    pub fn from_f64(shape: Vec<usize>, values: &[f64]) -> Result<Self, TensorError> {
        Tensor::new(shape, values.iter().map(|&v| F::from_f64(v)).collect())
    }

    /// True when every element is finite.
    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}
