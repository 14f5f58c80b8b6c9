//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! [`Tensor`] is an immutable shape + row-major data buffer. [`Graph`] records
//! primitive applications during a forward pass and replays them in reverse
//! for gradients; [`grad_check`] compares those gradients against central
//! finite differences.
//!
//! Every primitive checks its output for NaN/Inf and reports a
//! [`TensorError::NonFinite`] instead of letting the poison spread.

mod gradcheck;
mod graph;
pub mod kernels;

pub use gradcheck::{compare_gradients, grad_check, GradCheckReport};
pub use graph::{DropoutCtx, Gradients, Graph, NodeId};

use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: expected {expected}, got shape {shape:?}")]
    BadShape {
        op: &'static str,
        expected: &'static str,
        shape: Vec<usize>,
    },
    #[error("{op}: axis {axis} invalid for shape {shape:?}")]
    InvalidAxis {
        op: &'static str,
        axis: usize,
        shape: Vec<usize>,
    },
    #[error("{op}: index {index} out of range for size {size}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        size: usize,
    },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("backward: loss must be a scalar, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("cross_entropy: mask selects no positions")]
    EmptyMask,
    #[error("tensor data length {len} does not match shape {shape:?}")]
    DataLength { len: usize, shape: Vec<usize> },
}

/// Immutable dense tensor: a shape and a row-major `f64` buffer.
///
/// The buffer is behind an `Arc`, so clones are cheap; `data_mut` copies on
/// write. `requires_grad` marks leaves whose gradients [`Graph::backward`]
/// should populate.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
    requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(TensorError::DataLength {
                len: data.len(),
                shape,
            });
        }
        Ok(Self {
            shape,
            data: Arc::new(data),
            requires_grad: false,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape,
            data: Arc::new(vec![0.0; n]),
            requires_grad: false,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: Arc::new(vec![value]),
            requires_grad: false,
        }
    }

    /// 1-D tensor from a vector.
    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data: Arc::new(data),
            requires_grad: false,
        }
    }

    /// 2-D tensor from row-major data.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, TensorError> {
        Self::new(vec![rows, cols], data)
    }

    pub fn with_requires_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable view of the buffer; copies if the buffer is shared.
    pub fn data_mut(&mut self) -> &mut [f64] {
        let buf: &mut Vec<f64> = Arc::make_mut(&mut self.data);
        buf.as_mut_slice()
    }

    /// Row count of a 2-D tensor.
    pub fn rows(&self) -> usize {
        debug_assert_eq!(self.ndim(), 2);
        self.shape[0]
    }

    /// Column count of a 2-D tensor (or the length of a 1-D tensor).
    pub fn cols(&self) -> usize {
        *self.shape.last().expect("tensor has at least one axis")
    }

    /// The single value of a scalar tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_bad_length() {
        assert!(matches!(
            Tensor::new(vec![2, 3], vec![0.0; 5]),
            Err(TensorError::DataLength { .. })
        ));
    }

    #[test]
    fn clone_shares_then_copies_on_write() {
        let a = Tensor::vector(vec![1.0, 2.0]);
        let mut b = a.clone();
        b.data_mut()[0] = 9.0;
        assert_eq!(a.data(), &[1.0, 2.0]);
        assert_eq!(b.data(), &[9.0, 2.0]);
    }
}
