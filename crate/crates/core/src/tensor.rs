//! Dense row-major tensors and the error type shared by the whole engine.
//!
//! Tensors here are plain buffers: a shape, a flat `Vec<f64>` in row-major
//! order, and an optional gradient of the same length. All differentiation
//! bookkeeping lives in [`crate::graph`]; this type is the boundary between
//! user data and the compute graph.

use thiserror::Error;

/// Errors produced by tensor construction, graph operations, and the
/// optimizer. Shape errors always carry both shapes so a mismatch can be
/// diagnosed from the message alone.
#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{context}: got shape {actual:?}, expected {expected:?}")]
    ShapeMismatch {
        context: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("shape {shape:?} holds {expected} elements but {got} values were supplied")]
    LengthMismatch {
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },
    #[error("{context}: index {index} out of range for length {len}")]
    IndexOutOfRange {
        context: String,
        index: usize,
        len: usize,
    },
    #[error("{context}: input sequence is empty")]
    EmptySequence { context: String },
    #[error("batch normalization requires a non-empty batch")]
    EmptyBatch,
    #[error("dropout rate {rate} is outside [0, 1)")]
    InvalidDropoutRate { rate: f64 },
    #[error("pooling window {window} with stride {stride} does not fit input length {len}")]
    PoolTooLarge {
        window: usize,
        stride: usize,
        len: usize,
    },
    #[error("convolution kernel width {kernel} exceeds input length {len} under valid padding")]
    KernelTooWide { kernel: usize, len: usize },
    #[error("backward requires a scalar loss node, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("optimizer step requested before any backward pass populated gradients")]
    MissingGradients,
    #[error("parameter {name:?} registered twice")]
    DuplicateParam { name: String },
    #[error("{context}: produced a non-finite value")]
    NonFinite { context: String },
    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: String, message: String },
}

impl TensorError {
    pub fn shape_mismatch(
        context: impl Into<String>,
        expected: &[usize],
        actual: &[usize],
    ) -> Self {
        TensorError::ShapeMismatch {
            context: context.into(),
            expected: expected.to_vec(),
            actual: actual.to_vec(),
        }
    }
}

/// A dense row-major tensor. `grad`, when present, is always the same
/// length as `values`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    /// Builds a tensor, checking that the value count matches the shape.
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self, TensorError> {
        let expected: usize = shape.iter().product();
        if values.len() != expected {
            return Err(TensorError::LengthMismatch {
                shape,
                expected,
                got: values.len(),
            });
        }
        Ok(Tensor {
            shape,
            values,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape,
            values: vec![0.0; n],
            grad: None,
        }
    }

    /// One-dimensional tensor over the given values.
    pub fn vector(values: Vec<f64>) -> Self {
        Tensor {
            shape: vec![values.len()],
            values,
            grad: None,
        }
    }

    /// Scalar as a one-element vector; the graph uses shape `[1]` for scalars.
    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            values: vec![value],
            grad: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// Attaches (or resets) a zero gradient buffer.
    pub fn zero_grad(&mut self) {
        self.grad = Some(vec![0.0; self.values.len()]);
    }

    pub fn set_grad(&mut self, grad: Vec<f64>) -> Result<(), TensorError> {
        if grad.len() != self.values.len() {
            return Err(TensorError::LengthMismatch {
                shape: self.shape.clone(),
                expected: self.values.len(),
                got: grad.len(),
            });
        }
        self.grad = Some(grad);
        Ok(())
    }

    /// Errors if any value is NaN or infinite.
    pub fn check_finite(&self, context: &str) -> Result<(), TensorError> {
        if self.values.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite {
                context: context.to_string(),
            });
        }
        Ok(())
    }
}
