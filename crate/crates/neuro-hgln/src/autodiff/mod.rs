//! Dense tensor arithmetic with reverse-mode differentiation.
//!
//! A [`Tape`] records every executed operation in topological order; calling
//! [`Tape::backward`] on a scalar root walks the record once in reverse and
//! accumulates `d root / d tensor` into every tensor that requires gradients.
//! All storage is row-major `f64`.
//!
//! Model layers build their forward pass exclusively from these ops, so no
//! other module carries hand-derived backward code.

mod gemm;
mod tape;

#[cfg(test)]
mod tests;

pub use gemm::{set_threads, threads};
pub use tape::{Tape, TensorId};

use std::fmt;

/// Epsilon inside the layer-norm square root.
pub const LAYER_NORM_EPS: f64 = 1e-5;
/// Epsilon inside the batch-norm square root.
pub const BATCH_NORM_EPS: f64 = 1e-5;
/// Momentum on batch-norm running statistics: `new = 0.9*old + 0.1*batch`.
pub const BATCH_NORM_MOMENTUM: f64 = 0.9;

/// Errors raised by tensor operations when a contract is violated.
#[derive(Debug, Clone, PartialEq)]
pub enum KernelError {
    /// Two operand shapes that must agree do not.
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// A single operand has an unusable shape.
    BadShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: &'static str,
    },
    /// Normalized axis too short (layer norm needs d >= 2).
    DegenerateAxis { op: &'static str, len: usize },
    /// Batch statistics need at least two samples in train mode.
    InsufficientBatch { op: &'static str, batch: usize },
    /// A class label lies outside `[0, classes)`.
    LabelOutOfRange {
        index: usize,
        label: usize,
        classes: usize,
    },
    /// `backward` was called on a non-scalar tensor.
    NonScalarRoot { shape: Vec<usize> },
    /// An entry that must be non-negative is not.
    NegativeEntry { op: &'static str, index: usize },
    /// Provided data length disagrees with the shape product.
    DataLength { expected: usize, got: usize },
}

impl fmt::Display for KernelError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            KernelError::ShapeMismatch { op, lhs, rhs } => {
                write!(f, "{op}: shape mismatch between {lhs:?} and {rhs:?}")
            }
            KernelError::BadShape { op, shape, reason } => {
                write!(f, "{op}: bad shape {shape:?} ({reason})")
            }
            KernelError::DegenerateAxis { op, len } => {
                write!(f, "{op}: normalized axis of length {len} is degenerate")
            }
            KernelError::InsufficientBatch { op, batch } => {
                write!(f, "{op}: batch of {batch} is insufficient in train mode")
            }
            KernelError::LabelOutOfRange {
                index,
                label,
                classes,
            } => write!(
                f,
                "label {label} at index {index} is outside [0, {classes})"
            ),
            KernelError::NonScalarRoot { shape } => {
                write!(f, "backward root must be scalar, got shape {shape:?}")
            }
            KernelError::NegativeEntry { op, index } => {
                write!(f, "{op}: negative entry at flat index {index}")
            }
            KernelError::DataLength { expected, got } => {
                write!(f, "data length {got} does not match shape product {expected}")
            }
        }
    }
}

impl std::error::Error for KernelError {}

/// A plain host-side tensor: parameters, constants and results that live
/// outside any tape.
#[derive(Debug, Clone, PartialEq)]
pub struct HostTensor {
    pub data: Vec<f64>,
    pub shape: Vec<usize>,
}

impl HostTensor {
    pub fn new(data: Vec<f64>, shape: &[usize]) -> Result<Self, KernelError> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(KernelError::DataLength {
                expected: n,
                got: data.len(),
            });
        }
        Ok(HostTensor {
            data,
            shape: shape.to_vec(),
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        HostTensor {
            data: vec![0.0; shape.iter().product()],
            shape: shape.to_vec(),
        }
    }

    pub fn scalar(v: f64) -> Self {
        HostTensor {
            data: vec![v],
            shape: vec![],
        }
    }

    /// Identity matrix.
    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// 2-D element access (row-major).
    pub fn at(&self, i: usize, j: usize) -> f64 {
        debug_assert_eq!(self.shape.len(), 2);
        self.data[i * self.shape[1] + j]
    }
}

/// Running batch-norm statistics, one mean/variance pair per feature element.
#[derive(Debug, Clone, PartialEq)]
pub struct BnStat {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl BnStat {
    /// Fresh state: mean 0, variance 1 (the identity regime in eval mode).
    pub fn identity(features: usize) -> Self {
        BnStat {
            mean: vec![0.0; features],
            var: vec![1.0; features],
        }
    }

    /// Momentum update from one batch's statistics.
    pub fn update(&mut self, batch_mean: &[f64], batch_var: &[f64]) {
        let m = BATCH_NORM_MOMENTUM;
        for (r, b) in self.mean.iter_mut().zip(batch_mean) {
            *r = m * *r + (1.0 - m) * b;
        }
        for (r, b) in self.var.iter_mut().zip(batch_var) {
            *r = m * *r + (1.0 - m) * b;
        }
    }
}

/// Whether batch norm consumes batch statistics (train) or running ones (eval).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

/// Standard normal CDF, exact error-function form.
pub fn norm_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

/// Standard normal density.
pub fn norm_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}
