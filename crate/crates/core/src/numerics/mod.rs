//! Dense tensors and a tensor-level reverse-mode differentiation tape.
//!
//! The tape records only the handful of primitives the model and the
//! residual loss need. Every primitive carries its own adjoint rule; the
//! backward sweep walks the node list in reverse insertion order, which is
//! a valid topological order because nodes can only reference earlier ones.

mod sparse;
mod tape;
mod tensor;

pub use sparse::SparseMap;
pub use tape::{Gradients, Tape, Var};
pub use tensor::{matmul, Tensor};

pub(crate) use sparse::apply_along_axis;

use thiserror::Error;

/// Default layer-norm epsilon.
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("shape {shape:?} does not match data length {len}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("rows of unequal length")]
    Ragged,
    #[error("{op}: {reason}")]
    Invalid { op: &'static str, reason: String },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

/// Derivative of `silu`.
pub fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}
