//! Dense `f64` tensors, a reverse-mode tape and the Adam optimizer.
//!
//! The primitive set is deliberately small: matmul, row-broadcast add,
//! elementwise product and scaling, relu, sigmoid, row L2 normalization,
//! row softmax / log-softmax, floored log, sum, mean, transpose and squared
//! difference. Everything the training objective needs composes from these.

mod adam;
mod tape;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use tape::{sigmoid, Gradients, Tape, Var};
pub use tensor::Tensor;


use thiserror::Error;

/// Denominator guard for row normalization.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GradError {
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("shape {shape:?} needs {} values, got {len}", .shape.0 * .shape.1)]
    DataLength { shape: (usize, usize), len: usize },
    #[error("ragged rows: expected width {expected}, found {found}")]
    RaggedRows { expected: usize, found: usize },
    #[error("backward needs a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: (usize, usize) },
    #[error("optimizer tracks {expected} tensors, got {params} params and {grads} grads")]
    ParamCount {
        expected: usize,
        params: usize,
        grads: usize,
    },
}
