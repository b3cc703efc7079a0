//! Minimal reverse-mode differentiation over dense `f64` arrays.
//!
//! Every learnable stage of the pipeline is built from the operations on
//! [`Tape`]. Each forward call records its inputs and enough metadata to
//! replay the chain rule; [`Tape::backward`] walks the record in reverse.
//!
//! Conventions:
//! - binary elementwise ops broadcast numpy-style (shapes are right-aligned);
//! - `relu`, `abs` and `clamp_min` use a zero subgradient at the kink;
//! - every op output is checked for NaN/Inf and fails with
//!   [`DiffError::NonFinite`] naming the op.

pub mod cases;
mod gradcheck;
mod ops;
mod tape;
mod tensor;

pub use gradcheck::{gradcheck, relative_error, GradcheckError, GradcheckOptions, GradcheckReport};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{numel, strides, Tensor};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffError {
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("{op}: axis {axis} out of range for rank {rank}")]
    AxisOutOfRange { op: &'static str, axis: usize, rank: usize },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("backward: loss has {numel} elements, expected a scalar")]
    NotScalar { numel: usize },
    #[error("node {0} is not on this tape")]
    UnknownNode(usize),
    #[error("{op}: {detail}")]
    Invalid { op: &'static str, detail: String },
}
