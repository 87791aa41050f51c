//! Minimal dense tensors with tape-based reverse-mode automatic differentiation.
//!
//! Everything here is a row-major matrix underneath: a tensor of shape
//! `[a, b, c]` is treated as `a * b` rows of `c` columns by every primitive.
//! That is all the tabular encoder needs, so there is no general broadcasting.
//!
//! The tape is generic over the scalar type. Training runs in `f32`; the same
//! code instantiated at `f64` serves as a high-precision reference for
//! finite-difference gradient checks.

mod optim;
mod tape;
mod tensor;

pub use optim::{AdamState, AdamW};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{Real, Tensor};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("index {index} out of range for {op} (size {size})")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        size: usize,
    },
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;
