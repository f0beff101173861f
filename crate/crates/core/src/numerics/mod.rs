//! Dense arrays, a reverse-mode tape, parameter storage and a finite-difference checker.

mod array;
pub mod gradcheck;
mod params;
mod tape;

pub use array::{Array, LAYERNORM_EPS, MASK_BIAS};
pub use params::{Bound, ParamId, ParamStore};
pub use tape::{AttentionStats, Gradients, Tape, Var};

use thiserror::Error;

/// Central finite-difference step used by gradient checks.
pub const FD_STEP: f64 = 1e-5;
/// Relative tolerance for gradient checks.
pub const FD_REL_TOL: f64 = 1e-4;
/// Absolute floor below which two gradients are considered equal.
pub const FD_ABS_TOL: f64 = 1e-8;
/// Relative rounding error assumed for one forward evaluation; see
/// [`gradcheck::roundoff_floor`].
pub const FD_ROUNDOFF: f64 = 1e-13;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NumericError {
    #[error("dimension error in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid shape in {op}: {reason}")]
    InvalidShape { op: &'static str, reason: String },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("softmax row {row} has every element masked")]
    DegenerateSoftmax { row: usize },
    #[error("backward needs a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("tape node {node} refers to later node {parent}")]
    CyclicTape { node: usize, parent: usize },
}
