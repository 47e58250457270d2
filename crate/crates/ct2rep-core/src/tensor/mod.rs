//! Dense f64 tensor engine with reverse-mode differentiation.
//!
//! A [`Tape`] is rebuilt per forward pass (define-by-run): every op records
//! its inputs and a backward rule, [`Tape::backward`] replays the tape in
//! reverse, and [`Tape::scatter_grads`] accumulates leaf gradients back into
//! a [`ParamStore`]. Everything is plain `Vec<f64>` with row-major shapes.

mod adam;
mod params;
mod tape;

pub use adam::{Adam, AdamHyper};
pub use params::{Param, ParamId, ParamStore};
pub use tape::{Tape, TensorId};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: invalid axis {axis} for shape {shape:?}")]
    InvalidAxis {
        op: &'static str,
        axis: usize,
        shape: Vec<usize>,
    },
    #[error("{op}: invalid argument: {message}")]
    InvalidArgument { op: &'static str, message: String },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("parameter {name:?} has no gradient (run backward + scatter_grads first)")]
    MissingGrad { name: String },
    #[error("duplicate parameter name {name:?}")]
    DuplicateParam { name: String },
}

pub type Result<T> = std::result::Result<T, TensorError>;
