//! Numeric foundation: f64 tensors, a reverse-mode tape, GRU encoders,
//! and the Adam optimizer. Everything downstream differentiates through
//! these primitives, so each one carries an exact analytic adjoint.

mod adam;
mod gru;
mod tape;
mod tensor;

pub use adam::{Adam, AdamConfig};
pub use gru::{bigru_encode, bigru_final_states, gru_cell, gru_encode_last, GruParams};
pub use tape::{NodeId, ParamId, ParamStore, Tape};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum NumericsError {
    #[error("{op}: shape mismatch ({detail})")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("backward needs a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("parameter {name:?} already registered")]
    DuplicateParam { name: String },
    #[error("parameter {name:?} not found")]
    MissingParam { name: String },
    #[error("{op}: empty input sequence")]
    EmptySequence { op: &'static str },
}

/// Negative-slope coefficient shared by every leaky rectifier in the model.
pub const LEAKY_SLOPE: f64 = 0.01;
