//! Crate-wide error type. Every fallible operation returns [`Result`];
//! shape problems carry the offending operation name and shapes so that a
//! failure deep inside a forward pass still points at its call site.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum PhantomError {
    #[error("shape mismatch in {op}: lhs {lhs:?} vs rhs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid shape in {op}: {msg}")]
    InvalidShape { op: &'static str, msg: String },

    #[error("fully masked attention row")]
    FullyMaskedRow,

    #[error("loss mask selects no positions")]
    EmptyLossMask,

    #[error("backward root must be a scalar, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },

    #[error("backward called twice without reset")]
    DoubleBackward,

    #[error("backward called on an empty tape")]
    EmptyTape,

    #[error("index {index} out of range for axis of size {size}")]
    IndexOutOfRange { index: usize, size: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, PhantomError>;
