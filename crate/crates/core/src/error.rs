//! One error type for the whole crate. Shape errors always name both shapes;
//! contract errors carry enough context to point at the offending row/sample.

use thiserror::Error;

#[derive(Error, Debug)]
pub enum Error {
    /// Two tensors (or a tensor and an expectation) disagree on shape.
    #[error("shape mismatch in {op}: lhs {lhs:?} vs rhs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A caller violated an operation's precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    /// A configuration value is inconsistent or out of range.
    #[error("invalid config: {0}")]
    Config(String),

    /// A sequence or layout failed structural validation.
    #[error("invalid sequence: {0}")]
    Validation(String),

    /// A single sample exceeds a packing budget on its own.
    #[error("sample {sample} exceeds packing budget: {detail}")]
    Oversize { sample: usize, detail: String },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
