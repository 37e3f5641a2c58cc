//! Crate-wide error type. Fallible operations return [`Result`]; variants
//! separate caller mistakes (validation, shape, invalid input) from file
//! problems (io, parse), exhausted randomized constructions, and broken
//! callback contracts.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A domain invariant failed at construction or call time.
    #[error("validation: {0}")]
    Validation(String),
    /// Structurally well-formed input that the operation cannot accept.
    #[error("invalid input: {0}")]
    InvalidInput(String),
    /// Array dimensions disagree.
    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    ShapeMismatch {
        context: &'static str,
        expected: String,
        got: String,
    },
    /// A closed-form expression hit a true singularity (e.g. alpha_bar = 0).
    #[error("singularity: {0}")]
    Singularity(String),
    /// A randomized construction exhausted its retry budget.
    #[error("construction failed: {0}")]
    Construction(String),
    /// A hook or callback broke its documented contract; the run aborts.
    #[error("contract violation: {0}")]
    ContractViolation(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn shape(context: &'static str, expected: impl Into<String>, got: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            context,
            expected: expected.into(),
            got: got.into(),
        }
    }
}
