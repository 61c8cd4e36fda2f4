//! Crate-wide error type. Library code returns `Result`; panics are reserved
//! for internal logic bugs (index arithmetic), never for bad caller input.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum EdsError {
    /// Dimension or shape disagreement between operands.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Caller-supplied value violates a documented precondition.
    #[error("invalid input: {0}")]
    Invalid(String),

    /// NaN/Inf encountered, or an algorithm left its numerical domain.
    #[error("numerical error: {0}")]
    Numerical(String),

    /// Malformed archive, manifest, or parameter file.
    #[error("format error: {0}")]
    Format(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, EdsError>;

impl EdsError {
    pub fn shape(msg: impl Into<String>) -> Self {
        EdsError::Shape(msg.into())
    }
    pub fn invalid(msg: impl Into<String>) -> Self {
        EdsError::Invalid(msg.into())
    }
    pub fn numerical(msg: impl Into<String>) -> Self {
        EdsError::Numerical(msg.into())
    }
    pub fn format(msg: impl Into<String>) -> Self {
        EdsError::Format(msg.into())
    }
    /// Io error annotated with the operation and path, so command-line
    /// failures name the file involved.
    pub fn io_at(op: &str, path: &std::path::Path, e: std::io::Error) -> Self {
        EdsError::Io(std::io::Error::new(
            e.kind(),
            format!("{op} {}: {e}", path.display()),
        ))
    }
}
