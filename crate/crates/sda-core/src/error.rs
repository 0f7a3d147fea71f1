//! Error type shared across the crate.

use thiserror::Error;

/// Crate-wide error type. Variants map onto the CLI exit-code categories:
/// configuration (2), numerical failure (3), I/O and parsing (4).
#[derive(Debug, Error)]
pub enum SdaError {
    /// Invalid configuration value (bad hyperparameter, empty channel set, ...).
    #[error("config error: {0}")]
    Config(String),

    /// Input outside the mathematical domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// Mismatched grid/operator/denoiser dimensions.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Non-finite values or diverged iterations, with context.
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// One or more ensemble members failed; carries (member index, seed, message).
    #[error("ensemble failure: {} member(s) failed: {:?}", .0.len(), .0)]
    Ensemble(Vec<(usize, u64, String)>),

    /// Malformed input file content, with 1-based line number where known.
    #[error("parse error (line {line}): {msg}")]
    Parse { line: usize, msg: String },

    /// Malformed binary file (bad magic, truncated section, ...).
    #[error("file format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, SdaError>;

impl SdaError {
    pub fn config(msg: impl Into<String>) -> Self {
        SdaError::Config(msg.into())
    }

    pub fn domain(msg: impl Into<String>) -> Self {
        SdaError::Domain(msg.into())
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        SdaError::Shape(msg.into())
    }

    pub fn numerical(msg: impl Into<String>) -> Self {
        SdaError::Numerical(msg.into())
    }
}
