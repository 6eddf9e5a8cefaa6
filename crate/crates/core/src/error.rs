use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid utf-8 input: {0}")]
    InvalidUtf8(#[from] std::str::Utf8Error),

    #[error("sample is not decodable: {0}")]
    Undecodable(String),

    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("invalid configuration `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("empty code list")]
    EmptyCodes,

    #[error("label `{0}` is not in the vocabulary")]
    UnknownLabel(String),

    #[error("{path}:{line}: {reason}")]
    Parse {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("non-finite loss {loss} at epoch {epoch}, step {step}")]
    NonFiniteLoss { loss: f64, epoch: usize, step: usize },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    /// Short machine-readable tag, used in CLI error records.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidUtf8(_) => "invalid_utf8",
            Error::Undecodable(_) => "undecodable",
            Error::DimensionMismatch { .. } => "dimension_mismatch",
            Error::Config { .. } => "config",
            Error::EmptyCodes => "empty_codes",
            Error::UnknownLabel(_) => "unknown_label",
            Error::Parse { .. } => "parse",
            Error::NonFiniteLoss { .. } => "non_finite_loss",
            Error::Checkpoint(_) => "checkpoint",
            Error::Io(_) => "io",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
