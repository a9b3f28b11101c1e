//! Error types shared across the crate.

use std::path::PathBuf;
use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// A configuration or specification field failed validation.
    #[error("invalid {field}: {reason}")]
    Validation { field: String, reason: String },

    /// Filesystem failure, annotated with the offending path.
    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A manifest record references a file that does not exist.
    #[error("missing image file: {path}")]
    MissingFile { path: PathBuf },

    /// Manifest content violates the dataset schema.
    #[error("manifest schema error: {0}")]
    Schema(String),

    /// Tensor dimensions do not line up.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A token sequence exceeds the encoder's maximum length.
    #[error("sequence too long: {0}")]
    Length(String),

    /// A checkpoint file is corrupt or carries an unexpected field.
    #[error("checkpoint error in {field}: {reason}")]
    Checkpoint { field: String, reason: String },

    /// Two artifacts that must agree (teacher/store/class set) do not.
    #[error("incompatible artifacts: {0}")]
    Compatibility(String),

    /// Inputs to an aggregation disagree on class set or provenance.
    #[error("aggregation mismatch: {0}")]
    Aggregation(String),

    /// A computation would produce NaN or divide by a zero norm.
    #[error("numerical error: {0}")]
    Numerical(String),

    /// An operation received an empty batch or dataset.
    #[error("empty input: {0}")]
    Empty(String),

    /// An artifact's recorded input hashes do not match the actual inputs.
    #[error("provenance mismatch: {0}")]
    Provenance(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn validation(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Validation {
            field: field.into(),
            reason: reason.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
