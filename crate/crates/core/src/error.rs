//! Error types shared across the crate.

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum DlfError {
    /// Tensor or parameter shapes are inconsistent for the requested operation.
    #[error("shape error in {op}: {detail}")]
    Shape { op: String, detail: String },

    /// An operation produced a NaN or infinity from finite inputs.
    #[error("numerical overflow in {op}: non-finite value produced")]
    NonFinite { op: String },

    /// Invalid argument outside the shape system (bad label, bad range, ...).
    #[error("invalid argument: {0}")]
    InvalidArg(String),

    /// Structured parse failure for external file formats.
    #[error("parse error in {path} at byte {offset}: {detail}")]
    Parse {
        path: String,
        offset: u64,
        detail: String,
    },

    /// Underlying I/O failure.
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    /// Failure inside the inner training loop, tagged with the step it occurred at.
    #[error("inner training failed at step {step}: {source}")]
    InnerStep {
        step: usize,
        #[source]
        source: Box<DlfError>,
    },

    /// Failure inside the teacher optimization loop, tagged with the teacher step.
    #[error("teacher step {step} failed: {source}")]
    TeacherStep {
        step: usize,
        #[source]
        source: Box<DlfError>,
    },
}

impl DlfError {
    pub fn shape(op: impl Into<String>, detail: impl Into<String>) -> Self {
        DlfError::Shape {
            op: op.into(),
            detail: detail.into(),
        }
    }

    pub fn non_finite(op: impl Into<String>) -> Self {
        DlfError::NonFinite { op: op.into() }
    }
}

pub type Result<T> = std::result::Result<T, DlfError>;
