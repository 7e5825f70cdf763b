//! Crate-wide error type.

use thiserror::Error;

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or batch dimensions do not line up.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// A value that must be finite is NaN or infinite.
    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    /// A class label lies outside the valid range.
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    /// `backward` was called with no recorded forward pass.
    #[error("backward called without a recorded forward pass")]
    BackwardWithoutForward,

    /// Not enough data to perform the requested operation.
    #[error("insufficient data: {0}")]
    InsufficientData(String),

    /// The selected distance tail is constant, so no Weibull fit exists.
    #[error("degenerate tail: {0}")]
    DegenerateTail(String),

    /// A sample lies at or below the Weibull translation point.
    #[error("sample {sample} not above translation {translation}")]
    SampleBelowTranslation { sample: f64, translation: f64 },

    /// Model state does not support the requested operation.
    #[error("invalid model: {0}")]
    InvalidModel(String),

    /// A configuration value failed validation; names the offending field.
    #[error("invalid config field `{field}`: {reason}")]
    InvalidConfig { field: String, reason: String },

    /// A class id was added twice to the reference set.
    #[error("class {0} already present in reference set")]
    DuplicateClass(u32),

    /// Dataset parsing failed; carries the 1-based line number when known.
    #[error("parse error at line {line}: {reason}")]
    Parse { line: u64, reason: String },

    /// Serialized model version is not supported.
    #[error("unsupported model file version {got} (expected {expected})")]
    VersionMismatch { expected: u32, got: u32 },

    /// Mismatch between a dataset and a schedule or model.
    #[error("dataset mismatch: {0}")]
    DatasetMismatch(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidConfig {
            field: field.into(),
            reason: reason.into(),
        }
    }
}
