//! Error type shared by every module of the crate.

use thiserror::Error;

/// Failures reported by validation, solving, tracing and I/O.
#[derive(Debug, Error)]
pub enum Error {
    /// A configuration or input value violates a documented invariant.
    #[error("invalid {field}: {reason}")]
    Invalid { field: &'static str, reason: String },

    /// A query fell outside the domain covered by a grid or field.
    #[error("out of bounds: {0}")]
    OutOfBounds(String),

    /// A solver stage produced a non-finite value where a finite one is required.
    #[error("{stage} failed: {reason}")]
    Solve { stage: &'static str, reason: String },

    /// A traced trajectory entered a disallowed region or exceeded its step cap.
    #[error("trace failed at t={t:.6}, d={d:.6}, v={v:.6}: {reason}")]
    Trace { t: f64, d: f64, v: f64, reason: String },

    /// The requested time budget cannot be met or the calibration bracket failed.
    #[error("calibration failed: {0}")]
    Calibration(String),

    /// A saved bundle does not match the configuration it is resumed with.
    #[error("bundle mismatch: {0}")]
    Mismatch(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("config parse error: {0}")]
    Toml(#[from] toml::de::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn invalid(field: &'static str, reason: impl Into<String>) -> Self {
        Error::Invalid {
            field,
            reason: reason.into(),
        }
    }
}
