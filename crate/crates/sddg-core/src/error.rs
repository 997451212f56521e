//! Error types shared across the crate.
//!
//! Shape mismatches in tensor/matrix operators are programmer errors and
//! panic with a descriptive message; everything that can fail because of
//! *data* (configuration files, parameter validation, non-finite numerics
//! during a simulation, I/O) surfaces as [`SddgError`].

use thiserror::Error;

/// Unified error type for fallible library operations.
#[derive(Debug, Error)]
pub enum SddgError {
    /// Invalid model or solver parameters (validation at construction time).
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// Invalid or inconsistent configuration (files, presets, overrides).
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    /// A simulated state or cost became non-finite.
    /// `step` is the time index `k` at which the problem was detected.
    #[error("non-finite value during simulation at step k={step}: {context}")]
    NonFinite { step: i64, context: String },

    /// A gradient was non-finite when an optimizer update was attempted.
    #[error("non-finite gradient in optimizer update: {0}")]
    NonFiniteGradient(String),

    /// Numerical domain violation (log/power of a non-positive value where
    /// no clamp is permitted, singular normalization, ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// Checkpoint or cache container violations (bad magic, version, size).
    #[error("invalid container: {0}")]
    InvalidContainer(String),

    /// Underlying I/O failure, annotated with the path involved.
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    /// JSON (de)serialization failure.
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl SddgError {
    /// Helper to wrap an `io::Error` with the offending path.
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        SddgError::Io { path: path.into(), source }
    }
}
