//! Error type shared across the crate.

use thiserror::Error;

/// Errors surfaced by the public API. Internal contract violations
/// (e.g. mismatched shapes handed to a graph op) panic instead.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes are incompatible for the requested operation.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// A configuration value is invalid or inconsistent.
    #[error("configuration error: {0}")]
    Config(String),

    /// Input data violates a documented precondition.
    #[error("input error: {0}")]
    Input(String),

    /// No valid sample exists under the given rule (caller may fall back).
    #[error("infeasible: {0}")]
    Infeasible(String),

    /// A metric is undefined for this input (e.g. empty reference beats).
    #[error("metric undefined: {0}")]
    MetricUndefined(String),

    /// A numeric invariant broke (NaN/Inf, diverged loss).
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// Malformed file contents.
    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
