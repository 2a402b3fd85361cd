//! Error type shared across the workspace.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Imbalance profile parameters out of range (e.g. ratio ≤ 1).
    #[error("invalid profile: {0}")]
    InvalidProfile(String),

    /// Malformed input data (empty counts, bad label range, ...).
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Tensor/shape mismatch between configured and supplied dimensions.
    #[error("invalid shape: {0}")]
    InvalidShape(String),

    /// Configuration violates an invariant (alpha outside [0,1], ...).
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// Not enough samples for the requested operation (PCA needs ≥ 2 positions).
    #[error("insufficient samples: {0}")]
    InsufficientSamples(String),

    /// A feature record required by fusion is absent from the store.
    #[error("missing feature: {0}")]
    MissingFeature(String),

    /// Write conflict (duplicate id) in a feature store.
    #[error("conflict: {0}")]
    Conflict(String),

    /// Class prior is zero or negative where a log is required.
    #[error("invalid prior: {0}")]
    InvalidPrior(String),

    /// On-disk format violation (bad magic, overlapping offsets, checksum).
    #[error("format error: {0}")]
    Format(String),

    /// Training produced a non-finite loss; carries the last finite state.
    #[error("aborted run at epoch {epoch}, step {step}: {message}")]
    AbortedRun {
        epoch: usize,
        step: usize,
        message: String,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
