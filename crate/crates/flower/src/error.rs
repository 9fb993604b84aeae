//! Error type shared across the crate.

use thiserror::Error;

/// Errors produced by model construction, data ingestion and estimation.
#[derive(Debug, Error)]
pub enum Error {
    /// A distribution or model parameter is outside its valid range.
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// A function argument is outside its mathematical domain.
    #[error("domain error: {0}")]
    Domain(String),

    /// Two objects that must share a shape or grid do not.
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    /// The input data cannot be used as-is (missing values, bad codes, ...).
    #[error("data error: {0}")]
    Data(String),

    /// A covariate level code or name is not in the persisted code table.
    #[error("unknown covariate level: {0}")]
    UnknownLevel(String),

    /// A cluster referenced by an estimator has no members.
    #[error("empty cluster: {0}")]
    EmptyCluster(String),

    /// A required input artifact is missing.
    #[error("missing artifact: {0}")]
    MissingArtifact(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
