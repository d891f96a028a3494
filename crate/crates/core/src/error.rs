//! Error type shared across the crate.

use thiserror::Error;

#[derive(Error, Debug)]
pub enum Error {
    /// Graph construction or validation failure.
    #[error("invalid graph: {0}")]
    InvalidGraph(String),

    /// Parameters outside their admissible region (tau <= 0, |phi| >= 1, ...).
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// A precision matrix that is required to be positive definite is not.
    /// Carries a human-readable description of the offending parameter tuple.
    #[error("matrix not positive definite: {0}")]
    NotPositiveDefinite(String),

    /// A CAR precision would be singular (isolated node, zero degree).
    #[error("degenerate precision: {0}")]
    DegeneratePrecision(String),

    /// Mismatched vector/matrix dimensions.
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    /// Design matrix rank deficiency.
    #[error("rank deficient design: {0}")]
    RankDeficient(String),

    /// Augmented-design standard errors are undefined (singular information).
    #[error("degenerate standard errors: {0}")]
    DegenerateSe(String),

    /// Configuration inconsistent with the data or with itself.
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    /// Data ingestion problems (missing columns, bad cells, id mismatches).
    #[error("invalid data: {0}")]
    InvalidData(String),

    /// Unrecoverable numerical failure inside a fit.
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// I/O error while reading or writing artifacts.
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    /// CSV parse error.
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    /// JSON (de)serialization error.
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
