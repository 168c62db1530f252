//! Error type shared by every module of the crate.
//!
//! Errors carry enough structure for callers (and the CLI) to map them to
//! distinct process exit codes and to print actionable messages, including
//! concrete witnesses for mathematical failures such as a violated triangle
//! inequality.

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// A constructor or operation was called with parameters outside its
    /// documented domain.
    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    /// A construction would materialize more points than the configured
    /// point budget allows.
    #[error("point budget exceeded: construction needs {needed} points, budget is {budget}")]
    PointBudget { needed: u128, budget: u64 },

    /// An operation would perform more elementary steps than the configured
    /// work budget allows.
    #[error("work budget exceeded: operation needs about {needed} steps, budget is {budget}")]
    WorkBudget { needed: u128, budget: u64 },

    /// The triangle inequality failed at a concrete triple of point indices.
    #[error(
        "triangle inequality violated: d(x,z) > d(x,y) + d(y,z) \
         for x={x}, y={y}, z={z}"
    )]
    Triangle { x: usize, y: usize, z: usize },

    /// Randomized partition sampling exceeded its draw cap before assigning
    /// every point. The seed is reported so the failure can be replayed.
    #[error(
        "partition sampling cap exceeded at level {level}: {cap} center draws \
         were not enough (master seed {seed})"
    )]
    SamplingCap { level: usize, cap: u64, seed: u64 },

    /// An operator-norm witness was requested for the zero function.
    #[error("zero function rejected: {0}")]
    ZeroFunction(&'static str),

    /// A run manifest failed schema validation.
    #[error("manifest schema violation: {0}")]
    Schema(String),

    /// A radii sequence failed the temperedness condition required by the
    /// covering construction. Carries a human-readable witness.
    #[error("radii sequence is not tempered: {0}")]
    NotTempered(String),

    /// Wrapper for I/O failures while writing reports.
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    /// Wrapper for JSON (de)serialization failures.
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code the CLI maps this error to.
    ///
    /// * `2` — malformed input (parameters, manifest schema)
    /// * `3` — budget exhaustion
    /// * `4` — randomized sampling gave up (cap exceeded)
    /// * `1` — everything else (mathematical check failures, I/O)
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidParam(_) | Error::Schema(_) | Error::Json(_) => 2,
            Error::PointBudget { .. } | Error::WorkBudget { .. } => 3,
            Error::SamplingCap { .. } => 4,
            _ => 1,
        }
    }
}

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
