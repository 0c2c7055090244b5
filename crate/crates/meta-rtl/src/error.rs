//! Error types shared across the crate.
//!
//! Numerical failures (non-finite values, degenerate distributions) are kept
//! distinct from configuration/input problems so the CLI can map them to
//! different exit codes.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A loss evaluated to NaN or ±inf; carries the offending value.
    #[error("non-finite loss: {0}")]
    NonFiniteLoss(f64),

    /// A committed parameter update produced a NaN or ±inf entry.
    #[error("non-finite parameter {name}[{index}] = {value}")]
    NonFiniteParam {
        name: String,
        index: usize,
        value: f64,
    },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("empty batch: {0}")]
    EmptyBatch(String),

    #[error("config error: {0}")]
    ConfigError(String),

    /// Malformed input data; `line` is 1-based.
    #[error("parse error at line {line}: {message}")]
    ParseError { line: usize, message: String },

    /// A sampling prefix exhausted the probability mass.
    #[error("degenerate distribution: {0}")]
    DegenerateDistribution(String),

    /// The same objective produced two different values at the same point.
    #[error("nondeterministic loss: {0} vs {1}")]
    NondeterministicLoss(f64, f64),

    /// Analytic gradients disagreed with finite differences.
    #[error("gradient check failed: {flagged} coordinate(s) off, worst relative error {max_rel_err:e}")]
    GradientCheckFailed { max_rel_err: f64, flagged: usize },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code for the CLI: 1 for configuration/input problems,
    /// 2 for numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::ConfigError(_)
            | Error::ParseError { .. }
            | Error::EmptyBatch(_)
            | Error::Io(_) => 1,
            Error::NonFiniteLoss(_)
            | Error::NonFiniteParam { .. }
            | Error::ShapeMismatch(_)
            | Error::DegenerateDistribution(_)
            | Error::NondeterministicLoss(..)
            | Error::GradientCheckFailed { .. } => 2,
        }
    }
}
