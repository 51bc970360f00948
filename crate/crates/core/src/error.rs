//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch on mode {mode}: {left} vs {right}")]
    ShapeMismatch { mode: usize, left: usize, right: usize },

    #[error("mode {mode} out of range for tensor with {ndim} modes")]
    ModeOutOfRange { mode: usize, ndim: usize },

    #[error("rank mismatch: expected {expected}, found {found}")]
    RankMismatch { expected: usize, found: usize },

    #[error("invalid argument: {0}")]
    InvalidArg(String),

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("{context}: no convergence after {iters} iterations (residual {residual:.3e})")]
    Convergence { context: String, iters: usize, residual: f64 },

    #[error("zero variance: statistic undefined for a constant field")]
    ZeroVariance,

    #[error("bad file format: {0}")]
    Format(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Process exit code for the CLI: 1 schema/config, 2 I/O, 3 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io(_) => 2,
            Error::NonFinite(_) | Error::Convergence { .. } | Error::ZeroVariance => 3,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
