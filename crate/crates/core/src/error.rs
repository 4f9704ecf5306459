use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid shape&scale preset [{ratio}, {width}]: {reason}")]
    Preset {
        ratio: f64,
        width: f64,
        reason: &'static str,
    },

    #[error("empty sampling lattice")]
    EmptyLattice,

    #[error("invalid target: {0}")]
    InvalidTarget(String),

    #[error("numerical guard: {0}")]
    NumericalGuard(String),

    #[error("non-finite value at input {input}, entry {entry} ({context})")]
    NonFinite {
        input: usize,
        entry: usize,
        context: String,
    },

    #[error("{targets} targets cannot be matched to {queries} queries")]
    Capacity { targets: usize, queries: usize },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: usize, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
