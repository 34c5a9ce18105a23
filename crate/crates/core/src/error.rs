use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("state space too large: {count} states exceeds cap {cap}")]
    StateSpaceTooLarge { count: u128, cap: usize },

    #[error("no convergence after {sweeps} sweeps (residual {residual:e})")]
    NonConvergence { sweeps: usize, residual: f64 },

    #[error("singular linear system")]
    SingularSystem,

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("replay buffer is empty")]
    EmptyBuffer,

    #[error("unknown agent id {0}")]
    UnknownAgentId(usize),

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    #[error("non-finite loss value in {0}")]
    NonFiniteLoss(&'static str),

    #[error("malformed map: {0}")]
    MalformedMap(String),

    #[error("{path}: malformed record at line {line}: {reason}")]
    MalformedRecord {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(expected: impl ToString, got: impl ToString) -> Self {
        Error::ShapeMismatch {
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }
}
