use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },

    #[error("zero-norm vector")]
    ZeroNorm,

    #[error("non-finite value at coordinate {0}")]
    NonFinite(usize),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("sequence of {len} positions exceeds max_positions {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("duplicate id {0:?}")]
    DuplicateId(String),

    #[error("refinement step {step} failed: {source}")]
    Step {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("{} item(s) failed: {}", failed.len(), failed.iter().map(|(id, e)| format!("{id}: {e}")).collect::<Vec<_>>().join("; "))]
    Batch { failed: Vec<(String, Error)> },

    #[error("degenerate {0} ranks: all values equal")]
    DegenerateRanks(&'static str),

    #[error("transport error (retryable): {0}")]
    Transport(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("client error (HTTP {status}): {message}")]
    Client { status: u16, message: String },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("fixture margin {margin:.4} below required {required}")]
    FixtureMargin { margin: f64, required: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Whether a remote call that produced this error may be retried.
    pub fn is_transient(&self) -> bool {
        matches!(self, Error::Transport(_))
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}
