use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("degenerate loss energy: {0}")]
    DegenerateEnergy(String),

    #[error("data format error: {0}")]
    Format(String),

    #[error("numerical instability: {0}")]
    Instability(String),

    #[error("checkpoint grids do not align: {0}")]
    Alignment(String),

    #[error("worker {worker} failed: {reason}")]
    Worker { worker: usize, reason: String },

    #[error("worker {worker} timed out waiting for round {round} ({received} of {needed} messages)")]
    Deadlock {
        worker: usize,
        round: u64,
        received: usize,
        needed: usize,
    },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    /// Process exit code used by the command-line driver.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::DimensionMismatch { .. } | Error::Alignment(_) => 2,
            Error::Format(_) | Error::Io(_) | Error::Csv(_) => 3,
            Error::Instability(_) | Error::DegenerateEnergy(_) => 4,
            Error::Worker { .. } | Error::Deadlock { .. } => 1,
        }
    }
}
