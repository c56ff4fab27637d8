//! Crate-wide error type.

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error at {}:{line}: {msg}", path.display())]
    Parse {
        path: PathBuf,
        line: u64,
        msg: String,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("contract violation: {0}")]
    Domain(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    /// The eigensolver ran out of its iteration budget. Carries the best pair
    /// seen so the caller can decide whether to accept it.
    #[error(
        "eigensolver did not converge: value {value:.6e}, residual {residual:.3e} after {iterations} iterations"
    )]
    EigenNoConvergence {
        value: f64,
        residual: f64,
        iterations: usize,
        vector: Vec<f64>,
    },

    #[error("solver stalled: {0}")]
    Stalled(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, line: u64, msg: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            line,
            msg: msg.into(),
        }
    }

    /// Process exit code used by the command-line interface.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Stalled(_) => 1,
            _ => 2,
        }
    }
}
