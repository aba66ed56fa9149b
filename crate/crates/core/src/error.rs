use std::path::PathBuf;

use thiserror::Error;

/// Errors surfaced by the consensus library.
#[derive(Debug, Error)]
pub enum ConsensusError {
    /// Input parameters violate a precondition (infeasible graph size, non-positive step, ...).
    #[error("parameter error: {0}")]
    Parameter(String),

    /// A numerical routine failed to converge or produced an inconsistent result.
    #[error("numerical error: {0}")]
    Numerical(String),

    /// Malformed input text (graph files, experiment tables).
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl ConsensusError {
    pub fn param(msg: impl Into<String>) -> Self {
        ConsensusError::Parameter(msg.into())
    }

    pub fn numerical(msg: impl Into<String>) -> Self {
        ConsensusError::Numerical(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        ConsensusError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the CLI: 1 for bad input, 2 for numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            ConsensusError::Numerical(_) => 2,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, ConsensusError>;
