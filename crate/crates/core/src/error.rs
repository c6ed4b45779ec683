use std::io;
use std::path::Path;

use thiserror::Error;

pub type Result<T, E = MetroError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum MetroError {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("validation error: {0}")]
    Validation(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("alignment error: {0}")]
    Alignment(String),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: io::Error,
    },
}

impl MetroError {
    pub fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        MetroError::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub fn io(path: impl AsRef<Path>, source: io::Error) -> Self {
        MetroError::Io {
            context: path.as_ref().display().to_string(),
            source,
        }
    }

    /// Process exit code: 1 validation, 2 numeric failure, 3 I/O failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            MetroError::Dimension { .. }
            | MetroError::Validation(_)
            | MetroError::Config(_)
            | MetroError::Parse { .. } => 1,
            MetroError::Numeric(_) | MetroError::Alignment(_) => 2,
            MetroError::Io { .. } => 3,
        }
    }
}
