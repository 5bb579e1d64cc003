use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("duplicate id {0:?}")]
    DuplicateId(String),

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("corrupt file: {0}")]
    Corruption(String),

    #[error("id/row alignment error: {0}")]
    Alignment(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimMismatch { expected: usize, actual: usize },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("config has {} problem(s):\n  {}", .0.len(), .0.join("\n  "))]
    ConfigItems(Vec<String>),

    #[error(
        "infeasible budget: target subset of {budget} exceeds the {available} stage-I survivors; \
         raise the stage-I keep fraction or lower the pruning ratio"
    )]
    Infeasible { budget: usize, available: usize },

    #[error("{total} surviving id(s) have no embedding: {}", .shown.join(", "))]
    MissingEmbeddings { total: usize, shown: Vec<String> },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the CLI: 2 config, 3 data/format, 4 infeasible budget.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::ConfigItems(_) => 2,
            Error::Infeasible { .. } => 4,
            _ => 3,
        }
    }
}
