use std::path::PathBuf;

/// Errors raised anywhere in the stack.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A precondition of a model operation does not hold.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Parameter set fails validation; every violated predicate is listed.
    #[error("invalid parameters: {}", .0.join("; "))]
    InvalidParams(Vec<String>),

    /// The expert MIQP has no feasible point. `stage` is the first horizon
    /// step at which the truncated problem becomes infeasible, when known.
    #[error("infeasible MIQP (first conflicting stage: {stage:?})")]
    Infeasible { stage: Option<usize> },

    /// The solver stopped without a usable answer.
    #[error("solver failure: {0}")]
    Solver(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite loss at sample {sample}")]
    NonFinite { sample: usize },

    #[error("model config digest mismatch (file {found}, expected {expected})")]
    Digest { expected: String, found: String },

    #[error("unsupported format version {found} (expected {expected})")]
    Version { expected: String, found: String },

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    /// Process exit status: 2 for invalid input, 3 for solver failures, 4 for I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Infeasible { .. } | Error::Solver(_) | Error::NonFinite { .. } => 3,
            Error::Io { .. } => 4,
            _ => 2,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, line: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            line,
            msg: msg.into(),
        }
    }
}

pub(crate) fn contract<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Contract(msg.into()))
}
