use std::path::PathBuf;

use thiserror::Error;

use crate::numcore::NumError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Num(#[from] NumError),

    #[error("item {0} has no entity alignment")]
    DanglingItem(usize),

    #[error("{what} {index} out of range (size {size})")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        size: usize,
    },

    #[error("no candidates left to sample: {0}")]
    Exhausted(String),

    #[error("user {user} has {have} interactions, needs more than {need}")]
    InsufficientInteractions { user: usize, have: usize, need: usize },

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("non-finite feature for task {0}")]
    NonFiniteFeature(usize),

    #[error("degenerate sampling distribution: {0}")]
    DegenerateDistribution(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("missing input: {}", .0.display())]
    MissingInput(PathBuf),

    #[error("malformed {file}:{line}: {msg}")]
    Parse {
        file: String,
        line: usize,
        msg: String,
    },

    #[error("infeasible synthetic spec: {0}")]
    Infeasible(String),

    #[error("io error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the command-line pipeline.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_)
            | Error::Infeasible(_)
            | Error::Parse { .. }
            | Error::DanglingItem(_)
            | Error::IndexOutOfRange { .. }
            | Error::InsufficientInteractions { .. }
            | Error::Exhausted(_)
            | Error::DegenerateDistribution(_) => 2,
            Error::MissingInput(_) => 3,
            Error::Divergence(_) | Error::NonFiniteFeature(_) => 4,
            Error::Num(NumError::NonFinite { .. }) => 4,
            _ => 1,
        }
    }
}
