use std::path::PathBuf;

use thiserror::Error;

use crate::label_embedding::JointModel;

pub type Result<T> = std::result::Result<T, ZslError>;

/// Coarse failure category, used by the command line to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Input,
    Numerical,
    Config,
}

#[derive(Debug, Error)]
pub enum ZslError {
    #[error("{op}: dimension mismatch between {left:?} and {right:?}")]
    Dimension {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{what} value {value} at row {row}, column {col} is outside [0, 1]")]
    Range {
        what: String,
        row: String,
        col: String,
        value: f64,
    },

    #[error("invalid dataset: {0}")]
    Dataset(String),

    #[error("no constituent word of `{0}` is present in the word space")]
    MissingToken(String),

    #[error("incompatible checkpoint format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("training diverged at epoch {epoch}: {detail}")]
    Diverged {
        epoch: usize,
        detail: String,
        /// Parameters at the end of the last finite epoch.
        last_good: Option<Box<JointModel>>,
    },

    #[error("{0}")]
    Numerical(String),
}

impl ZslError {
    pub fn kind(&self) -> ErrorKind {
        match self {
            ZslError::NonFinite { .. } | ZslError::Diverged { .. } | ZslError::Numerical(_) => {
                ErrorKind::Numerical
            }
            ZslError::Config(_) => ErrorKind::Config,
            _ => ErrorKind::Input,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        ZslError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, line: usize, msg: impl Into<String>) -> Self {
        ZslError::Parse {
            path: path.into(),
            line,
            msg: msg.into(),
        }
    }
}
