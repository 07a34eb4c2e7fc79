use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value {value} at (row {row}, col {col})")]
    NonFinite { row: usize, col: usize, value: f64 },

    #[error("bad magic bytes in {path}")]
    BadMagic { path: PathBuf },

    #[error("truncated payload in {path}: expected {expected} bytes, found {found}")]
    Truncated {
        path: PathBuf,
        expected: usize,
        found: usize,
    },

    #[error("dimension mismatch in {path}: {detail}")]
    Dimensions { path: PathBuf, detail: String },

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error("malformed config: {0}")]
    Config(String),

    #[error("empty sample set: {0}")]
    EmptySampleSet(String),

    #[error("non-finite {component} loss at step {step} (batch index {batch_index:?})")]
    NonFiniteLoss {
        component: &'static str,
        step: u64,
        batch_index: Option<usize>,
    },

    #[error("png: {0}")]
    Png(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

macro_rules! shape_err {
    ($($arg:tt)*) => {
        $crate::error::Error::Shape(format!($($arg)*))
    };
}

macro_rules! invalid {
    ($($arg:tt)*) => {
        $crate::error::Error::InvalidArgument(format!($($arg)*))
    };
}

pub(crate) use invalid;
pub(crate) use shape_err;
