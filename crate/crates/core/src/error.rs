use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("bad magic: expected \"ANIC\", found {0:?}")]
    BadMagic([u8; 4]),

    #[error("unsupported tensor file version {0}")]
    UnsupportedVersion(u32),

    #[error("unknown dtype code {0}")]
    UnknownDtype(u8),

    #[error("truncated tensor file: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },

    #[error("tensor file has {0} trailing bytes after the payload")]
    TrailingBytes(usize),

    #[error("tensor dims must be nonempty")]
    EmptyDims,

    #[error("tensor has {0} dims, at most 8 are supported")]
    TooManyDims(usize),

    #[error("tensor dims {0:?} overflow the addressable size")]
    DimsOverflow(Vec<usize>),

    #[error("value count {values} does not match dims product {expected}")]
    LengthMismatch { values: usize, expected: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("value out of range: {0}")]
    Range(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid manifest: {0}")]
    Manifest(String),

    #[error("unknown sample id {0:?}")]
    MissingSample(String),

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("csv error on {path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn csv(path: impl Into<PathBuf>, source: csv::Error) -> Self {
        Error::Csv {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
