use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed tensor file: {0}")]
    Format(String),

    #[error("unsupported tensor encoding: {0}")]
    UnsupportedEncoding(String),

    #[error("corrupt tensor file: {0}")]
    Corruption(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("total conflict: combined mass {0:e} leaves nothing to renormalize")]
    TotalConflict(f64),

    #[error("training diverged: {0}")]
    Divergence(String),
}

/// Coarse error families, used by front ends to pick exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Validation,
    Io,
    Numerical,
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Shape(_) | Error::Contract(_) => ErrorKind::Validation,
            Error::Io { .. }
            | Error::Format(_)
            | Error::UnsupportedEncoding(_)
            | Error::Corruption(_) => ErrorKind::Io,
            Error::Domain(_) | Error::TotalConflict(_) | Error::Divergence(_) => {
                ErrorKind::Numerical
            }
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
