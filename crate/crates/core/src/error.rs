use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Two shapes that had to agree did not.
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    Input(String),

    /// Non-finite values showed up in a gradient or loss.
    #[error("numeric divergence: {0}")]
    Divergence(String),

    #[error("invalid network graph: {0}")]
    Graph(String),

    /// A prune request could not be satisfied without emptying a group.
    #[error("budget error: {0}")]
    Budget(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("format error in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("container version mismatch: found {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("checksum mismatch for tensor `{tensor}`")]
    Checksum { tensor: String },

    #[error("blob for tensor `{tensor}` is missing: {path}")]
    MissingBlob { tensor: String, path: PathBuf },

    #[error("blob for tensor `{tensor}` is truncated: expected {expected} bytes, found {found}")]
    TruncatedBlob {
        tensor: String,
        expected: usize,
        found: usize,
    },

    #[error("manifest error: {0}")]
    Manifest(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
