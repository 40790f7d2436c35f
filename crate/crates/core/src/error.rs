use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed json in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("payload length mismatch: expected {expected} bytes, found {found}")]
    PayloadLength { expected: usize, found: usize },

    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("atom count mismatch: expected {expected}, found {found}")]
    AtomCount { expected: usize, found: usize },

    #[error("degenerate bond between atoms {0} and {1}")]
    DegenerateBond(usize, usize),

    #[error("vertex {0} has no incident edges")]
    IsolatedVertex(usize),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("graph hierarchy: {0}")]
    Hierarchy(String),

    #[error("incompatible checkpoint: {0}")]
    Checkpoint(String),

    #[error("analysis failed: {0}")]
    Analysis(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Self::Shape {
            op,
            detail: detail.into(),
        }
    }
}
