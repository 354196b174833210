use std::path::PathBuf;

/// Errors raised anywhere in the core pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid manifold point: {0}")]
    InvalidPoint(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("bad magic in {path}: expected {expected:?}")]
    BadMagic { path: PathBuf, expected: &'static str },
    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { found: u16, expected: u16 },
    #[error("truncated payload: {0}")]
    Truncated(String),
    #[error("corrupt payload: {0}")]
    Corrupt(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("missing forward cache: {0}")]
    MissingCache(&'static str),
    #[error("missing artifact: {0}")]
    MissingArtifact(String),
    #[error("model not converged: {0}")]
    NotConverged(String),
    #[error("unknown image id {0}")]
    UnknownImage(u32),
    #[error("{0}")]
    Analysis(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json error on {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }
}
