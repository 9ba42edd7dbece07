use std::path::PathBuf;

use thiserror::Error;

use crate::embed::Stamp;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    Param(String),

    #[error("malformed input: {0}")]
    Format(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("numeric failure at round {round}, epoch {epoch}: {what}")]
    Numeric { round: usize, epoch: usize, what: String },

    #[error("historical table missing entry for node {node} at layer {layer}")]
    MissingEntry { node: usize, layer: usize },

    #[error("stale write to node {node} layer {layer}: stamp {attempted:?} is older than {current:?}")]
    StaleWrite {
        node: usize,
        layer: usize,
        current: Stamp,
        attempted: Stamp,
    },

    #[error("sync contract violation: {0}")]
    Sync(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::Param(msg.into())
    }
}
