//! Error types shared across the crate.

use std::path::PathBuf;

/// Errors surfaced by laboratory operations.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// An argument violated an operation's preconditions.
    #[error("invalid input: {0}")]
    Input(String),

    /// A configuration is internally inconsistent (ragged grid, spec/set
    /// mismatch, unknown key, ...).
    #[error("configuration error: {0}")]
    Config(String),

    /// An enumeration request exceeds the brute-force guard.
    #[error("capacity exceeded: {0}")]
    Capacity(String),

    /// Non-finite values reached the optimizer.
    #[error("numerical error: {0}")]
    Numerical(String),

    /// A transcript or serialized artifact could not be parsed.
    #[error("parse error: {0}")]
    Parse(String),

    /// A pipeline step produced no usable records.
    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    /// A stage of the outer training loop failed.
    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: usize,
        #[source]
        source: Box<Error>,
    },

    /// Filesystem failure, annotated with the path involved.
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Annotate an I/O failure with the path involved.
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
