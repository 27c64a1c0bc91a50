use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the retrieval pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    #[error("point ({x}, {y}, {z}) lies outside the cage lattice")]
    CageCoverage { x: f64, y: f64, z: f64 },

    #[error("optimization diverged: {0}")]
    Divergence(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),

    #[error("stale cache at {path}: {reason}")]
    StaleCache { path: PathBuf, reason: String },

    #[error("incomplete matrix: missing entry ({row}, {col})")]
    IncompleteMatrix { row: String, col: String },

    #[error("parse error in {path} at line {line}: {reason}")]
    Parse {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the CLI: 1 for usage/config problems, 2 for
    /// runtime and numeric failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidArgument(_) | Error::Config(_) | Error::Parse { .. } => 1,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
