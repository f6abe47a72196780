use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {file} at row {row}: {message}")]
    Parse {
        file: String,
        row: usize,
        message: String,
    },

    #[error("trajectory too short: {len} steps, need at least {required}")]
    TrajectoryTooShort { len: usize, required: usize },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("shape error in {operand}: expected {expected}, got {actual}")]
    Shape {
        operand: &'static str,
        expected: String,
        actual: String,
    },

    #[error("degenerate phase: row {row} has both components exactly zero")]
    DegeneratePhase { row: usize },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("training diverged at iteration {iteration}: {detail}")]
    Divergence { iteration: usize, detail: String },

    #[error("simulation fault at t={time:.3}s: {detail}")]
    SimFault { time: f64, detail: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("missing artifact: {0}")]
    MissingArtifact(PathBuf),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(
        operand: &'static str,
        expected: impl std::fmt::Debug,
        actual: impl std::fmt::Debug,
    ) -> Self {
        Error::Shape {
            operand,
            expected: format!("{expected:?}"),
            actual: format!("{actual:?}"),
        }
    }
}
