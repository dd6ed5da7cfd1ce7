use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the detection pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("generation failed: {0}")]
    Generation(String),

    #[error("training diverged at epoch {epoch}, batch {batch}: {detail}")]
    Training {
        epoch: usize,
        batch: usize,
        detail: String,
    },

    #[error("restoration produced a non-finite objective at iteration {iteration}")]
    Restoration { iteration: usize },

    #[error("calibration failed: {0}")]
    Calibration(String),

    #[error("evaluation failed: {0}")]
    Evaluation(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("malformed artifact {path}: {detail}")]
    Artifact { path: PathBuf, detail: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by user-supplied configuration rather than by
    /// the numerics or the environment.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_) | Error::Argument(_))
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
