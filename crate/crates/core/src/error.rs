use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("degenerate projection: |depth| = {depth:e} is below 1e-9")]
    DegenerateProjection { depth: f64 },

    #[error("invalid calibration for view {view}: {reason}")]
    Calibration { view: usize, reason: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape contract violated: {0}")]
    Shape(String),

    #[error("scene coverage below 99%: {uncovered} of {total} cells unseen, first uncovered region around ({x:.2}, {y:.2}) m")]
    Coverage { uncovered: usize, total: usize, x: f64, y: f64 },

    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },

    #[error("dataset error in {path}: {message}")]
    Dataset { path: PathBuf, message: String },

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("non-finite loss at step {step} (lr {lr:e}, inputs {inputs_hash})")]
    NonFiniteLoss { step: usize, lr: f64, inputs_hash: String },

    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Parse { path: path.into(), message: message.into() }
    }

    pub(crate) fn dataset(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Dataset { path: path.into(), message: message.into() }
    }
}
