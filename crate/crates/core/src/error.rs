use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid phantom spec: {0}")]
    InvalidSpec(String),
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("index out of range: {0}")]
    OutOfRange(String),
    #[error("solver diverged at stage {stage}: {what}")]
    Diverged { stage: usize, what: String },
    #[error("training diverged at step {step}: non-finite loss")]
    TrainingDiverged { step: usize },
    #[error("sinogram fill impossible: {0}")]
    Fill(String),
    #[error("graph error: {0}")]
    Graph(String),
    #[error("malformed file {path}: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error("config error: {0}")]
    Config(String),
    #[error("incompatible artifacts: {0}")]
    Incompatible(String),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
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
}
