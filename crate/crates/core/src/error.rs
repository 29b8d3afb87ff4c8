use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("mask has no foreground pixels")]
    EmptyMask,

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("failed to load {what}: {detail}")]
    Load { what: String, detail: String },

    #[error("checkpoint holds a {found} model but a {expected} model was requested")]
    BackendMismatch { expected: String, found: String },

    #[error("{0} backend has no trainable parameters")]
    NoTrainableParameters(String),

    #[error("non-finite loss {loss} at epoch {epoch}, batch {batch} (loss scale {loss_scale})")]
    Divergence {
        epoch: usize,
        batch: usize,
        loss_scale: f32,
        loss: f64,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("output directory {path} is locked by another run")]
    Locked { path: PathBuf },

    #[error("missing input {name}: {path}")]
    MissingInput { name: String, path: PathBuf },

    #[error("image error at {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

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

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn argument(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
