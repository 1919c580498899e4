use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("unknown layer name `{0}`")]
    UnknownLayer(String),

    #[error("unknown preset `{0}` (valid presets: I, II, III, IV, V, VI, VII, VIII)")]
    UnknownPreset(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("validation error in tensor `{name}`: {reason}")]
    Validation { name: String, reason: String },

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("manifest error: {0}")]
    Manifest(String),

    #[error("schedule error: {0}")]
    Schedule(String),

    /// The objective returned a non-finite value; carries the last iterate that
    /// evaluated to a finite loss.
    #[error("non-finite loss at iteration {iteration} (last finite loss {last_good_loss})")]
    NonFinite {
        iteration: usize,
        last_good_loss: f64,
        last_good: Vec<f64>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
