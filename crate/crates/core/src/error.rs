use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("labels file {path}: {msg}")]
    Labels { path: PathBuf, msg: String },

    #[error("audio file missing for labeled clip(s): {}", .0.join(", "))]
    MissingAudio(Vec<String>),

    #[error("audio decode error: {0}")]
    Audio(String),

    #[error("clip {clip_id}: {source}")]
    Clip {
        clip_id: String,
        #[source]
        source: Box<Error>,
    },

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("pretrained weights unavailable ({source_name}): {msg}")]
    PretrainedWeights { source_name: String, msg: String },

    #[error("training diverged at epoch {epoch}: non-finite loss on batch [{}]", .batch_ids.join(", "))]
    NonFiniteLoss { epoch: usize, batch_ids: Vec<String> },

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn with_clip(self, clip_id: &str) -> Self {
        Error::Clip {
            clip_id: clip_id.to_string(),
            source: Box::new(self),
        }
    }
}
