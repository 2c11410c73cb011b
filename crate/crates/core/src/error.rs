use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Shapes or widths that do not line up with a model or session contract.
    #[error("configuration error: {0}")]
    Config(String),

    /// An API was driven in an order or with arguments it does not accept.
    #[error("usage error: {0}")]
    Usage(String),

    /// Caller-supplied data violates a documented precondition.
    #[error("input error: {0}")]
    Input(String),

    #[error("training error in `{param}`: {message}")]
    Training { param: String, message: String },

    #[error("non-finite loss at iteration {iteration} (batch frames {frames:?})")]
    NonFiniteLoss { iteration: u64, frames: Vec<usize> },

    #[error("decode error at byte offset {offset}: {message}")]
    Decode { offset: usize, message: String },

    #[error("format error: {0}")]
    Format(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("session refused: {0}")]
    SessionRefused(String),

    #[error("channel write failed after frame {last_frame:?}")]
    ChannelWrite {
        last_frame: Option<u32>,
        #[source]
        source: std::io::Error,
    },

    #[error("i/o error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
