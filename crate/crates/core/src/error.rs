use std::io;

use thiserror::Error;

/// Errors raised by the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: [usize; 4],
        right: [usize; 4],
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value at FISTA iteration {iteration}")]
    NonFinite { iteration: usize },

    #[error("degenerate dictionary: {0}")]
    DegenerateDictionary(String),

    #[error("step size is stale: dictionary changed since the last refresh")]
    StaleStep,

    #[error("backward called before forward")]
    NoForwardCache,

    #[error("layer {index} ({kind}): {source}")]
    Layer {
        index: usize,
        kind: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidArgument(msg.into()))
}
