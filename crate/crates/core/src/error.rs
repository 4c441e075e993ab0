use std::io;

use thiserror::Error;

/// Errors produced anywhere in the library.
///
/// The variants line up with the CLI exit classes: configuration and input
/// problems are user errors, numeric failures abort training, and
/// `Internal` marks a broken invariant (a bug, not bad input).
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("non-finite activation in layer {layer}: {detail}")]
    Numeric { layer: usize, detail: String },

    #[error("non-finite training loss at step {step} (last good checkpoint: {last_good})")]
    NonFiniteLoss { step: usize, last_good: String },

    #[error("degenerate fit: {0}")]
    DegenerateFit(String),

    #[error("internal error: {0}")]
    Internal(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn config_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Config(msg.into()))
}

pub(crate) fn input_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Input(msg.into()))
}
