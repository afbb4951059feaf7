//! Crate-wide error type.

use thiserror::Error;

/// Errors surfaced by codec, model, and I/O entry points.
///
/// Shape mismatches inside tensor kernels are programming errors and
/// panic instead; everything a caller can plausibly trigger with bad
/// inputs (malformed bitstreams, missing files, config violations)
/// comes through here.
#[derive(Debug, Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),

    #[error("bitstream error: {0}")]
    Bitstream(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("image error: {0}")]
    Image(String),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
