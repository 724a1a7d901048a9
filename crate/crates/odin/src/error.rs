//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor extents that do not line up (conv channels, linear widths, ...).
    #[error("shape error: {0}")]
    Shape(String),

    /// Crop/warp geometry that violates containment or bounds.
    #[error("geometry error: {0}")]
    Geometry(String),

    /// Malformed PPM/PGM/checkpoint bytes; `offset` is where parsing stopped.
    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },

    /// Invalid run configuration; the message lists every offending key.
    #[error("config error: {0}")]
    Config(String),

    /// Dataset problems: missing files, impossible scene configs, stale layouts.
    #[error("data error: {0}")]
    Data(String),

    /// Numerical failures: non-finite gradients, degenerate batches.
    #[error("numerical error: {0}")]
    Numeric(String),

    /// Checkpoint contents inconsistent with the requested model.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn geometry(msg: impl Into<String>) -> Self {
        Error::Geometry(msg.into())
    }

    pub fn parse(offset: usize, msg: impl Into<String>) -> Self {
        Error::Parse { offset, message: msg.into() }
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    pub fn checkpoint(msg: impl Into<String>) -> Self {
        Error::Checkpoint(msg.into())
    }

    /// Process exit code for the CLI: 1 usage/config, 2 data, 3 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 1,
            Error::Numeric(_) => 3,
            _ => 2,
        }
    }
}
