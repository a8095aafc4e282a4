use std::io;

use thiserror::Error;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("empty input")]
    EmptyInput,

    #[error("window too short for decomposition depth: length {len} < 2^{levels}")]
    WindowTooShort { len: usize, levels: usize },

    #[error("inconsistent pyramid: {0}")]
    InconsistentPyramid(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("degenerate batch: batch statistics need at least two values per channel")]
    DegenerateBatch,

    #[error("labels are not one-hot: {0}")]
    NotOneHot(String),

    #[error("backward called before any forward pass was recorded")]
    NoForward,

    #[error("silent window {0}: signal power is zero")]
    SilentWindow(usize),

    #[error("row {row}: {msg}")]
    Parse { row: usize, msg: String },

    #[error("invalid format: {0}")]
    Format(String),

    #[error("non-finite loss at epoch {epoch}, batch {batch} (first non-finite branch: {branch})")]
    NonFiniteLoss { epoch: usize, batch: usize, branch: String },

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Prefixes an I/O error with the path it concerns.
pub(crate) fn at_path(path: &std::path::Path) -> impl FnOnce(io::Error) -> Error + '_ {
    move |e| Error::Io(io::Error::new(e.kind(), format!("{}: {e}", path.display())))
}
