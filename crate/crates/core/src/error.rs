use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Inconsistent block, model or run configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// Tensor shapes that cannot be combined.
    #[error("shape error: {0}")]
    Shape(String),

    /// Input data violating a documented contract (non-binary IMU mask,
    /// indivisible resolution, out-of-range annotation, ...).
    #[error("validation error: {0}")]
    Validation(String),

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    /// One or more samples of a dataset could not be paired.
    #[error("dataset error in {root}: {}", .problems.join("; "))]
    Dataset { root: PathBuf, problems: Vec<String> },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("image error in {path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for errors caused by how the library was called rather than by
    /// the data or the environment.
    pub fn is_usage(&self) -> bool {
        matches!(self, Error::Config(_) | Error::Shape(_))
    }
}

macro_rules! config_err {
    ($($arg:tt)*) => { $crate::error::Error::Config(format!($($arg)*)) };
}
macro_rules! shape_err {
    ($($arg:tt)*) => { $crate::error::Error::Shape(format!($($arg)*)) };
}
macro_rules! validation_err {
    ($($arg:tt)*) => { $crate::error::Error::Validation(format!($($arg)*)) };
}
pub(crate) use config_err;
pub(crate) use shape_err;
pub(crate) use validation_err;
