use thiserror::Error;

/// Errors produced by the change-detection pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("format error: {0}")]
    Format(String),
    /// The five-point constraint matrix lost rank.
    #[error("degenerate sample: {0}")]
    DegenerateSample(String),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    /// RANSAC never produced a candidate model.
    #[error("no model found: {0}")]
    NoModel(String),
    #[error("ingestion error: {0}")]
    Ingestion(String),
    #[error("training diverged: {0}")]
    Divergence(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("image codec error: {0}")]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;

macro_rules! shape_err {
    ($($arg:tt)*) => { $crate::error::Error::Shape(format!($($arg)*)) };
}
macro_rules! param_err {
    ($($arg:tt)*) => { $crate::error::Error::InvalidParameter(format!($($arg)*)) };
}
pub(crate) use param_err;
pub(crate) use shape_err;
