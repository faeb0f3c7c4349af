//! Scene change detection between two roughly registered images.
//!
//! The pipeline estimates dense optical flow from `I` to `I'` (tentative NCC
//! matches, five-point RANSAC outlier rejection, variational densification of
//! the inliers) and feeds both images plus the flow into an encoder-decoder
//! network that predicts a per-pixel change probability.

pub mod datasets;
pub mod densify;
pub mod epipolar;
pub mod error;
pub mod io;
pub mod matcher;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod tensor;

pub use error::{Error, Result};
