//! Region-proposal object detection for fine-grained species identification.
//!
//! The crate covers the whole pipeline: annotated dataset handling, tenfold
//! training-set amplification, a small convolutional detector with a
//! region-proposal head trained by SGD, and PR-curve / mAP evaluation.

pub mod augment;
pub mod dataset;
pub mod detector;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod image;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
