//! Continual learning in the frequency domain.
//!
//! An image classifier is trained over a sequence of tasks on half-resolution
//! frequency feature maps instead of raw pixels: a single-level Haar transform
//! splits each channel into four subbands, a small learnable encoder merges
//! them into a 3-channel map, and a reservoir buffer replays stored maps to
//! fight forgetting. A per-class feature-selection schedule (frequency and
//! semantic dropout over the extractor's output features) limits interference
//! between tasks.
//!
//! All numeric code is generic over the scalar type via [`Scalar`]; `f32` is
//! the training default and `f64` is used where tests need tight tolerances.

pub mod cffs;
pub mod dwt;
pub mod error;
pub mod ffe;
pub mod model;
pub mod nn;
pub mod replay;
pub mod scalar;
pub mod strategies;

pub use error::{Error, Result};
pub use scalar::Scalar;











