//! MultiMix: sparingly-supervised joint disease classification and anatomy
//! segmentation with confidence-thresholded pseudo-labeling, Dice + KL
//! consistency, and a saliency bridge between the two tasks.
//!
//! Core math is generic over the scalar type ([`Scalar`]: f32 or f64);
//! training defaults to f32, gradient checks and oracles run in f64.

pub mod augment;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod report;
pub mod rng;
pub mod scalar;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
pub use scalar::{Dtype, Scalar};

/// Concrete instantiations of the generic core.
pub type ParamsF32 = model::ParameterSet<f32>;
pub type ParamsF64 = model::ParameterSet<f64>;
pub type BundleF32 = model::PredictionBundle<f32>;
pub type BundleF64 = model::PredictionBundle<f64>;

/// Training default scalar type.
pub type DefaultScalar = f32;
