//! Desk-scale long-tailed image recognition built around two ideas: fuse
//! frozen foundation-model features into a small trainable classifier (in
//! both the feature-map and latent spaces), and train with memory-bank
//! prototype losses that treat head and tail classes asymmetrically.
//!
//! All numeric code is generic over [`scalar::Scalar`] (f32 or f64).
//! The pipeline and on-disk formats use f32; the verification suites
//! (gradient checks, PCA oracles) instantiate the same code with f64.

pub mod data;
pub mod error;
pub mod feature_map;
pub mod gradcheck;
pub mod loss;
pub mod net;
pub mod provider;
pub mod rng;
pub mod train;
pub mod scalar;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Concrete aliases for the pipeline precision (f32) and the verification
/// precision (f64).
pub type FeatureMap32 = feature_map::FeatureMap<f32>;
pub type FeatureMap64 = feature_map::FeatureMap<f64>;
pub type Image32 = feature_map::Image<f32>;
pub type Image64 = feature_map::Image<f64>;
pub type Dataset32 = data::Dataset<f32>;
pub type Dataset64 = data::Dataset<f64>;
