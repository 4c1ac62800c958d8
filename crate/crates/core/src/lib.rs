//! Detection of AI-generated images from frozen vision-encoder features and
//! small paired reference sets.

pub mod classify;
pub mod embed;
pub mod error;
pub mod harness;
pub mod launder;
pub mod manifest;
pub mod metrics;
pub mod num;
pub mod raster;
pub mod refset;
pub mod spectral;

pub use error::{Error, Result};
pub use num::Scalar;

/// Double-precision instantiations used by the harness and CLI.
pub type LinearModelF64 = classify::LinearModel<f64>;
pub type DetectorF64 = classify::Detector<f64>;
pub type TrainingSetF64 = classify::TrainingSet<f64>;
pub type SpectrumMapF64 = spectral::SpectrumMap<f64>;
pub type PlaneF64 = spectral::Plane<f64>;

/// Single-precision instantiations.
pub type LinearModelF32 = classify::LinearModel<f32>;
pub type DetectorF32 = classify::Detector<f32>;
pub type SpectrumMapF32 = spectral::SpectrumMap<f32>;
