//! Self-supervised pretraining on multi-resolution image pyramids.
//!
//! A siamese encoder learns to say where a high-magnification patch sits
//! inside a low-magnification parent patch (one of `4^n` cells for a zoom
//! difference of `n` levels). The encoder is then transferred to a
//! patch-level subtype classifier whose predictions are aggregated per
//! patient by majority vote. An inside/outside pair task is provided as a
//! baseline, and everything runs on deterministic synthetic pyramids.

pub mod config;
pub mod downstream;
mod error;
pub mod eval;
pub mod model;
pub mod pipeline;
pub mod pretext;
pub mod pyramid;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
pub use zoomloc_nn::Scalar;

pub type Raster32 = pyramid::Raster<f32>;
pub type Raster64 = pyramid::Raster<f64>;
pub type Pyramid32 = pyramid::PyramidImage<f32>;
pub type Pyramid64 = pyramid::PyramidImage<f64>;
