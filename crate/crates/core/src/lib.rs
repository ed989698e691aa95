//! Streaming video dialogue with a fast per-frame path and a slow keyframe path.

pub mod aggregation;
pub mod config;
pub mod dataset;
pub mod dropping;
pub mod encoders;
pub mod engine;
pub mod error;
pub mod flops;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod params;
pub mod rng;
pub mod sequence;
pub mod slow_path;
pub mod system;
pub mod tensor;
pub mod train;
pub mod vocab;

pub use error::{Error, Result};
