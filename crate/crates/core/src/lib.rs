//! Self-supervised super-resolution for dynamic volumetric series acquired
//! with interleaved slice sampling.

pub mod acquisition;
pub mod error;
pub mod metrics;
pub mod models;
pub mod phantom;
pub mod pipeline;
pub mod sampling;
pub mod motion;
pub mod nn;
pub mod spline;
pub mod volume;

pub use error::{Error, Result};
