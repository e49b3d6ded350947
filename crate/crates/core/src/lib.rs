//! Synthetic ultrasound frames from tissue slices and attenuation maps.

pub mod acoustics;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod oracle;
pub mod scene;
pub mod seed;
pub mod training;

pub use error::{Error, Result};
