//! Root-depth estimation for people in images: network, losses, synthetic
//! training scenes and the evaluation metrics.

pub mod error;
pub mod experiment;
pub mod geometry;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod skeleton;
pub mod synth;

pub use error::{CoreError, Result};
