//! Perception visualization: invert a frozen classifier's latent code with a
//! trained decoder and mask the reconstruction with a saliency map.

pub mod compose;
pub mod config;
pub mod data;
pub mod decoder;
pub mod desk;
pub mod digest;
pub mod error;
pub mod evaluation;
pub mod losses;
pub mod model;
pub mod nn;
pub mod par;
pub mod render;
pub mod report;
pub mod saliency;
pub mod tensor;
pub mod trainer;
pub mod workbench;

pub use error::{Error, Result, StageExt};
