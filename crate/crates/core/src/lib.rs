//! Dual-stream multimodal diffusion transformer on a procedural toy corpus.

pub mod checkpoint;
pub mod codec;
pub mod conditioning;
pub mod config;
pub mod dit;
pub mod error;
pub mod metrics;
pub mod nn;
pub mod objectives;
pub mod optim;
pub mod par;
pub mod raster;
pub mod rng;
pub mod rope;
pub mod samplers;
pub mod scalar;
pub mod toydata;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;
