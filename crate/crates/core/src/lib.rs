//! Task-driven super-resolution of document images.

pub mod checkpoint;
pub mod data;
pub mod detector;
pub mod error;
pub mod experiment;
pub mod eval;
pub mod imageio;
pub mod loss;
pub mod models;
pub mod nn;
pub mod resample;
pub mod seed;
pub mod train;
pub mod types;

pub use error::{Error, Result};
pub use types::{BBox, ImageTensor, LossComponentId, ScaleFactor};
