//! Monte-Carlo-Dropout UNet segmentation with per-pixel uncertainty.

pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod grid;
pub mod layers;
pub mod mc;
pub mod metrics;
pub mod report;
pub mod rng;
pub mod tensor;
pub mod training;
pub mod unet;

pub use error::{Error, Result};
