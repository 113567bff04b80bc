//! Audio-driven generation of facial motion latents with a conditional
//! diffusion model over implicit 3D keypoints.

pub mod cli;
pub mod diffusion;
pub mod emotion;
pub mod error;
pub mod eval;
pub mod features;
pub mod generate;
pub mod motion_space;
pub mod nn;
pub mod normalization;
pub mod train;

pub use error::{Error, Result};
