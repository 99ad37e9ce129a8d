//! Multi-person 2D-to-3D pose lifting.
//!
//! A diffusion model lifts a group's 2D joint sequences to absolute 3D poses.
//! The denoiser is a spatio-temporal transformer whose spatial attention spans
//! every joint of every person in a frame, with learned person encodings so the
//! group size can change from scene to scene.

pub mod augment;
pub mod diffusion;
pub mod error;
pub mod evaluation;
pub mod model;
pub mod pose;
pub mod synthdata;
pub mod tracking;
pub mod training;

pub use error::{Error, Result};
