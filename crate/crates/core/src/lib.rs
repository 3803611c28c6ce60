//! Class-conditional, compositional 3D-aware image generation: conditional
//! generative feature fields composed into scenes, volume rendered to feature
//! images and upsampled by a neural renderer, trained adversarially against a
//! projection discriminator.

pub mod cli;
pub mod color;
pub mod conditioning;
pub mod data;
pub mod discriminator;
pub mod evaluation;
pub mod error;
pub mod fields;
pub mod nn;
pub mod rendering;
pub mod scene;
pub mod training;

pub use error::{Error, Result};
