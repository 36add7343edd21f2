//! Pyramid-context encoder network for image inpainting.

#![allow(clippy::needless_range_loop)]

pub mod atn;
pub mod autograd;
pub mod checkpoint;
pub mod conv;
pub mod data;
pub mod error;
pub mod inpaint;
pub mod kernels;
pub mod losses;
pub mod mask;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod sample;
pub mod tensor;
pub mod train;
pub mod wire;

pub use autograd::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
pub use mask::{evolve_mask, BinaryMask, MaskPyramid};
pub use model::{Discriminator, Generator, ModelConfig};
pub use sample::{ImageSample, MultiScaleOutputs};
