use crate::error::{Error, Result};
use crate::mask::BinaryMask;
use crate::tensor::Tensor;

/// An RGB image in `[-1, 1]`, stored as a `[1, 3, H, W]` tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageSample {
    pixels: Tensor,
    pub source_path: String,
    pub id: String,
}

impl ImageSample {
    pub fn new(pixels: Tensor, source_path: impl Into<String>, id: impl Into<String>) -> Result<Self> {
        let shape = pixels.shape();
        if shape.len() != 4 || shape[0] != 1 || shape[1] != 3 {
            return Err(Error::shape(format!(
                "image must be [1, 3, H, W], got {shape:?}"
            )));
        }
        if let Some(v) = pixels.data().iter().find(|v| !(-1.0..=1.0).contains(*v)) {
            return Err(Error::shape(format!("pixel value {v} outside [-1, 1]")));
        }
        Ok(ImageSample {
            pixels,
            source_path: source_path.into(),
            id: id.into(),
        })
    }

    pub fn pixels(&self) -> &Tensor {
        &self.pixels
    }

    pub fn into_pixels(self) -> Tensor {
        self.pixels
    }

    pub fn height(&self) -> usize {
        self.pixels.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[3]
    }
}

/// Per-level RGB predictions, finest first, each `[N, 3, s, s]` and clipped to `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiScaleOutputs {
    pub outputs: Vec<Tensor>,
}

impl MultiScaleOutputs {
    /// The full-resolution prediction.
    pub fn finest(&self) -> &Tensor {
        &self.outputs[0]
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.outputs.iter().map(|t| t.shape()[2]).collect()
    }
}

/// `[N, channels, H, W]` tensor stacking the given masks on every channel.
pub fn mask_batch(masks: &[&BinaryMask], channels: usize) -> Result<Tensor> {
    let parts: Vec<Tensor> = masks.iter().map(|m| m.to_tensor(channels)).collect();
    Tensor::stack_batch(&parts)
}
