//! Binary hole masks and their per-level pyramid.
//!
//! Convention throughout: `1` marks a missing pixel, `0` marks context.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::shape(format!(
                "mask {height}x{width} needs {} values, got {}",
                height * width,
                values.len()
            )));
        }
        if let Some(&bad) = values.iter().find(|&&v| v != 0.0 && v != 1.0) {
            return Err(Error::NonBinaryMask(bad));
        }
        Ok(BinaryMask {
            height,
            width,
            values,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        BinaryMask {
            height,
            width,
            values: vec![0.0; height * width],
        }
    }

    pub fn ones(height: usize, width: usize) -> Self {
        BinaryMask {
            height,
            width,
            values: vec![1.0; height * width],
        }
    }

    /// Hole on the axis-aligned block `[top, top+h) × [left, left+w)`.
    pub fn rect(height: usize, width: usize, top: usize, left: usize, h: usize, w: usize) -> Self {
        let mut m = Self::zeros(height, width);
        for y in top..(top + h).min(height) {
            for x in left..(left + w).min(width) {
                m.values[y * width + x] = 1.0;
            }
        }
        m
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.values[y * self.width + x] == 1.0
    }

    /// Number of hole pixels.
    pub fn hole_count(&self) -> usize {
        self.values.iter().filter(|&&v| v == 1.0).count()
    }

    pub fn is_all_holes(&self) -> bool {
        self.hole_count() == self.values.len()
    }

    /// `[1, channels, H, W]` tensor with the mask repeated on every channel.
    pub fn to_tensor(&self, channels: usize) -> Tensor {
        let mut data = Vec::with_capacity(channels * self.values.len());
        for _ in 0..channels {
            data.extend_from_slice(&self.values);
        }
        Tensor::from_vec(&[1, channels, self.height, self.width], data)
    }

    /// Nearest-neighbor downsample by an integer factor: `out[i][j] = self[i·f][j·f]`.
    pub fn subsample(&self, factor: usize) -> BinaryMask {
        let (h, w) = (self.height / factor, self.width / factor);
        let values = (0..h)
            .flat_map(|i| (0..w).map(move |j| (i, j)))
            .map(|(i, j)| self.values[i * factor * self.width + j * factor])
            .collect();
        BinaryMask {
            height: h,
            width: w,
            values,
        }
    }

    /// Nearest-neighbor resize to an arbitrary size (pixel-center sampling).
    pub fn resize_nearest(&self, height: usize, width: usize) -> BinaryMask {
        let values = (0..height)
            .flat_map(|i| (0..width).map(move |j| (i, j)))
            .map(|(i, j)| {
                let sy = ((i as f64 + 0.5) * self.height as f64 / height as f64) as usize;
                let sx = ((j as f64 + 0.5) * self.width as f64 / width as f64) as usize;
                self.values[sy.min(self.height - 1) * self.width + sx.min(self.width - 1)]
            })
            .collect();
        BinaryMask {
            height,
            width,
            values,
        }
    }
}

/// One mask per encoder level; level 0 is full resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskPyramid {
    levels: Vec<BinaryMask>,
}

impl MaskPyramid {
    pub fn levels(&self) -> &[BinaryMask] {
        &self.levels
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    pub fn level(&self, index: usize) -> &BinaryMask {
        &self.levels[index]
    }
}

/// Builds `levels` masks by nearest-neighbor downsampling: level `l`
/// (0-based) samples the full mask at `(i·2^l, j·2^l)`.
pub fn evolve_mask(mask: &BinaryMask, levels: usize) -> Result<MaskPyramid> {
    if levels == 0 {
        return Err(Error::config("a mask pyramid needs at least one level"));
    }
    let factor = 1usize << (levels - 1);
    if !mask.height.is_multiple_of(factor) || !mask.width.is_multiple_of(factor) {
        return Err(Error::shape(format!(
            "{}x{} mask cannot be halved {} times",
            mask.height,
            mask.width,
            levels - 1
        )));
    }
    Ok(MaskPyramid {
        levels: (0..levels).map(|l| mask.subsample(1 << l)).collect(),
    })
}
