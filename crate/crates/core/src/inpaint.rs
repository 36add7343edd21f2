//! Inpainting at arbitrary image sizes on top of a fixed-resolution generator.

use image::imageops::FilterType;
use image::RgbImage;

use crate::data::{decode_mask, decode_rgb, encode_png_rgb, rgb_to_sample, tensor_to_rgb};
use crate::error::{Error, Result};
use crate::mask::BinaryMask;
use crate::model::Generator;

/// Fills the holes of `image` (holes where `mask` is 1).
///
/// Inputs of another size are resized to the model resolution, composed,
/// and resized back; context pixels are then copied from the original, so
/// they come back byte-identical at any size.
pub fn inpaint_rgb(generator: &Generator, image: &RgbImage, mask: &BinaryMask) -> Result<RgbImage> {
    let (w, h) = image.dimensions();
    if mask.width() != w as usize || mask.height() != h as usize {
        return Err(Error::shape(format!(
            "image is {w}x{h} but mask is {}x{}",
            mask.width(),
            mask.height()
        )));
    }
    if mask.hole_count() == 0 {
        return Ok(image.clone());
    }
    let res = generator.config.resolution;
    let sample = rgb_to_sample(image, res, "", "")?;
    let model_mask = if mask.height() == res && mask.width() == res {
        mask.clone()
    } else {
        mask.resize_nearest(res, res)
    };
    let (_, composed) = generator.generate(sample.pixels(), &[&model_mask])?;
    let mut filled = tensor_to_rgb(&composed, 0);
    if (w, h) != (res as u32, res as u32) {
        filled = image::imageops::resize(&filled, w, h, FilterType::Triangle);
    }
    for (x, y, px) in filled.enumerate_pixels_mut() {
        if !mask.get(y as usize, x as usize) {
            *px = *image.get_pixel(x, y);
        }
    }
    Ok(filled)
}

/// Decodes an encoded image and an encoded 8-bit mask, inpaints, and
/// returns the result PNG-encoded.
pub fn inpaint_encoded(generator: &Generator, image: &[u8], mask: &[u8]) -> Result<Vec<u8>> {
    let img = decode_rgb(image)?;
    let m = decode_mask(mask)?;
    encode_png_rgb(&inpaint_rgb(generator, &img, &m)?)
}
