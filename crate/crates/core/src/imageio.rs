//! 8-bit PNG load/save.

use std::path::Path;

use image::{DynamicImage, GrayImage, RgbImage};
use ndarray::Array3;

use crate::error::{Error, Result};
use crate::types::ImageTensor;

/// Loads an 8-bit PNG, dividing by 255. Images with alpha lose the alpha channel.
pub fn load_png(path: impl AsRef<Path>) -> Result<ImageTensor> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let img = image::load_from_memory_with_format(&bytes, image::ImageFormat::Png)
        .map_err(|e| Error::Decode { path: path.to_path_buf(), message: e.to_string() })?;
    let data = match img {
        DynamicImage::ImageLuma8(g) => to_array(g.width(), g.height(), 1, g.into_raw()),
        DynamicImage::ImageLumaA8(_) => {
            let g = img.to_luma8();
            to_array(g.width(), g.height(), 1, g.into_raw())
        }
        DynamicImage::ImageRgb8(rgb) => to_array(rgb.width(), rgb.height(), 3, rgb.into_raw()),
        DynamicImage::ImageRgba8(_) => {
            let rgb = img.to_rgb8();
            to_array(rgb.width(), rgb.height(), 3, rgb.into_raw())
        }
        other => {
            return Err(Error::Decode {
                path: path.to_path_buf(),
                message: format!("unsupported pixel format {:?}, expected 8-bit", other.color()),
            })
        }
    };
    ImageTensor::new(data)
}

fn to_array(width: u32, height: u32, channels: usize, raw: Vec<u8>) -> Array3<f64> {
    Array3::from_shape_vec((height as usize, width as usize, channels), raw)
        .expect("decoder returned a buffer matching its dimensions")
        .mapv(|v| f64::from(v) / 255.0)
}

/// Quantizes a clamped value to 8 bits, rounding half up.
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

pub fn encode_png(img: &ImageTensor) -> Result<Vec<u8>> {
    let (h, w, c) = img.dim();
    let raw: Vec<u8> = img.data().iter().map(|&v| quantize(v)).collect();
    let dynamic = if c == 1 {
        DynamicImage::ImageLuma8(GrayImage::from_raw(w as u32, h as u32, raw).expect("buffer size"))
    } else {
        DynamicImage::ImageRgb8(RgbImage::from_raw(w as u32, h as u32, raw).expect("buffer size"))
    };
    let mut out = std::io::Cursor::new(Vec::new());
    dynamic
        .write_to(&mut out, image::ImageFormat::Png)
        .map_err(|e| Error::InvalidArgument(format!("png encoding failed: {e}")))?;
    Ok(out.into_inner())
}

/// Saves as 8-bit PNG; values are clamped, scaled by 255 and rounded half up.
pub fn save_png(img: &ImageTensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_png(img)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
