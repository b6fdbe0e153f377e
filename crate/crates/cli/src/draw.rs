//! RGB raster helpers for panels and plot labels.

use font8x8::{UnicodeFonts, BASIC_FONTS};
use ndarray::Array3;
use tasksr::{BBox, ImageTensor, Result};

pub type Rgb = [u8; 3];

pub struct Canvas {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl Canvas {
    pub fn new(width: usize, height: usize, fill: Rgb) -> Self {
        let mut pixels = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            pixels.extend_from_slice(&fill);
        }
        Canvas { width, height, pixels }
    }

    pub fn put(&mut self, x: i64, y: i64, c: Rgb) {
        if x < 0 || y < 0 || x as usize >= self.width || y as usize >= self.height {
            return;
        }
        let k = (y as usize * self.width + x as usize) * 3;
        self.pixels[k..k + 3].copy_from_slice(&c);
    }

    /// Copies an image in, grayscale replicated to RGB, at integer `scale`
    /// (nearest neighbour).
    pub fn blit(&mut self, img: &ImageTensor, left: usize, top: usize, scale: usize) {
        let d = img.data();
        let (h, w, c) = d.dim();
        for i in 0..h * scale {
            for j in 0..w * scale {
                let (si, sj) = (i / scale, j / scale);
                let px = |ch: usize| tasksr::imageio::quantize(d[[si, sj, if c == 1 { 0 } else { ch }]]);
                self.put((left + j) as i64, (top + i) as i64, [px(0), px(1), px(2)]);
            }
        }
    }

    pub fn rect_outline(&mut self, b: &BBox, left: usize, top: usize, c: Rgb) {
        let (x0, y0) = (b.x0.floor() as i64 + left as i64, b.y0.floor() as i64 + top as i64);
        let (x1, y1) = (b.x1.ceil() as i64 - 1 + left as i64, b.y1.ceil() as i64 - 1 + top as i64);
        for x in x0..=x1 {
            self.put(x, y0, c);
            self.put(x, y1, c);
        }
        for y in y0..=y1 {
            self.put(x0, y, c);
            self.put(x1, y, c);
        }
    }

    /// 8x8 bitmap text; `scale` enlarges each font pixel.
    pub fn text(&mut self, s: &str, x: usize, y: usize, scale: usize, c: Rgb) {
        for (k, ch) in s.chars().enumerate() {
            let glyph = BASIC_FONTS.get(ch).unwrap_or([0; 8]);
            for (row, bits) in glyph.iter().enumerate() {
                for col in 0..8 {
                    if bits >> col & 1 == 1 {
                        for dy in 0..scale {
                            for dx in 0..scale {
                                let px = x + (k * 8 + col) * scale + dx;
                                self.put(px as i64, (y + row * scale + dy) as i64, c);
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn to_image(&self) -> Result<ImageTensor> {
        let a = Array3::from_shape_fn((self.height, self.width, 3), |(i, j, c)| {
            f64::from(self.pixels[(i * self.width + j) * 3 + c]) / 255.0
        });
        ImageTensor::new(a)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        tasksr::imageio::save_png(&self.to_image()?, path)
    }
}
