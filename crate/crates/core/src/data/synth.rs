//! Procedural document pages: dark text lines on a paper-like background,
//! with ground-truth line boxes. Glyphs come from a bundled 8x8 bitmap font,
//! so output is bit-identical across machines for a given seed.

use std::collections::BTreeMap;
use std::path::Path;

use font8x8::{UnicodeFonts, BASIC_FONTS};
use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageio;
use crate::seed::derive_seed;
use crate::types::{BBox, ImageTensor};

const CHARSET: &[u8] = b"abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789";
const MIN_GLYPH_PX: f64 = 10.0;
const MAX_GLYPH_PX: f64 = 22.0;
/// Supersampling per axis when rasterizing glyph coverage.
const SUBSAMPLES: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Number of text lines; `None` picks one from the seed.
    pub lines: Option<usize>,
}

impl SynthConfig {
    pub fn new(height: usize, width: usize) -> Self {
        SynthConfig { height, width, channels: 1, lines: None }
    }

    /// Most lines that fit with the smallest glyph size.
    pub fn max_lines(&self) -> usize {
        ((self.height as f64 - 4.0) / (MIN_GLYPH_PX * 1.3)).floor().max(1.0) as usize
    }
}

/// One rendered text line, as logged by the generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinePlacement {
    pub text: String,
    pub glyph_px: f64,
    pub bbox: BBox,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDocument {
    pub image: ImageTensor,
    pub boxes: Vec<BBox>,
    pub placements: Vec<LinePlacement>,
}

/// Renders a grayscale page of random text lines; returns the image and the
/// line boxes.
pub fn generate_synthetic_document(seed: u64, size: (usize, usize)) -> Result<(ImageTensor, Vec<BBox>)> {
    let doc = generate(seed, &SynthConfig::new(size.0, size.1))?;
    Ok((doc.image, doc.boxes))
}

pub fn generate(seed: u64, cfg: &SynthConfig) -> Result<SyntheticDocument> {
    if cfg.height < 64 || cfg.width < 64 {
        return Err(Error::InvalidArgument(format!(
            "synthetic pages must be at least 64x64, got {}x{}",
            cfg.height, cfg.width
        )));
    }
    if cfg.channels != 1 && cfg.channels != 3 {
        return Err(Error::InvalidArgument(format!("unsupported channel count {}", cfg.channels)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "synth"));
    let (h, w, c) = (cfg.height, cfg.width, cfg.channels);

    let paper = paper_tone(&mut rng, c);
    let ink = ink_tone(&mut rng, c);
    let (fy, fx, phase) = (rng.random_range(0.2..1.5), rng.random_range(0.2..1.5), rng.random_range(0.0..6.28));
    let mut img = Array3::from_shape_fn((h, w, c), |(i, j, ch)| {
        let shade = 1.0 + 0.03 * (std::f64::consts::TAU * (i as f64 / h as f64 * fy + j as f64 / w as f64 * fx) + phase).sin();
        paper[ch] * shade
    });
    for v in img.iter_mut() {
        *v += rng.random_range(-0.01..0.01);
    }

    let n_lines = cfg.lines.unwrap_or_else(|| rng.random_range(2..=cfg.max_lines().max(2))).min(cfg.max_lines());
    let slot = (h as f64 - 4.0) / n_lines as f64;
    let mut placements = Vec::with_capacity(n_lines);
    let mut coverage = Array3::<f64>::zeros((h, w, 1));
    for line in 0..n_lines {
        let max_px = (slot / 1.3).min(MAX_GLYPH_PX);
        let glyph_px = rng.random_range(MIN_GLYPH_PX.min(max_px)..=max_px);
        let top = 2.0 + line as f64 * slot + rng.random_range(0.0..=(slot - glyph_px).max(0.0));
        let left = rng.random_range(2.0..(w as f64 / 4.0).max(3.0)).floor();
        let right_limit = rng.random_range((left + w as f64 / 3.0).min(w as f64 - 2.0)..=(w as f64 - 2.0));
        let text = random_text(&mut rng, ((right_limit - left) / glyph_px).floor().max(1.0) as usize);
        let ink_chars = text.trim_end().chars().count();
        let bbox = BBox::new(left, top, left + ink_chars as f64 * glyph_px, top + glyph_px)?
            .clip(h, w)
            .ok_or_else(|| Error::InvalidArgument("text line fell outside the page".into()))?;
        for (k, ch) in text.chars().enumerate() {
            draw_glyph(&mut coverage, ch, left + k as f64 * glyph_px, top, glyph_px);
        }
        placements.push(LinePlacement { text, glyph_px, bbox });
    }
    for i in 0..h {
        for j in 0..w {
            let a = coverage[[i, j, 0]].min(1.0);
            for ch in 0..c {
                img[[i, j, ch]] = img[[i, j, ch]] * (1.0 - a) + ink[ch] * a;
            }
        }
    }
    let image = ImageTensor::new(img)?.clamp();
    let boxes = placements.iter().map(|p| p.bbox).collect();
    Ok(SyntheticDocument { image, boxes, placements })
}

fn paper_tone(rng: &mut ChaCha8Rng, channels: usize) -> Vec<f64> {
    let base: f64 = rng.random_range(0.82..0.97);
    if channels == 1 {
        vec![base]
    } else {
        vec![base, base - rng.random_range(0.0..0.03), base - rng.random_range(0.02..0.08)]
    }
}

fn ink_tone(rng: &mut ChaCha8Rng, channels: usize) -> Vec<f64> {
    let base: f64 = rng.random_range(0.05..0.3);
    if channels == 1 {
        vec![base]
    } else {
        vec![base, base + rng.random_range(-0.03..0.03), base + rng.random_range(0.0..0.06)]
    }
}

/// Random words of 2-8 characters separated by single spaces, at most `max_chars` long.
fn random_text(rng: &mut ChaCha8Rng, max_chars: usize) -> String {
    let mut text = String::new();
    while text.len() < max_chars {
        if !text.is_empty() {
            if text.len() + 3 > max_chars {
                break;
            }
            text.push(' ');
        }
        let len = rng.random_range(2..=8).min(max_chars - text.len());
        for _ in 0..len {
            text.push(CHARSET[rng.random_range(0..CHARSET.len())] as char);
        }
    }
    text
}

/// Accumulates antialiased glyph coverage for one character cell.
fn draw_glyph(coverage: &mut Array3<f64>, ch: char, left: f64, top: f64, px: f64) {
    let Some(bitmap) = BASIC_FONTS.get(ch) else { return };
    let (h, w, _) = coverage.dim();
    let scale = 8.0 / px;
    let (i0, i1) = (top.floor().max(0.0) as usize, ((top + px).ceil() as usize).min(h));
    let (j0, j1) = (left.floor().max(0.0) as usize, ((left + px).ceil() as usize).min(w));
    for i in i0..i1 {
        for j in j0..j1 {
            let mut hits = 0;
            for si in 0..SUBSAMPLES {
                for sj in 0..SUBSAMPLES {
                    let y = i as f64 + (si as f64 + 0.5) / SUBSAMPLES as f64;
                    let x = j as f64 + (sj as f64 + 0.5) / SUBSAMPLES as f64;
                    let gy = ((y - top) * scale).floor();
                    let gx = ((x - left) * scale).floor();
                    if (0.0..8.0).contains(&gy) && (0.0..8.0).contains(&gx) && bitmap[gy as usize] >> (gx as usize) & 1 == 1 {
                        hits += 1;
                    }
                }
            }
            coverage[[i, j, 0]] += hits as f64 / (SUBSAMPLES * SUBSAMPLES) as f64;
        }
    }
}

/// Ground-truth line boxes of a written synthetic dataset, keyed by document id.
pub type BoxIndex = BTreeMap<String, Vec<BBox>>;

/// Writes `count` pages to `root/hr/doc_NNN.png` and their line boxes to
/// `root/boxes.json`. Returns the document ids.
pub fn write_synthetic_dataset(root: &Path, count: usize, cfg: &SynthConfig, seed: u64) -> Result<Vec<String>> {
    let hr_dir = root.join("hr");
    std::fs::create_dir_all(&hr_dir).map_err(|e| Error::io(&hr_dir, e))?;
    let mut index = BoxIndex::new();
    for k in 0..count {
        let id = format!("doc_{k:03}");
        let doc = generate(derive_seed(seed, &id), cfg)?;
        imageio::save_png(&doc.image, hr_dir.join(format!("{id}.png")))?;
        index.insert(id, doc.boxes);
    }
    let path = root.join("boxes.json");
    let text = serde_json::to_string_pretty(&index)? + "\n";
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(index.into_keys().collect())
}

pub fn load_box_index(root: &Path) -> Result<BoxIndex> {
    let path = root.join("boxes.json");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}
