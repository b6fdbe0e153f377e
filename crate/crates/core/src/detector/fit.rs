//! Supervised fitting of the toy backend on synthetic pages. Used once to
//! produce the bundled fixture (`examples/train_toy_detector.rs`); training
//! runs only ever use detectors frozen.

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{BackendKind, DetectorBackend, DetectorConfig, FeatureSpec, DEFAULT_CONFIDENCE_THRESHOLD};
use crate::data::synth::{self, SynthConfig};
use crate::error::Result;
use crate::nn::{Adam, Gradients, Graph};
use crate::seed::derive_seed;
use crate::types::{BBox, ImageTensor};

/// Anchors with at least this vertical IoU against a line are positives.
const POSITIVE_IOU: f64 = 0.6;
/// Anchors below this vertical IoU against every line are negatives.
const NEGATIVE_IOU: f64 = 0.3;
/// Weight of box regression relative to classification.
const REGRESSION_WEIGHT: f64 = 3.0;
/// Fraction of a column's width a line must cover to count in that column.
const MIN_COLUMN_COVER: f64 = 0.5;

#[derive(Clone, Debug, PartialEq)]
pub struct FitConfig {
    pub pages: usize,
    pub page_size: usize,
    pub crop: usize,
    pub crops_per_epoch: usize,
    /// Share of crops taken from pages without text.
    pub blank_fraction: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            pages: 80,
            page_size: 128,
            crop: 64,
            crops_per_epoch: 480,
            blank_fraction: 0.2,
            epochs: 80,
            batch_size: 16,
            learning_rate: 1e-3,
            seed: 2024,
        }
    }
}

/// Per-anchor training labels: `cls` is 1 (text), 0 (background) or -1
/// (ignored); `reg` holds centre/log-height targets for positives.
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorLabels {
    pub cls: Array3<i8>,
    pub reg: Array3<f64>,
}

fn vertical_iou(a: (f64, f64), b: (f64, f64)) -> f64 {
    let inter = (a.1.min(b.1) - a.0.max(b.0)).max(0.0);
    inter / ((a.1 - a.0) + (b.1 - b.0) - inter)
}

/// Assigns anchors on an `(h, w)` tap grid to ground-truth line boxes.
pub fn anchor_labels(spec: &FeatureSpec, boxes: &[BBox], tap_hw: (usize, usize)) -> AnchorLabels {
    let (h, w) = tap_hw;
    let k = spec.n_anchors();
    let s = spec.stride as f64;
    let mut cls = Array3::<i8>::zeros((h, w, k));
    let mut reg = Array3::zeros((h, w, 2 * k));
    for j in 0..w {
        let (cx0, cx1) = (j as f64 * s, (j + 1) as f64 * s);
        let in_column: Vec<&BBox> =
            boxes.iter().filter(|b| b.x1.min(cx1) - b.x0.max(cx0) >= MIN_COLUMN_COVER * s).collect();
        let mut best: Vec<(f64, usize, usize)> = vec![(0.0, 0, 0); in_column.len()];
        for i in 0..h {
            let cy = (i as f64 + 0.5) * s;
            for (a, &ha) in spec.anchor_heights.iter().enumerate() {
                let span = (cy - ha / 2.0, cy + ha / 2.0);
                let mut top = (0.0, usize::MAX);
                for (n, b) in in_column.iter().enumerate() {
                    let iou = vertical_iou(span, (b.y0, b.y1));
                    if iou > top.0 {
                        top = (iou, n);
                    }
                    if iou > best[n].0 {
                        best[n] = (iou, i, a);
                    }
                }
                if top.0 >= POSITIVE_IOU {
                    set_positive(&mut cls, &mut reg, (i, j, a), cy, ha, in_column[top.1]);
                } else if top.0 >= NEGATIVE_IOU {
                    cls[[i, j, a]] = -1;
                }
            }
        }
        for (n, &(iou, i, a)) in best.iter().enumerate() {
            if iou > 0.0 {
                let cy = (i as f64 + 0.5) * s;
                set_positive(&mut cls, &mut reg, (i, j, a), cy, spec.anchor_heights[a], in_column[n]);
            }
        }
    }
    AnchorLabels { cls, reg }
}

fn set_positive(cls: &mut Array3<i8>, reg: &mut Array3<f64>, (i, j, a): (usize, usize, usize), cy: f64, ha: f64, b: &BBox) {
    cls[[i, j, a]] = 1;
    reg[[i, j, 2 * a]] = ((b.y0 + b.y1) / 2.0 - cy) / ha;
    reg[[i, j, 2 * a + 1]] = (b.height() / ha).ln();
}

struct Example {
    image: Array3<f64>,
    boxes: Vec<BBox>,
}

fn sample_crops(cfg: &FitConfig, pages: &[(ImageTensor, Vec<BBox>)], epoch: usize) -> Result<Vec<Example>> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &format!("crops-{epoch}")));
    let mut out = Vec::with_capacity(cfg.crops_per_epoch);
    for n in 0..cfg.crops_per_epoch {
        if rng.random_bool(cfg.blank_fraction) {
            let synth = SynthConfig { lines: Some(0), ..SynthConfig::new(cfg.crop.max(64), cfg.crop.max(64)) };
            let page = synth::generate(derive_seed(cfg.seed, &format!("blank-{epoch}-{n}")), &synth)?;
            let img = page.image.crop(0, 0, cfg.crop, cfg.crop)?;
            out.push(Example { image: img.into_data(), boxes: Vec::new() });
            continue;
        }
        let (page, boxes) = &pages[rng.random_range(0..pages.len())];
        let top = rng.random_range(0..=page.height() - cfg.crop);
        let left = rng.random_range(0..=page.width() - cfg.crop);
        let img = page.crop(top, left, cfg.crop, cfg.crop)?;
        let boxes = boxes
            .iter()
            .filter_map(|b| b.translate(-(left as f64), -(top as f64)).clip(cfg.crop, cfg.crop))
            .collect();
        out.push(Example { image: img.into_data(), boxes });
    }
    Ok(out)
}

/// Loss and parameter gradients for one crop: balanced binary cross-entropy
/// on both score channels plus smooth-L1 box regression on positives.
fn example_gradients(det: &DetectorBackend, ex: &Example) -> (f64, Gradients) {
    let params = det.params();
    let mut g = Graph::new(params);
    let x = g.input(ex.image.clone());
    let taps = det.forward(&mut g, x);
    let (h, w, _) = g.value(taps.deep).dim();
    let labels = anchor_labels(det.feature_spec(), &ex.boxes, (h, w));
    let k = det.feature_spec().n_anchors();
    let n_pos = labels.cls.iter().filter(|&&c| c == 1).count().max(1) as f64;
    let n_neg = labels.cls.iter().filter(|&&c| c == 0).count().max(1) as f64;

    let p = g.value(taps.scores);
    let z = g.value(taps.logits);
    let coords = g.value(taps.coords);
    let mut d_logits = Array3::zeros(p.dim());
    let mut d_coords = Array3::zeros(coords.dim());
    let mut loss = 0.0;
    let bce = |z: f64, y: f64| z.max(0.0) - z * y + (-z.abs()).exp().ln_1p();
    for i in 0..h {
        for j in 0..w {
            for a in 0..k {
                let label = labels.cls[[i, j, a]];
                if label < 0 {
                    continue;
                }
                let y = label as f64;
                let weight = if label == 1 { 1.0 / n_pos } else { 1.0 / n_neg };
                for (ch, target) in [(2 * a + 1, y), (2 * a, 1.0 - y)] {
                    loss += weight * bce(z[[i, j, ch]], target);
                    d_logits[[i, j, ch]] = weight * (p[[i, j, ch]] - target);
                }
                if label == 1 {
                    for ch in [2 * a, 2 * a + 1] {
                        let r = coords[[i, j, ch]] - labels.reg[[i, j, ch]];
                        let (l, d) = if r.abs() < 1.0 { (0.5 * r * r, r) } else { (r.abs() - 0.5, r.signum()) };
                        loss += REGRESSION_WEIGHT * l / n_pos;
                        d_coords[[i, j, ch]] = REGRESSION_WEIGHT * d / n_pos;
                    }
                }
            }
        }
    }
    let mut grads = Gradients::zeros_like(params);
    g.backward(vec![(taps.logits, d_logits), (taps.coords, d_coords)], Some(&mut grads));
    (loss, grads)
}

/// Trains a toy backend from scratch. `progress` receives each epoch's mean loss.
pub fn fit_toy(cfg: &FitConfig, mut progress: impl FnMut(usize, f64)) -> Result<DetectorBackend> {
    let det_cfg =
        DetectorConfig { kind: BackendKind::Toy, width_multiplier: 1.0, confidence_threshold: DEFAULT_CONFIDENCE_THRESHOLD };
    let mut det = DetectorBackend::init(&det_cfg, cfg.seed)?;
    let pages = (0..cfg.pages)
        .map(|n| synth::generate_synthetic_document(derive_seed(cfg.seed, &format!("page-{n}")), (cfg.page_size, cfg.page_size)))
        .collect::<Result<Vec<_>>>()?;
    let mut adam = Adam::new(det.params(), cfg.learning_rate);
    for epoch in 0..cfg.epochs {
        // cosine decay to zero over the run
        adam.learning_rate = cfg.learning_rate * 0.5 * (1.0 + (std::f64::consts::PI * epoch as f64 / cfg.epochs as f64).cos());
        let crops = sample_crops(cfg, &pages, epoch)?;
        let mut total = 0.0;
        for batch in crops.chunks(cfg.batch_size) {
            let results: Vec<(f64, Gradients)> = batch.par_iter().map(|ex| example_gradients(&det, ex)).collect();
            let mut grads = Gradients::zeros_like(det.params());
            for (loss, g) in &results {
                total += loss;
                grads.add_assign(g);
            }
            grads.scale(1.0 / batch.len() as f64);
            adam.step(&mut det.params, &grads);
        }
        progress(epoch, total / crops.len() as f64);
    }
    Ok(det)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> FeatureSpec {
        FeatureSpec { stride: 8, min_size: 16, deep_channels: 512, anchor_heights: vec![8.0, 16.0, 32.0] }
    }

    #[test]
    fn labels_mark_the_matching_anchor() {
        // one 16 px line centred on row 1 (centre 12) spanning columns 1..3
        let b = BBox::new(8.0, 4.0, 32.0, 20.0).unwrap();
        let l = anchor_labels(&spec(), &[b], (4, 5));
        for j in 1..4 {
            assert_eq!(l.cls[[1, j, 1]], 1);
            assert_eq!(l.reg[[1, j, 2]], 0.0);
            assert_eq!(l.reg[[1, j, 3]], 0.0);
        }
        // columns without the line are background everywhere
        for a in 0..3 {
            for i in 0..4 {
                assert_eq!(l.cls[[i, 0, a]], 0);
                assert_eq!(l.cls[[i, 4, a]], 0);
            }
        }
    }

    #[test]
    fn each_line_gets_a_positive_per_column() {
        // a 5 px line matches no anchor at 0.6 but still gets its best one
        let b = BBox::new(0.0, 30.0, 16.0, 35.0).unwrap();
        let l = anchor_labels(&spec(), &[b], (6, 2));
        for j in 0..2 {
            let pos = (0..6).flat_map(|i| (0..3).map(move |a| (i, a))).filter(|&(i, a)| l.cls[[i, j, a]] == 1).count();
            assert!(pos >= 1);
        }
    }

    #[test]
    fn no_lines_means_all_background() {
        let l = anchor_labels(&spec(), &[], (3, 3));
        assert!(l.cls.iter().all(|&c| c == 0));
    }
}
