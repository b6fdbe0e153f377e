//! Image similarity (PSNR, SSIM, pluggable perceptual distance), detection
//! agreement (IoU, feature-space distances) and report rendering.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::data::SamplePair;
use crate::detector::{DetectionOutput, DetectorBackend};
use crate::error::{Error, Result};
use crate::loss::{out_features, task_l1};
use crate::models::SrModel;
use crate::types::{BBox, ImageTensor};

/// Returned by [`psnr`] when the images are numerically identical.
pub const PSNR_CAP_DB: f64 = 100.0;
const PSNR_MIN_MSE: f64 = 1e-10;
pub const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;
/// Placeholder for a metric that was not computed.
pub const MISSING_CELL: &str = "-";

fn check_same(a: &ImageTensor, b: &ImageTensor) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!("images differ in shape: {:?} vs {:?}", a.dim(), b.dim())));
    }
    Ok(())
}

/// Peak signal-to-noise ratio in dB over all channels, for `[0, 1]` images.
pub fn psnr(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    check_same(a, b)?;
    if !a.is_in_unit_range() || !b.is_in_unit_range() {
        return Err(Error::InvalidArgument("PSNR expects images clamped to [0, 1]".into()));
    }
    let n = a.data().len() as f64;
    let mse = a.data().iter().zip(b.data().iter()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n;
    Ok(if mse < PSNR_MIN_MSE { PSNR_CAP_DB } else { 10.0 * (1.0 / mse).log10() })
}

fn gaussian_window() -> Vec<f64> {
    let c = (SSIM_WINDOW / 2) as f64;
    let w: Vec<f64> = (0..SSIM_WINDOW).map(|k| (-((k as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian filtering, valid positions only.
fn filter_valid(x: &Array2<f64>, g: &[f64]) -> Array2<f64> {
    let (h, w) = x.dim();
    let k = g.len();
    let (ho, wo) = (h - k + 1, w - k + 1);
    let rows = Array2::from_shape_fn((h, wo), |(i, j)| (0..k).map(|t| g[t] * x[[i, j + t]]).sum::<f64>());
    Array2::from_shape_fn((ho, wo), |(i, j)| (0..k).map(|t| g[t] * rows[[i + t, j]]).sum::<f64>())
}

/// Mean structural similarity with an 11x11 Gaussian window (sigma 1.5),
/// computed on luminance for colour images. Can be negative.
pub fn ssim(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    check_same(a, b)?;
    let (h, w, _) = a.dim();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::TooSmall(format!("SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {h}x{w}")));
    }
    let plane = |img: &ImageTensor| img.to_grayscale().into_data().index_axis_move(Axis(2), 0);
    let (x, y) = (plane(a), plane(b));
    let g = gaussian_window();
    let mu_x = filter_valid(&x, &g);
    let mu_y = filter_valid(&y, &g);
    let xx = filter_valid(&(&x * &x), &g);
    let yy = filter_valid(&(&y * &y), &g);
    let xy = filter_valid(&(&x * &y), &g);
    let (c1, c2) = (SSIM_K1 * SSIM_K1, SSIM_K2 * SSIM_K2);
    let mut total = 0.0;
    for ((((mx, my), sxx), syy), sxy) in mu_x.iter().zip(&mu_y).zip(&xx).zip(&yy).zip(&xy) {
        let (vx, vy, cov) = (sxx - mx * mx, syy - my * my, sxy - mx * my);
        total += ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
    }
    Ok(total / mu_x.len() as f64)
}

/// A learned perceptual metric: a feature network and per-layer weights.
pub trait PerceptualPlugin: Send + Sync {
    fn name(&self) -> &str;
    /// Feature maps of every layer used by the metric.
    fn features(&self, img: &ImageTensor) -> Result<Vec<Array3<f64>>>;
    /// One weight per layer.
    fn layer_weights(&self) -> Vec<f64>;
}

/// Uses the image itself as a single feature layer with weight 1.
#[derive(Clone, Copy, Debug, Default)]
pub struct IdentityPlugin;

impl PerceptualPlugin for IdentityPlugin {
    fn name(&self) -> &str {
        "identity"
    }

    fn features(&self, img: &ImageTensor) -> Result<Vec<Array3<f64>>> {
        Ok(vec![img.data().clone()])
    }

    fn layer_weights(&self) -> Vec<f64> {
        vec![1.0]
    }
}

/// Weighted squared distance between channel-normalized feature maps,
/// averaged over positions and summed over layers.
pub fn perceptual_distance(a: &ImageTensor, b: &ImageTensor, plugin: Option<&dyn PerceptualPlugin>) -> Result<f64> {
    let plugin = plugin.ok_or_else(|| Error::MetricUnavailable("no perceptual metric plugin installed".into()))?;
    check_same(a, b)?;
    let (fa, fb) = (plugin.features(a)?, plugin.features(b)?);
    let weights = plugin.layer_weights();
    if fa.len() != weights.len() || fb.len() != weights.len() {
        return Err(Error::Shape(format!("plugin {} returned mismatched layer counts", plugin.name())));
    }
    let mut total = 0.0;
    for ((x, y), w) in fa.iter().zip(&fb).zip(&weights) {
        if x.dim() != y.dim() {
            return Err(Error::Shape(format!("plugin {} layer shapes differ", plugin.name())));
        }
        let (h, wd, _) = x.dim();
        let mut acc = 0.0;
        for i in 0..h {
            for j in 0..wd {
                let (px, py) = (x.slice(ndarray::s![i, j, ..]), y.slice(ndarray::s![i, j, ..]));
                let nx = px.dot(&px).sqrt() + 1e-10;
                let ny = py.dot(&py).sqrt() + 1e-10;
                acc += px.iter().zip(py.iter()).map(|(u, v)| (u / nx - v / ny).powi(2)).sum::<f64>();
            }
        }
        total += w * acc / (h * wd) as f64;
    }
    Ok(total)
}

/// How detections are compared.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IouMode {
    /// IoU of the rasterized union of each box set.
    #[default]
    Mask,
    /// Greedy one-to-one box matching; unmatched boxes count as zero.
    Matched,
}

impl IouMode {
    pub fn as_str(self) -> &'static str {
        match self {
            IouMode::Mask => "mask",
            IouMode::Matched => "matched",
        }
    }
}

impl std::str::FromStr for IouMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mask" => Ok(IouMode::Mask),
            "matched" => Ok(IouMode::Matched),
            _ => Err(Error::InvalidArgument(format!("unknown IoU mode '{s}' (expected mask or matched)"))),
        }
    }
}

/// Pixels whose centres lie inside any box.
pub fn rasterize(boxes: &[BBox], frame: (usize, usize)) -> Array2<bool> {
    let (h, w) = frame;
    let mut mask = Array2::from_elem((h, w), false);
    for b in boxes {
        // centre (j + 0.5) in [x0, x1)  <=>  j in [ceil(x0 - 0.5), ceil(x1 - 0.5))
        let span = |lo: f64, hi: f64, n: usize| {
            let a = (lo - 0.5).ceil().clamp(0.0, n as f64) as usize;
            let z = (hi - 0.5).ceil().clamp(0.0, n as f64) as usize;
            a..z.max(a)
        };
        for i in span(b.y0, b.y1, h) {
            for j in span(b.x0, b.x1, w) {
                mask[[i, j]] = true;
            }
        }
    }
    mask
}

/// Mask IoU between two detections on an `(H, W)` frame. Two empty sets
/// agree perfectly (1.0); exactly one empty set scores 0.0.
pub fn detection_iou(boxes_sr: &[BBox], boxes_hr: &[BBox], frame: (usize, usize)) -> Result<f64> {
    detection_iou_with(IouMode::Mask, boxes_sr, boxes_hr, frame)
}

pub fn detection_iou_with(mode: IouMode, boxes_sr: &[BBox], boxes_hr: &[BBox], frame: (usize, usize)) -> Result<f64> {
    if frame.0 == 0 || frame.1 == 0 {
        return Err(Error::InvalidArgument(format!("IoU frame {}x{} has zero area", frame.0, frame.1)));
    }
    match mode {
        IouMode::Mask => {
            let (a, b) = (rasterize(boxes_sr, frame), rasterize(boxes_hr, frame));
            let (mut inter, mut union, mut na, mut nb) = (0usize, 0usize, 0usize, 0usize);
            for (&x, &y) in a.iter().zip(b.iter()) {
                inter += (x && y) as usize;
                union += (x || y) as usize;
                na += x as usize;
                nb += y as usize;
            }
            Ok(match (na, nb) {
                (0, 0) => 1.0,
                (0, _) | (_, 0) => 0.0,
                _ => inter as f64 / union as f64,
            })
        }
        IouMode::Matched => {
            let clip = |v: &[BBox]| v.iter().filter_map(|b| b.clip(frame.0, frame.1)).collect::<Vec<_>>();
            let (a, b) = (clip(boxes_sr), clip(boxes_hr));
            if a.is_empty() && b.is_empty() {
                return Ok(1.0);
            }
            let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
            for (i, x) in a.iter().enumerate() {
                for (j, y) in b.iter().enumerate() {
                    let v = x.iou(y);
                    if v > 0.0 {
                        pairs.push((v, i, j));
                    }
                }
            }
            pairs.sort_by(|p, q| q.0.total_cmp(&p.0).then(p.1.cmp(&q.1)).then(p.2.cmp(&q.2)));
            let (mut used_a, mut used_b) = (vec![false; a.len()], vec![false; b.len()]);
            let mut total = 0.0;
            for (v, i, j) in pairs {
                if !used_a[i] && !used_b[j] {
                    used_a[i] = true;
                    used_b[j] = true;
                    total += v;
                }
            }
            Ok(total / a.len().max(b.len()) as f64)
        }
    }
}

/// Deep and out tap distances, in the same units as the training losses
/// multiplied by 100.
pub fn feature_distance_report(det_sr: &DetectionOutput, det_hr: &DetectionOutput) -> Result<(f64, f64)> {
    let deep = task_l1(&det_sr.deep_features, &det_hr.deep_features)?;
    let out = task_l1(
        &out_features(&det_sr.out_coords, &det_sr.out_scores)?,
        &out_features(&det_hr.out_coords, &det_hr.out_scores)?,
    )?;
    Ok((deep * 100.0, out * 100.0))
}

/// Metrics of one test sample, with the images and detections behind them.
#[derive(Clone, Debug)]
pub struct SampleEval {
    pub id: String,
    pub sr: ImageTensor,
    pub det_sr: DetectionOutput,
    pub det_hr: DetectionOutput,
    pub psnr_db: f64,
    pub ssim: f64,
    pub lpips: Option<f64>,
    pub iou: f64,
    pub ctpn_deep_x100: f64,
    pub ctpn_out_x100: f64,
}

#[derive(Clone, Copy, Default)]
pub struct EvalOptions<'a> {
    pub iou_mode: IouMode,
    pub plugin: Option<&'a dyn PerceptualPlugin>,
    /// Use the HR image as the SR output (pipeline check).
    pub identity_bypass: bool,
}

/// Super-resolves every sample and scores it against its HR reference.
pub fn evaluate_samples(
    model: &SrModel,
    samples: &[SamplePair],
    backend: &DetectorBackend,
    opts: EvalOptions<'_>,
) -> Result<Vec<SampleEval>> {
    use rayon::prelude::*;
    samples
        .par_iter()
        .map(|pair| {
            let sr = if opts.identity_bypass { pair.hr.clone() } else { model.super_resolve(&pair.lr)? };
            check_same(&sr, &pair.hr)?;
            let det_sr = backend.detect(&sr)?;
            let det_hr = backend.extract_targets(&pair.hr)?;
            let (deep, out) = feature_distance_report(&det_sr, &det_hr)?;
            let frame = (pair.hr.height(), pair.hr.width());
            let lpips = match opts.plugin {
                Some(p) => Some(perceptual_distance(&sr, &pair.hr, Some(p))?),
                None => None,
            };
            Ok(SampleEval {
                id: pair.id.clone(),
                psnr_db: psnr(&sr, &pair.hr)?,
                ssim: ssim(&sr, &pair.hr)?,
                lpips,
                iou: detection_iou_with(opts.iou_mode, &det_sr.boxes, &det_hr.boxes, frame)?,
                ctpn_deep_x100: deep,
                ctpn_out_x100: out,
                sr,
                det_sr,
                det_hr,
            })
        })
        .collect()
}

/// Averages per-sample metrics into one report row.
pub fn summarize(model: &str, losses: &str, samples: &[SampleEval]) -> Result<MetricRow> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("no samples to summarize".into()));
    }
    let n = samples.len() as f64;
    let mean = |f: fn(&SampleEval) -> f64| samples.iter().map(f).sum::<f64>() / n;
    let lpips = samples.iter().map(|s| s.lpips).collect::<Option<Vec<f64>>>().map(|v| v.iter().sum::<f64>() / n);
    Ok(MetricRow {
        model: model.to_string(),
        losses: losses.to_string(),
        psnr_db: mean(|s| s.psnr_db),
        ssim: mean(|s| s.ssim),
        lpips,
        iou: mean(|s| s.iou),
        ctpn_deep_x100: mean(|s| s.ctpn_deep_x100),
        ctpn_out_x100: mean(|s| s.ctpn_out_x100),
    })
}

/// One evaluated model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub model: String,
    /// Enabled loss components, `+`-joined.
    pub losses: String,
    pub psnr_db: f64,
    pub ssim: f64,
    pub lpips: Option<f64>,
    pub iou: f64,
    pub ctpn_deep_x100: f64,
    pub ctpn_out_x100: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub dataset: String,
    pub iou_mode: IouMode,
    pub rows: Vec<MetricRow>,
}

pub const REPORT_COLUMNS: [&str; 9] =
    ["model", "losses", "psnr_db", "ssim", "lpips", "iou", "ctpn_deep_x100", "ctpn_out_x100", "best_flags"];

#[derive(Clone, Copy, PartialEq, Eq)]
enum Better {
    Higher,
    Lower,
}

/// Metric columns in table order with the direction of "better".
const METRICS: [(&str, Better); 6] = [
    ("psnr_db", Better::Higher),
    ("ssim", Better::Higher),
    ("lpips", Better::Lower),
    ("iou", Better::Higher),
    ("ctpn_deep_x100", Better::Lower),
    ("ctpn_out_x100", Better::Lower),
];

fn metric_value(row: &MetricRow, col: usize) -> Option<f64> {
    match col {
        0 => Some(row.psnr_db),
        1 => Some(row.ssim),
        2 => row.lpips,
        3 => Some(row.iou),
        4 => Some(row.ctpn_deep_x100),
        5 => Some(row.ctpn_out_x100),
        _ => unreachable!(),
    }
}

/// For every row, the metric columns where it holds the best value (ties
/// all flagged).
pub fn best_flags(rows: &[MetricRow]) -> Vec<Vec<&'static str>> {
    let mut flags = vec![Vec::new(); rows.len()];
    for (col, &(name, better)) in METRICS.iter().enumerate() {
        let values: Vec<Option<f64>> = rows.iter().map(|r| metric_value(r, col)).collect();
        let best = values.iter().flatten().copied().reduce(|a, b| match better {
            Better::Higher => a.max(b),
            Better::Lower => a.min(b),
        });
        if let Some(best) = best {
            for (k, v) in values.iter().enumerate() {
                if *v == Some(best) {
                    flags[k].push(name);
                }
            }
        }
    }
    flags
}

fn cells(row: &MetricRow) -> [String; 6] {
    [
        format!("{:.4}", row.psnr_db),
        format!("{:.4}", row.ssim),
        row.lpips.map_or_else(|| MISSING_CELL.to_string(), |v| format!("{v:.4}")),
        format!("{:.4}", row.iou),
        format!("{:.4}", row.ctpn_deep_x100),
        format!("{:.4}", row.ctpn_out_x100),
    ]
}

/// CSV and plain-text renderings of a report.
pub fn render_report(report: &MetricReport) -> Result<(String, String)> {
    let flags = best_flags(&report.rows);
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(REPORT_COLUMNS)?;
    for (row, f) in report.rows.iter().zip(&flags) {
        let c = cells(row);
        let mut rec = vec![row.model.clone(), row.losses.clone()];
        rec.extend(c);
        rec.push(f.join(";"));
        w.write_record(&rec)?;
    }
    let csv = String::from_utf8(w.into_inner().map_err(|e| Error::InvalidArgument(e.to_string()))?)
        .expect("csv output is utf-8");

    let head = ["Model", "Losses", "PSNR", "SSIM", "LPIPS", "IoU", "CTPN-deep", "CTPN-out"];
    let mut table: Vec<[String; 8]> = vec![head.map(String::from)];
    for (row, f) in report.rows.iter().zip(&flags) {
        let c = cells(row);
        let mark = |k: usize, s: &String| if f.contains(&METRICS[k].0) { format!("*{s}") } else { s.clone() };
        table.push([
            row.model.clone(),
            row.losses.clone(),
            mark(0, &c[0]),
            mark(1, &c[1]),
            mark(2, &c[2]),
            mark(3, &c[3]),
            mark(4, &c[4]),
            mark(5, &c[5]),
        ]);
    }
    let widths: Vec<usize> = (0..8).map(|k| table.iter().map(|r| r[k].chars().count()).max().unwrap_or(0)).collect();
    let line = |r: &[String; 8]| {
        let pad = |k: usize| format!("{:>w$}", r[k], w = widths[k]);
        format!(
            "{:<w0$}  {:<w1$} | {}  {}  {} | {}  {}  {}",
            r[0],
            r[1],
            pad(2),
            pad(3),
            pad(4),
            pad(5),
            pad(6),
            pad(7),
            w0 = widths[0],
            w1 = widths[1]
        )
    };
    let mut txt = String::new();
    writeln!(txt, "dataset: {}  (iou: {}; CTPN distances x1e-2; * = best)", report.dataset, report.iou_mode.as_str())
        .expect("string write");
    let header = line(&table[0]);
    let image_start = widths[0] + 2 + widths[1] + 3;
    let detect_start = header.rfind(" | ").map_or(0, |p| p + 3);
    let mut groups = format!("{:image_start$}Image similarity metrics", "");
    if groups.chars().count() < detect_start {
        groups.push_str(&" ".repeat(detect_start - groups.chars().count()));
    } else {
        groups.push(' ');
    }
    groups.push_str("Text detection metrics");
    writeln!(txt, "{}", groups.trim_end()).expect("string write");
    writeln!(txt, "{header}").expect("string write");
    writeln!(txt, "{}", "-".repeat(header.chars().count())).expect("string write");
    for r in &table[1..] {
        writeln!(txt, "{}", line(r)).expect("string write");
    }
    Ok((csv, txt))
}

/// Writes `report/<dataset>.csv` and `report/<dataset>.txt` under `root`.
pub fn write_report(report: &MetricReport, root: &Path) -> Result<(PathBuf, PathBuf)> {
    let dir = root.join("report");
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let (csv, txt) = render_report(report)?;
    let csv_path = dir.join(format!("{}.csv", report.dataset));
    let txt_path = dir.join(format!("{}.txt", report.dataset));
    std::fs::write(&csv_path, csv).map_err(|e| Error::io(&csv_path, e))?;
    std::fs::write(&txt_path, txt).map_err(|e| Error::io(&txt_path, e))?;
    Ok((csv_path, txt_path))
}
