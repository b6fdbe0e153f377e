//! Dataset ingestion: degradation, patching, splitting and the on-disk
//! dataset contract (`root/hr/*.png`, optional `root/lr/*.png`).

pub mod synth;

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageio;
use crate::resample::Resampler;
use crate::seed::derive_seed;
use crate::types::{ImageTensor, ScaleFactor};

/// A low-resolution input and its high-resolution reference.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplePair {
    pub id: String,
    pub lr: ImageTensor,
    pub hr: ImageTensor,
}

impl SamplePair {
    /// Pairs `hr` with its degraded counterpart.
    pub fn from_hr(id: impl Into<String>, hr: ImageTensor, scale: ScaleFactor) -> Result<Self> {
        let lr = degrade(&hr, scale)?;
        Ok(SamplePair { id: id.into(), lr, hr })
    }

    pub fn scale(&self) -> usize {
        self.hr.height() / self.lr.height()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub root: PathBuf,
    #[serde(default = "default_split")]
    pub split_fraction: f64,
    #[serde(default = "default_patch")]
    pub patch_size_hr: usize,
    #[serde(default = "default_patch")]
    pub stride_hr: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_split() -> f64 {
    0.7
}

fn default_patch() -> usize {
    128
}

impl DatasetSpec {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        DatasetSpec {
            root: root.into(),
            split_fraction: default_split(),
            patch_size_hr: default_patch(),
            stride_hr: default_patch(),
            seed: 0,
        }
    }

    pub fn validate(&self, scale: ScaleFactor) -> Result<()> {
        let s = scale.get();
        if !(self.split_fraction > 0.0 && self.split_fraction < 1.0) {
            return Err(Error::config("data.split_fraction", "must lie strictly between 0 and 1"));
        }
        if self.patch_size_hr == 0 || self.patch_size_hr % 2 != 0 {
            return Err(Error::config("data.patch_size_hr", "must be an even positive integer"));
        }
        if self.patch_size_hr % s != 0 {
            return Err(Error::config("data.patch_size_hr", format!("must be divisible by the scale factor {s}")));
        }
        if self.stride_hr == 0 || self.stride_hr % s != 0 {
            return Err(Error::config("data.stride_hr", format!("must be a positive multiple of the scale factor {s}")));
        }
        Ok(())
    }
}

/// An HR -> LR degradation model.
pub trait Degradation: Send + Sync {
    fn degrade(&self, hr: &ImageTensor, scale: ScaleFactor) -> Result<ImageTensor>;
}

/// Antialiased bicubic downsampling, no noise or blur.
#[derive(Clone, Copy, Debug, Default)]
pub struct Bicubic;

impl Degradation for Bicubic {
    fn degrade(&self, hr: &ImageTensor, scale: ScaleFactor) -> Result<ImageTensor> {
        let s = scale.get();
        let (h, w, _) = hr.dim();
        if h % s != 0 || w % s != 0 {
            return Err(Error::Shape(format!(
                "{h}x{w} image is not divisible by scale {s}; pad or crop first"
            )));
        }
        let out = Resampler::new((h, w), (h / s, w / s)).apply(hr.data());
        Ok(ImageTensor::new(out)?.clamp())
    }
}

/// Bicubic degradation by the given scale factor.
pub fn degrade(hr: &ImageTensor, scale: ScaleFactor) -> Result<ImageTensor> {
    Bicubic.degrade(hr, scale)
}

/// Number of windows along one axis for a sliding window of `patch` / `stride`.
pub fn patch_count(len: usize, patch: usize, stride: usize) -> usize {
    if patch > len {
        0
    } else {
        (len - patch) / stride + 1
    }
}

/// Tiles a pair into co-located HR/LR patches on a regular grid.
pub fn extract_patches(pair: &SamplePair, spec: &DatasetSpec) -> Result<Vec<SamplePair>> {
    Ok(tile(pair, spec)?.into_iter().map(|(p, _)| p).collect())
}

/// Patches with their HR `(top, left)` offsets, row-major.
fn tile(pair: &SamplePair, spec: &DatasetSpec) -> Result<Vec<(SamplePair, (usize, usize))>> {
    let s = pair.scale();
    let p = spec.patch_size_hr;
    let stride = spec.stride_hr;
    let (h, w, _) = pair.hr.dim();
    if p > h.min(w) {
        return Err(Error::Shape(format!("patch {p} is larger than the {h}x{w} image `{}`", pair.id)));
    }
    if p % s != 0 || stride % s != 0 || stride == 0 {
        return Err(Error::InvalidArgument(format!(
            "patch size {p} and stride {stride} must be multiples of the scale {s}"
        )));
    }
    let mut out = Vec::with_capacity(patch_count(h, p, stride) * patch_count(w, p, stride));
    for r in 0..patch_count(h, p, stride) {
        for c in 0..patch_count(w, p, stride) {
            let (top, left) = (r * stride, c * stride);
            let patch = SamplePair {
                id: format!("{}_y{top}_x{left}", pair.id),
                hr: pair.hr.crop(top, left, p, p)?,
                lr: pair.lr.crop(top / s, left / s, p / s, p / s)?,
            };
            out.push((patch, (top, left)));
        }
    }
    Ok(out)
}

/// Deterministically shuffles `ids` and splits off `round(fraction * n)` for training.
pub fn split_dataset(ids: &[String], fraction: f64, seed: u64) -> Result<(Vec<String>, Vec<String>)> {
    if ids.is_empty() {
        return Err(Error::InvalidArgument("cannot split an empty id list".into()));
    }
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::InvalidArgument(format!("split fraction {fraction} outside (0, 1)")));
    }
    let mut shuffled = ids.to_vec();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, "split")));
    let n_train = (fraction * ids.len() as f64).round() as usize;
    let test = shuffled.split_off(n_train);
    Ok((shuffled, test))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchRecord {
    pub id: String,
    pub source: String,
    pub top: usize,
    pub left: usize,
}

/// Audit record of a prepared dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub scale: usize,
    pub seed: u64,
    pub split_fraction: f64,
    pub patch_size_hr: usize,
    pub stride_hr: usize,
    pub train: Vec<String>,
    pub test: Vec<String>,
    pub train_patches: Vec<PatchRecord>,
    pub test_patches: Vec<PatchRecord>,
}

impl Manifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)? + "\n";
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Per-file failures collected while loading a dataset directory.
#[derive(Clone, Debug, Default)]
pub struct LoadReport {
    pub failures: Vec<(PathBuf, String)>,
}

/// A dataset split into document-level train/test sets and tiled into patches.
#[derive(Clone, Debug)]
pub struct PreparedDataset {
    pub manifest: Manifest,
    pub train: Vec<SamplePair>,
    pub test: Vec<SamplePair>,
}

/// Lists the `hr/*.png` stems under a dataset root, sorted.
pub fn list_ids(root: &Path) -> Result<Vec<String>> {
    let dir = root.join("hr");
    let entries = std::fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut ids = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(&dir, e))?.path();
        if path.extension().and_then(|e| e.to_str()).is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                ids.push(stem.to_string());
            }
        }
    }
    ids.sort();
    Ok(ids)
}

/// Loads a document: HR center-cropped to a multiple of the scale, plus the
/// LR from `root/lr/<id>.png` when that file exists.
pub fn load_document(
    root: &Path,
    id: &str,
    scale: ScaleFactor,
    channels: usize,
) -> Result<(ImageTensor, Option<ImageTensor>)> {
    let s = scale.get();
    let hr = imageio::load_png(root.join("hr").join(format!("{id}.png")))?;
    let hr = convert_channels(&hr.center_crop_to_multiple(s)?, channels)?;
    let lr_path = root.join("lr").join(format!("{id}.png"));
    if !lr_path.exists() {
        return Ok((hr, None));
    }
    let lr = convert_channels(&imageio::load_png(&lr_path)?, channels)?;
    if (lr.height(), lr.width()) != (hr.height() / s, hr.width() / s) {
        return Err(Error::Shape(format!(
            "{}: LR is {}x{}, expected {}x{}",
            lr_path.display(),
            lr.height(),
            lr.width(),
            hr.height() / s,
            hr.width() / s
        )));
    }
    Ok((hr, Some(lr)))
}

/// Loads a whole-document pair, degrading the HR when no LR file exists.
pub fn load_pair(root: &Path, id: &str, scale: ScaleFactor, channels: usize) -> Result<SamplePair> {
    match load_document(root, id, scale, channels)? {
        (hr, Some(lr)) => Ok(SamplePair { id: id.to_string(), lr, hr }),
        (hr, None) => SamplePair::from_hr(id, hr, scale),
    }
}

fn convert_channels(img: &ImageTensor, channels: usize) -> Result<ImageTensor> {
    match (img.channels(), channels) {
        (a, b) if a == b => Ok(img.clone()),
        (3, 1) => Ok(img.to_grayscale()),
        (1, 3) => {
            let g = img.data();
            ImageTensor::new(ndarray::Array3::from_shape_fn((g.dim().0, g.dim().1, 3), |(i, j, _)| g[[i, j, 0]]))
        }
        (_, c) => Err(Error::InvalidArgument(format!("unsupported channel count {c}"))),
    }
}

/// Tiles a document into patches. Without a stored LR each HR patch is
/// degraded on its own, so every emitted pair satisfies `lr == degrade(hr)`.
fn tile_document(
    root: &Path,
    id: &str,
    spec: &DatasetSpec,
    scale: ScaleFactor,
    channels: usize,
) -> Result<Vec<(SamplePair, (usize, usize))>> {
    match load_document(root, id, scale, channels)? {
        (hr, Some(lr)) => tile(&SamplePair { id: id.to_string(), lr, hr }, spec),
        (hr, None) => {
            let p = spec.patch_size_hr;
            let (h, w, _) = hr.dim();
            if p > h.min(w) {
                return Err(Error::Shape(format!("patch {p} is larger than the {h}x{w} image `{id}`")));
            }
            let mut out = Vec::new();
            for r in 0..patch_count(h, p, spec.stride_hr) {
                for c in 0..patch_count(w, p, spec.stride_hr) {
                    let (top, left) = (r * spec.stride_hr, c * spec.stride_hr);
                    let patch = hr.crop(top, left, p, p)?;
                    out.push((SamplePair::from_hr(format!("{id}_y{top}_x{left}"), patch, scale)?, (top, left)));
                }
            }
            Ok(out)
        }
    }
}

/// Splits, loads and tiles a dataset directory. Unreadable documents are
/// collected in the returned report and skipped.
pub fn prepare_dataset(
    spec: &DatasetSpec,
    scale: ScaleFactor,
    channels: usize,
) -> Result<(PreparedDataset, LoadReport)> {
    spec.validate(scale)?;
    let ids = list_ids(&spec.root)?;
    let (train_ids, test_ids) = split_dataset(&ids, spec.split_fraction, spec.seed)?;
    let mut report = LoadReport::default();
    let train = load_side(spec, scale, channels, &train_ids, &mut report);
    let test = load_side(spec, scale, channels, &test_ids, &mut report);
    let manifest = Manifest {
        scale: scale.get(),
        seed: spec.seed,
        split_fraction: spec.split_fraction,
        patch_size_hr: spec.patch_size_hr,
        stride_hr: spec.stride_hr,
        train: train.ids,
        test: test.ids,
        train_patches: train.records,
        test_patches: test.records,
    };
    Ok((PreparedDataset { manifest, train: train.patches, test: test.patches }, report))
}

struct LoadedSide {
    ids: Vec<String>,
    patches: Vec<SamplePair>,
    records: Vec<PatchRecord>,
}

fn load_side(
    spec: &DatasetSpec,
    scale: ScaleFactor,
    channels: usize,
    ids: &[String],
    report: &mut LoadReport,
) -> LoadedSide {
    // Documents load in parallel; collecting keeps the id order.
    let results: Vec<Result<Vec<(SamplePair, (usize, usize))>>> = ids
        .par_iter()
        .map(|id| {
            tile_document(&spec.root, id, spec, scale, channels)
        })
        .collect();
    let mut side = LoadedSide { ids: Vec::new(), patches: Vec::new(), records: Vec::new() };
    for (id, result) in ids.iter().zip(results) {
        match result {
            Ok(patches) => {
                for (patch, (top, left)) in patches {
                    side.records.push(PatchRecord { id: patch.id.clone(), source: id.clone(), top, left });
                    side.patches.push(patch);
                }
                side.ids.push(id.clone());
            }
            Err(e) => report.failures.push((spec.root.join("hr").join(format!("{id}.png")), e.to_string())),
        }
    }
    side
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use proptest::prelude::*;
    use std::collections::BTreeSet;

    fn x4() -> ScaleFactor {
        ScaleFactor::new(4).unwrap()
    }

    /// Keys cubic convolution kernel, written out piecewise in expanded form.
    fn keys(t: f64) -> f64 {
        let a = -0.5;
        let t = t.abs();
        if t <= 1.0 {
            (a + 2.0) * t.powi(3) - (a + 3.0) * t.powi(2) + 1.0
        } else if t < 2.0 {
            a * t.powi(3) - 5.0 * a * t.powi(2) + 8.0 * a * t - 4.0 * a
        } else {
            0.0
        }
    }

    /// Direct 2-D evaluation: every output pixel sums the kernel over all
    /// input pixels, normalizing by the total in-frame weight.
    fn reference_downsample(img: &Array3<f64>, s: usize) -> Array3<f64> {
        let (h, w, c) = img.dim();
        Array3::from_shape_fn((h / s, w / s, c), |(oi, oj, ch)| {
            let cy = (oi as f64 + 0.5) * s as f64 - 0.5;
            let cx = (oj as f64 + 0.5) * s as f64 - 0.5;
            let (mut acc, mut norm) = (0.0, 0.0);
            for i in 0..h {
                for j in 0..w {
                    let k = keys((i as f64 - cy) / s as f64) * keys((j as f64 - cx) / s as f64);
                    acc += k * img[[i, j, ch]];
                    norm += k;
                }
            }
            acc / norm
        })
    }

    #[test]
    fn degrade_constant_stays_constant() {
        let hr = ImageTensor::filled(64, 64, 3, 0.5).unwrap();
        let lr = degrade(&hr, x4()).unwrap();
        assert_eq!(lr.dim(), (16, 16, 3));
        assert!(lr.data().iter().all(|v| (v - 0.5).abs() < 1e-12));
    }

    #[test]
    fn degrade_matches_reference_resampler() {
        let ramp = Array3::from_shape_fn((64, 64, 1), |(_, j, _)| j as f64 / 63.0);
        let lr = degrade(&ImageTensor::new(ramp.clone()).unwrap(), x4()).unwrap();
        let reference = reference_downsample(&ramp, 4);
        let max_diff = (lr.data() - &reference.mapv(|v| v.clamp(0.0, 1.0))).mapv(f64::abs).fold(0.0, |a: f64, &b| a.max(b));
        assert!(max_diff < 1e-5, "max diff {max_diff}");

        let doc = synth::generate(3, &synth::SynthConfig::new(64, 96)).unwrap();
        let lr = degrade(&doc.image, x4()).unwrap();
        let reference = reference_downsample(doc.image.data(), 4).mapv(|v| v.clamp(0.0, 1.0));
        let max_diff = (lr.data() - &reference).mapv(f64::abs).fold(0.0, |a: f64, &b| a.max(b));
        assert!(max_diff < 1e-5, "max diff {max_diff}");
    }

    #[test]
    fn degrade_rejects_indivisible_sizes() {
        let hr = ImageTensor::filled(65, 64, 1, 0.5).unwrap();
        let err = degrade(&hr, x4()).unwrap_err();
        assert!(err.to_string().contains("pad or crop first"));
    }

    fn pair(h: usize, w: usize) -> SamplePair {
        let hr = ImageTensor::new(Array3::from_shape_fn((h, w, 1), |(i, j, _)| ((i * 3 + j) % 17) as f64 / 16.0)).unwrap();
        SamplePair::from_hr("p", hr, x4()).unwrap()
    }

    fn spec(p: usize, stride: usize) -> DatasetSpec {
        DatasetSpec { patch_size_hr: p, stride_hr: stride, ..DatasetSpec::new("unused") }
    }

    /// Slides a window one pixel at a time and keeps the grid-aligned positions.
    fn sliding_window_count(h: usize, w: usize, p: usize, stride: usize) -> usize {
        let mut n = 0;
        for top in 0..h {
            for left in 0..w {
                if top % stride == 0 && left % stride == 0 && top + p <= h && left + p <= w {
                    n += 1;
                }
            }
        }
        n
    }

    #[test]
    fn patch_counts() {
        let p = pair(128, 128);
        let tiles = extract_patches(&p, &spec(64, 64)).unwrap();
        assert_eq!(tiles.len(), 4);
        let tiles = extract_patches(&p, &spec(64, 32)).unwrap();
        assert_eq!(tiles.len(), 9);
        assert_eq!(tiles.len(), sliding_window_count(128, 128, 64, 32));
        for t in &tiles {
            assert_eq!(t.lr.dim(), (16, 16, 1));
            assert_eq!(t.hr.dim(), (64, 64, 1));
        }
        // co-location: second tile starts 32 HR pixels right, 8 LR pixels right
        assert_eq!(tiles[1].hr.data()[[0, 0, 0]], p.hr.data()[[0, 32, 0]]);
        assert_eq!(tiles[1].lr.data()[[0, 0, 0]], p.lr.data()[[0, 8, 0]]);
    }

    #[test]
    fn oversized_patch_is_an_error() {
        assert!(extract_patches(&pair(64, 64), &spec(128, 128)).is_err());
    }

    proptest! {
        #[test]
        fn patch_count_formula(hq in 2usize..12, wq in 2usize..12, pq in 1usize..4, sq in 1usize..4) {
            let (h, w, p, stride) = (hq * 8, wq * 8, pq * 8, sq * 4);
            prop_assume!(p <= h.min(w));
            let tiles = extract_patches(&pair(h, w), &spec(p, stride)).unwrap();
            prop_assert_eq!(tiles.len(), patch_count(h, p, stride) * patch_count(w, p, stride));
            prop_assert_eq!(tiles.len(), sliding_window_count(h, w, p, stride));
        }

        #[test]
        fn split_partitions_ids(n in 1usize..60, frac in 0.05f64..0.95, seed in any::<u64>()) {
            let ids: Vec<String> = (0..n).map(|k| format!("id{k}")).collect();
            let (train, test) = split_dataset(&ids, frac, seed).unwrap();
            let a: BTreeSet<_> = train.iter().collect();
            let b: BTreeSet<_> = test.iter().collect();
            prop_assert!(a.is_disjoint(&b));
            prop_assert_eq!(a.union(&b).count(), n);
            prop_assert_eq!(train.len(), (frac * n as f64).round() as usize);
        }
    }

    #[test]
    fn split_sizes_and_determinism() {
        let ids: Vec<String> = (0..10).map(|k| format!("doc{k}")).collect();
        let (train, test) = split_dataset(&ids, 0.7, 3).unwrap();
        assert_eq!((train.len(), test.len()), (7, 3));
        assert_eq!(split_dataset(&ids, 0.7, 3).unwrap(), (train, test));
        assert!(split_dataset(&[], 0.7, 3).is_err());
    }

    #[test]
    fn split_seeds_give_different_permutations() {
        let ids: Vec<String> = (0..100).map(|k| format!("doc{k}")).collect();
        let (t1, s1) = split_dataset(&ids, 0.7, 1).unwrap();
        let (t2, s2) = split_dataset(&ids, 0.7, 2).unwrap();
        assert_eq!((t1.len(), s1.len()), (t2.len(), s2.len()));
        assert_ne!(t1, t2);
        let all: BTreeSet<&String> = ids.iter().collect();
        for (t, s) in [(&t1, &s1), (&t2, &s2)] {
            let union: BTreeSet<&String> = t.iter().chain(s.iter()).collect();
            assert_eq!(union, all);
            assert!(t.iter().all(|id| !s.contains(id)));
        }
    }

    #[test]
    fn prepared_pairs_are_exact_degradations() {
        let dir = tempfile::tempdir().unwrap();
        synth::write_synthetic_dataset(dir.path(), 4, &synth::SynthConfig::new(128, 128), 9).unwrap();
        let ds = DatasetSpec { patch_size_hr: 64, stride_hr: 64, ..DatasetSpec::new(dir.path()) };
        let (prepared, report) = prepare_dataset(&ds, x4(), 1).unwrap();
        assert!(report.failures.is_empty());
        assert_eq!(prepared.manifest.train.len(), 3);
        assert_eq!(prepared.train.len(), 12);
        assert_eq!(prepared.test.len(), 4);
        for p in prepared.train.iter().chain(&prepared.test) {
            assert_eq!(degrade(&p.hr, x4()).unwrap(), p.lr);
        }
        assert_eq!(prepared.manifest.train_patches[1].left, 64);
    }

    #[test]
    fn unreadable_documents_are_collected() {
        let dir = tempfile::tempdir().unwrap();
        synth::write_synthetic_dataset(dir.path(), 3, &synth::SynthConfig::new(64, 64), 2).unwrap();
        std::fs::write(dir.path().join("hr/broken.png"), b"garbage").unwrap();
        let ds = DatasetSpec { patch_size_hr: 64, stride_hr: 64, ..DatasetSpec::new(dir.path()) };
        let (prepared, report) = prepare_dataset(&ds, x4(), 1).unwrap();
        assert_eq!(report.failures.len(), 1);
        assert!(report.failures[0].0.ends_with("broken.png"));
        assert_eq!(prepared.train.len() + prepared.test.len(), 3);
    }
}
