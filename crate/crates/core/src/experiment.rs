//! Experiment files: one TOML document describing a run, and matrix files
//! describing many. Relative paths resolve against the file's directory;
//! [`ExperimentConfig::resolve`] fills every default so the snapshot written
//! to the run directory reproduces the run on its own.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::synth::{write_synthetic_dataset, SynthConfig};
use crate::data::{list_ids, prepare_dataset, DatasetSpec, PreparedDataset};
use crate::detector::{load_backend, BackendKind, DetectorBackend, TargetCache, DEFAULT_CONFIDENCE_THRESHOLD};
use crate::error::{Error, Result};
use crate::loss::DwaConfig;
use crate::models::{Architecture, SrModelConfig};
use crate::seed::derive_seed;
use crate::train::{
    train_run, EpochRecord, OptimizerConfig, OptimizerKind, RegimeKind, RunLog, RunOptions, TrainConfig, TrainRegime,
    DEFAULT_BATCH_SIZE, DEFAULT_CLIP_NORM, DEFAULT_VALIDATION_FRACTION,
};
use crate::types::LossComponentId;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegimeSection {
    #[serde(default = "from_scratch")]
    pub kind: RegimeKind,
    pub epochs: Option<usize>,
    pub init_checkpoint: Option<PathBuf>,
}

fn from_scratch() -> RegimeKind {
    RegimeKind::FromScratch
}

impl Default for RegimeSection {
    fn default() -> Self {
        RegimeSection { kind: RegimeKind::FromScratch, epochs: None, init_checkpoint: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerSection {
    #[serde(default)]
    pub kind: OptimizerKind,
    /// Defaults by regime.
    pub learning_rate: Option<f64>,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "yes")]
    pub clip: bool,
    #[serde(default = "default_clip_norm")]
    pub clip_norm: f64,
    #[serde(default = "default_validation")]
    pub validation_fraction: f64,
    #[serde(default = "one")]
    pub checkpoint_every: usize,
}

fn default_batch() -> usize {
    DEFAULT_BATCH_SIZE
}
fn yes() -> bool {
    true
}
fn default_clip_norm() -> f64 {
    DEFAULT_CLIP_NORM
}
fn default_validation() -> f64 {
    DEFAULT_VALIDATION_FRACTION
}
fn one() -> usize {
    1
}

impl Default for OptimizerSection {
    fn default() -> Self {
        OptimizerSection {
            kind: OptimizerKind::Adam,
            learning_rate: None,
            batch_size: DEFAULT_BATCH_SIZE,
            clip: true,
            clip_norm: DEFAULT_CLIP_NORM,
            validation_fraction: DEFAULT_VALIDATION_FRACTION,
            checkpoint_every: 1,
        }
    }
}

/// Pages to render into `data.root` when it holds no images yet.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSection {
    pub count: usize,
    #[serde(default = "default_page")]
    pub height: usize,
    #[serde(default = "default_page")]
    pub width: usize,
    pub lines: Option<usize>,
}

fn default_page() -> usize {
    256
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub root: PathBuf,
    #[serde(default = "default_split")]
    pub split_fraction: f64,
    #[serde(default = "default_patch")]
    pub patch_size_hr: usize,
    #[serde(default = "default_patch")]
    pub stride_hr: usize,
    pub synthetic: Option<SyntheticSection>,
}

fn default_split() -> f64 {
    0.7
}
fn default_patch() -> usize {
    128
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendSection {
    #[serde(default = "toy")]
    pub kind: BackendKind,
    pub weights: Option<PathBuf>,
    #[serde(default = "default_threshold")]
    pub confidence_threshold: f64,
}

fn toy() -> BackendKind {
    BackendKind::Toy
}
fn default_threshold() -> f64 {
    DEFAULT_CONFIDENCE_THRESHOLD
}

impl Default for BackendSection {
    fn default() -> Self {
        BackendSection { kind: BackendKind::Toy, weights: None, confidence_threshold: DEFAULT_CONFIDENCE_THRESHOLD }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Run id; the run directory is `<output_dir>/runs/<name>`.
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    pub enabled_losses: BTreeSet<LossComponentId>,
    pub output_dir: PathBuf,
    pub model: SrModelConfig,
    #[serde(default)]
    pub regime: RegimeSection,
    #[serde(default)]
    pub dwa: DwaConfig,
    pub data: DataSection,
    #[serde(default)]
    pub optimizer: OptimizerSection,
    #[serde(default)]
    pub backend: BackendSection,
}

fn parse_toml<T: serde::de::DeserializeOwned>(text: &str, origin: &Path) -> Result<T> {
    toml::from_str(text).map_err(|e| {
        let at = e
            .span()
            .map(|s| {
                let line = text[..s.start.min(text.len())].matches('\n').count() + 1;
                format!(" (line {line})")
            })
            .unwrap_or_default();
        Error::Decode { path: origin.to_path_buf(), message: format!("{}{at}", e.message()) }
    })
}

fn absolutize(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str, origin: &Path) -> Result<Self> {
        parse_toml(text, origin)
    }

    /// Reads a file; relative paths in it are taken relative to its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml_str(&text, path)?;
        cfg.absolutize(path.parent().unwrap_or(Path::new(".")));
        Ok(cfg)
    }

    pub fn absolutize(&mut self, base: &Path) {
        absolutize(base, &mut self.output_dir);
        absolutize(base, &mut self.data.root);
        if let Some(p) = &mut self.regime.init_checkpoint {
            absolutize(base, p);
        }
        if let Some(p) = &mut self.backend.weights {
            absolutize(base, p);
        }
    }

    /// Fills regime-dependent defaults and validates every field.
    pub fn resolve(mut self) -> Result<Self> {
        if self.name.is_empty() || self.name.contains(['/', '\\']) || self.name == "." || self.name == ".." {
            return Err(Error::config("name", "must be a plain directory name"));
        }
        if self.enabled_losses.is_empty() {
            return Err(Error::config("enabled_losses", "at least one loss component must be enabled"));
        }
        self.regime.epochs.get_or_insert(self.regime.kind.default_epochs());
        self.optimizer.learning_rate.get_or_insert(self.regime.kind.default_learning_rate());
        if !(0.0..=1.0).contains(&self.backend.confidence_threshold) {
            return Err(Error::config("backend.confidence_threshold", "must lie in [0, 1]"));
        }
        if let Some(s) = &self.data.synthetic {
            if s.count == 0 {
                return Err(Error::config("data.synthetic.count", "must be positive"));
            }
            if s.height < 64 || s.width < 64 {
                return Err(Error::config("data.synthetic", "pages must be at least 64x64"));
            }
        }
        self.dataset_spec().validate(self.model.scale)?;
        self.train_config().validate()?;
        Ok(self)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::InvalidArgument(format!("cannot serialize config: {e}")))
    }

    pub fn dataset_spec(&self) -> DatasetSpec {
        DatasetSpec {
            root: self.data.root.clone(),
            split_fraction: self.data.split_fraction,
            patch_size_hr: self.data.patch_size_hr,
            stride_hr: self.data.stride_hr,
            seed: derive_seed(self.seed, "data"),
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let mut regime = TrainRegime {
            kind: self.regime.kind,
            epochs: self.regime.kind.default_epochs(),
            init_checkpoint: self.regime.init_checkpoint.clone(),
        };
        if let Some(e) = self.regime.epochs {
            regime.epochs = e;
        }
        let o = &self.optimizer;
        TrainConfig {
            model: self.model.clone(),
            losses: self.enabled_losses.clone(),
            dwa: self.dwa.clone(),
            optimizer: OptimizerConfig {
                kind: o.kind,
                learning_rate: o.learning_rate.unwrap_or(regime.kind.default_learning_rate()),
                batch_size: o.batch_size,
                seed: derive_seed(self.seed, "train"),
                clip_norm: o.clip.then_some(o.clip_norm),
                validation_fraction: o.validation_fraction,
                checkpoint_every: o.checkpoint_every,
            },
            regime,
        }
    }

    pub fn run_dir(&self) -> PathBuf {
        self.output_dir.join("runs").join(&self.name)
    }

    pub fn load_backend(&self) -> Result<DetectorBackend> {
        let mut backend = load_backend(self.backend.kind, self.backend.weights.as_deref())?;
        backend.set_confidence_threshold(self.backend.confidence_threshold)?;
        Ok(backend)
    }

    /// Renders the synthetic pages when configured and the root has none.
    pub fn ensure_dataset(&self) -> Result<()> {
        let Some(s) = &self.data.synthetic else { return Ok(()) };
        let has_pages = self.data.root.join("hr").is_dir() && !list_ids(&self.data.root)?.is_empty();
        if !has_pages {
            let cfg = SynthConfig { height: s.height, width: s.width, channels: self.model.channels, lines: s.lines };
            write_synthetic_dataset(&self.data.root, s.count, &cfg, derive_seed(self.seed, "synthetic"))?;
        }
        Ok(())
    }

    /// Loads, splits and tiles the dataset; any unreadable document fails.
    pub fn load_dataset(&self) -> Result<PreparedDataset> {
        self.ensure_dataset()?;
        let (prepared, report) = prepare_dataset(&self.dataset_spec(), self.model.scale, self.model.channels)?;
        if let Some((path, msg)) = report.failures.first() {
            return Err(Error::Decode {
                path: path.clone(),
                message: format!("{msg} ({} unreadable document(s) in total)", report.failures.len()),
            });
        }
        Ok(prepared)
    }
}

/// Trains one resolved experiment into its run directory.
pub fn run_experiment(cfg: &ExperimentConfig, progress: Option<&(dyn Fn(&EpochRecord) + Sync)>) -> Result<RunLog> {
    let backend = cfg.load_backend()?;
    let data = cfg.load_dataset()?;
    let cache = TargetCache::new(&cfg.output_dir, &backend);
    let opts = RunOptions { run_dir: Some(cfg.run_dir()), snapshot: Some(cfg.to_toml()?), cache: Some(&cache), progress };
    Ok(train_run(&cfg.train_config(), &data.train, &backend, &opts)?.log)
}

/// A config file holding either one experiment or a matrix.
#[derive(Clone, Debug, PartialEq)]
pub enum ConfigFile {
    Single(ExperimentConfig),
    Matrix(MatrixConfig),
}

impl ConfigFile {
    /// Matrix files are recognized by their `[base]` table.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let is_matrix = text.parse::<toml::Table>().map(|t| t.contains_key("base")).unwrap_or(false);
        if is_matrix {
            MatrixConfig::load(path).map(ConfigFile::Matrix)
        } else {
            ExperimentConfig::load(path).map(ConfigFile::Single)
        }
    }
}

/// Per-row overrides in a matrix file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RowSection {
    pub name: String,
    pub arch: Option<Architecture>,
    pub enabled_losses: Option<BTreeSet<LossComponentId>>,
    pub regime: Option<RegimeKind>,
    pub epochs: Option<usize>,
    pub learning_rate: Option<f64>,
    pub init_checkpoint: Option<PathBuf>,
    /// Fine-tune from another row's `final.ckpt`; that row runs first.
    pub init_from: Option<String>,
}

/// A base experiment and the rows derived from it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatrixConfig {
    pub base: ExperimentConfig,
    #[serde(default, rename = "row")]
    pub rows: Vec<RowSection>,
}

/// One expanded matrix row.
#[derive(Clone, Debug, PartialEq)]
pub struct MatrixEntry {
    pub config: ExperimentConfig,
    pub depends_on: Option<String>,
}

impl MatrixConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m: MatrixConfig = parse_toml(&text, path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        m.base.absolutize(base);
        for r in &mut m.rows {
            if let Some(p) = &mut r.init_checkpoint {
                absolutize(base, p);
            }
        }
        Ok(m)
    }

    /// Applies each row's overrides to the base. Invalid rows are reported
    /// per row rather than failing the whole matrix.
    pub fn expand(&self) -> Vec<(String, Result<MatrixEntry>)> {
        self.rows.iter().map(|r| (r.name.clone(), self.expand_row(r))).collect()
    }

    fn expand_row(&self, r: &RowSection) -> Result<MatrixEntry> {
        let mut cfg = self.base.clone();
        cfg.name = r.name.clone();
        if let Some(a) = r.arch {
            cfg.model.arch = a;
        }
        if let Some(l) = &r.enabled_losses {
            cfg.enabled_losses = l.clone();
        }
        if let Some(k) = r.regime {
            if k != cfg.regime.kind {
                cfg.regime = RegimeSection { kind: k, ..RegimeSection::default() };
                cfg.optimizer.learning_rate = None;
            }
        }
        if r.epochs.is_some() {
            cfg.regime.epochs = r.epochs;
        }
        if r.learning_rate.is_some() {
            cfg.optimizer.learning_rate = r.learning_rate;
        }
        if r.init_checkpoint.is_some() && r.init_from.is_some() {
            return Err(Error::config("row.init_from", "give either init_checkpoint or init_from, not both"));
        }
        if let Some(p) = &r.init_checkpoint {
            cfg.regime.init_checkpoint = Some(p.clone());
        }
        if let Some(src) = &r.init_from {
            cfg.regime.init_checkpoint = Some(self.base.output_dir.join("runs").join(src).join("final.ckpt"));
        }
        let depends_on = r.init_from.clone();
        Ok(MatrixEntry { config: cfg.resolve()?, depends_on })
    }
}
