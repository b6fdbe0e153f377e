//! Training harness: regimes, optimizer settings, the epoch loop and the
//! experiment matrix. The detector is only ever borrowed immutably; task
//! gradients flow through it to the SR output.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::SamplePair;
use crate::detector::{DetectionOutput, DetectorBackend, TargetCache};
use crate::error::{Error, Result};
use crate::loss::{composite_loss, composite_loss_with_grad, DwaConfig, DwaState};
use crate::models::{build_model, load_checkpoint, save_checkpoint, SrModel, SrModelConfig};
use crate::nn::{clip_global_norm, Adam, Gradients, Graph};
use crate::seed::derive_seed;
use crate::types::LossComponentId;

pub const FROM_SCRATCH_EPOCHS: usize = 60;
pub const FINE_TUNE_EPOCHS: usize = 100;
pub const FROM_SCRATCH_LR: f64 = 1e-4;
pub const FINE_TUNE_LR: f64 = 1e-5;
pub const DEFAULT_BATCH_SIZE: usize = 16;
pub const DEFAULT_CLIP_NORM: f64 = 5.0;
pub const DEFAULT_VALIDATION_FRACTION: f64 = 0.1;

pub const METRICS_HEADER: [&str; 5] = ["epoch", "component", "raw_value", "weight", "weighted_value"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegimeKind {
    FromScratch,
    FineTune,
}

impl RegimeKind {
    pub fn default_epochs(self) -> usize {
        match self {
            RegimeKind::FromScratch => FROM_SCRATCH_EPOCHS,
            RegimeKind::FineTune => FINE_TUNE_EPOCHS,
        }
    }

    pub fn default_learning_rate(self) -> f64 {
        match self {
            RegimeKind::FromScratch => FROM_SCRATCH_LR,
            RegimeKind::FineTune => FINE_TUNE_LR,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRegime {
    pub kind: RegimeKind,
    pub epochs: usize,
    pub init_checkpoint: Option<PathBuf>,
}

impl TrainRegime {
    pub fn from_scratch() -> Self {
        TrainRegime { kind: RegimeKind::FromScratch, epochs: FROM_SCRATCH_EPOCHS, init_checkpoint: None }
    }

    pub fn fine_tune(init_checkpoint: impl Into<PathBuf>) -> Self {
        TrainRegime { kind: RegimeKind::FineTune, epochs: FINE_TUNE_EPOCHS, init_checkpoint: Some(init_checkpoint.into()) }
    }

    pub fn with_epochs(mut self, epochs: usize) -> Self {
        self.epochs = epochs;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("regime.epochs", "must be a positive integer"));
        }
        if self.kind == RegimeKind::FineTune && self.init_checkpoint.is_none() {
            return Err(Error::config("regime.init_checkpoint", "fine-tuning needs an initial checkpoint"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub clip_norm: Option<f64>,
    /// Share of the training samples held out for per-epoch validation.
    pub validation_fraction: f64,
    /// Write `checkpoints/epoch_NNN.ckpt` every this many epochs (0: never).
    pub checkpoint_every: usize,
}

impl OptimizerConfig {
    pub fn for_regime(kind: RegimeKind, seed: u64) -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Adam,
            learning_rate: kind.default_learning_rate(),
            batch_size: DEFAULT_BATCH_SIZE,
            seed,
            clip_norm: Some(DEFAULT_CLIP_NORM),
            validation_fraction: DEFAULT_VALIDATION_FRACTION,
            checkpoint_every: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("optimizer.learning_rate", "must be a positive number"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("optimizer.batch_size", "must be at least 1"));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::config("optimizer.clip_norm", "must be a positive number"));
            }
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::config("optimizer.validation_fraction", "must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Everything that determines a training run apart from the data and the
/// detector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: SrModelConfig,
    pub regime: TrainRegime,
    pub losses: BTreeSet<LossComponentId>,
    pub dwa: DwaConfig,
    pub optimizer: OptimizerConfig,
}

impl TrainConfig {
    pub fn new(model: SrModelConfig, losses: &[LossComponentId], seed: u64) -> Self {
        let regime = TrainRegime::from_scratch();
        TrainConfig {
            model,
            optimizer: OptimizerConfig::for_regime(regime.kind, seed),
            regime,
            losses: losses.iter().copied().collect(),
            dwa: DwaConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.regime.validate()?;
        self.optimizer.validate()?;
        // checks enabled_losses and the temperature
        DwaState::new(&self.losses, self.dwa.clone())?;
        Ok(())
    }

    pub fn uses_detector(&self) -> bool {
        self.losses.iter().any(|id| id.is_task())
    }

    /// `+`-joined loss ids, e.g. `L2_HR+TASK_DEEP`.
    pub fn losses_label(&self) -> String {
        losses_label(&self.losses)
    }
}

pub fn losses_label(losses: &BTreeSet<LossComponentId>) -> String {
    losses.iter().map(|id| id.as_str()).collect::<Vec<_>>().join("+")
}

/// One epoch of the run log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Weights in force during this epoch.
    pub weights: BTreeMap<LossComponentId, f64>,
    /// Per-sample means over the training samples.
    pub train: BTreeMap<LossComponentId, f64>,
    pub train_total: f64,
    pub validation: BTreeMap<LossComponentId, f64>,
    pub validation_total: Option<f64>,
    /// Mean pre-clipping gradient norm over the epoch's steps.
    pub grad_norm: f64,
    pub clipped_steps: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub losses: BTreeSet<LossComponentId>,
    pub detector_id: String,
    pub detector_hash: String,
    pub train_samples: usize,
    pub validation_samples: usize,
    pub epochs: Vec<EpochRecord>,
    /// SHA-256 of the final parameters.
    pub final_params: String,
}

impl RunLog {
    /// Rows of `metrics.csv`: one per enabled component per epoch.
    pub fn metrics_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(METRICS_HEADER)?;
        for e in &self.epochs {
            for (id, &v) in &e.train {
                let wt = e.weights[id];
                w.write_record([e.epoch.to_string(), id.to_string(), v.to_string(), wt.to_string(), (wt * v).to_string()])?;
            }
        }
        Ok(String::from_utf8(w.into_inner().map_err(|e| Error::InvalidArgument(e.to_string()))?).expect("utf-8"))
    }

    pub fn validation_csv(&self) -> String {
        let mut s = String::from("epoch,component,value\n");
        for e in &self.epochs {
            for (id, v) in &e.validation {
                writeln!(s, "{},{id},{v}", e.epoch).expect("string write");
            }
        }
        s
    }
}

/// Where a run writes its artifacts, plus the optional target cache.
#[derive(Default)]
pub struct RunOptions<'a> {
    /// `runs/<run-id>` directory; nothing is written when absent.
    pub run_dir: Option<PathBuf>,
    /// Text stored verbatim as `config.snapshot`.
    pub snapshot: Option<String>,
    pub cache: Option<&'a TargetCache>,
    pub progress: Option<&'a (dyn Fn(&EpochRecord) + Sync)>,
}

pub struct TrainOutcome {
    pub model: SrModel,
    pub log: RunLog,
}

/// Splits sample indices into (train, validation).
pub fn validation_split(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, "validation-split")));
    let n_val = ((n as f64) * fraction).round() as usize;
    let n_val = n_val.min(n.saturating_sub(1));
    let mut val = idx.split_off(n - n_val);
    idx.sort_unstable();
    val.sort_unstable();
    (idx, val)
}

fn targets_digest(targets: &[Option<DetectionOutput>]) -> String {
    let mut h = Sha256::new();
    for t in targets.iter().flatten() {
        for a in [&t.deep_features, &t.out_coords, &t.out_scores] {
            for v in a.iter() {
                h.update(v.to_le_bytes());
            }
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn initial_model(cfg: &TrainConfig) -> Result<SrModel> {
    match (&cfg.regime.kind, &cfg.regime.init_checkpoint) {
        (RegimeKind::FromScratch, _) => build_model(&cfg.model, cfg.optimizer.seed),
        (RegimeKind::FineTune, Some(path)) => {
            let model = load_checkpoint(path)?;
            if model.config != cfg.model {
                return Err(Error::config(
                    "regime.init_checkpoint",
                    format!(
                        "{} holds a {} x{} model with {} channels, which does not match the configured model",
                        path.display(),
                        model.config.arch,
                        model.config.scale,
                        model.config.channels
                    ),
                ));
            }
            Ok(model)
        }
        (RegimeKind::FineTune, None) => Err(Error::config("regime.init_checkpoint", "fine-tuning needs an initial checkpoint")),
    }
}

/// Loss values and parameter gradients for one sample.
fn sample_gradients(
    model: &SrModel,
    pair: &SamplePair,
    target: Option<&DetectionOutput>,
    backend: &DetectorBackend,
    state: &DwaState,
) -> Result<(BTreeMap<LossComponentId, f64>, Gradients)> {
    let mut g = Graph::new(&model.params);
    let x = g.input(pair.lr.data().clone());
    let y = model.forward(&mut g, x);
    let sr = g.value(y);
    let detections = match target {
        Some(t) => Some((backend.trace(sr)?, t)),
        None => None,
    };
    let loss = composite_loss_with_grad(sr, pair.hr.data(), pair.lr.data(), model.config.scale, detections, state)?;
    let mut grads = Gradients::zeros_like(&model.params);
    g.backward(vec![(y, loss.grad_sr)], Some(&mut grads));
    Ok((loss.breakdown.values, grads))
}

/// Mean component values of `model` over `samples`, without gradients.
pub fn evaluate_losses(
    model: &SrModel,
    samples: &[&SamplePair],
    targets: &[Option<&DetectionOutput>],
    backend: &DetectorBackend,
    state: &DwaState,
) -> Result<BTreeMap<LossComponentId, f64>> {
    let per: Vec<Result<BTreeMap<LossComponentId, f64>>> = samples
        .par_iter()
        .zip(targets.par_iter())
        .map(|(pair, target)| {
            let sr = model.infer(&pair.lr)?;
            let det = match target {
                Some(_) => {
                    let (d, c, s) = backend.taps(&sr)?;
                    Some(backend.assemble(d, c, s, sr.dim().0, sr.dim().1, false)?)
                }
                None => None,
            };
            let dets = det.as_ref().zip(*target);
            Ok(composite_loss(&sr, pair.hr.data(), pair.lr.data(), model.config.scale, dets, state)?.values)
        })
        .collect();
    let mut sums: BTreeMap<LossComponentId, f64> = BTreeMap::new();
    for values in per {
        for (id, v) in values? {
            *sums.entry(id).or_default() += v;
        }
    }
    let n = samples.len().max(1) as f64;
    Ok(sums.into_iter().map(|(id, v)| (id, v / n)).collect())
}

/// Trains one SR model with the detector frozen. Fully determined by
/// `cfg`, the samples and the detector.
pub fn train_run(
    cfg: &TrainConfig,
    samples: &[SamplePair],
    backend: &DetectorBackend,
    opts: &RunOptions<'_>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::InvalidArgument("no training samples".into()));
    }
    let mut model = initial_model(cfg)?;
    let scale = cfg.model.scale.get();
    for p in samples {
        if p.lr.channels() != cfg.model.channels {
            return Err(Error::Shape(format!(
                "sample {} has {} channels, the model expects {}",
                p.id,
                p.lr.channels(),
                cfg.model.channels
            )));
        }
        if p.hr.dim() != (p.lr.height() * scale, p.lr.width() * scale, p.lr.channels()) {
            return Err(Error::Shape(format!("sample {} is not a x{scale} pair", p.id)));
        }
    }

    let detector_hash = backend.param_hash();
    let targets: Vec<Option<DetectionOutput>> = if cfg.uses_detector() {
        samples
            .par_iter()
            .map(|p| match opts.cache {
                Some(cache) => cache.get_or_compute(backend, &p.id, &p.hr),
                None => backend.extract_targets(&p.hr),
            })
            .map(|r| r.map(Some))
            .collect::<Result<_>>()?
    } else {
        vec![None; samples.len()]
    };
    let target_hash = targets_digest(&targets);

    let (train_idx, val_idx) = validation_split(samples.len(), cfg.optimizer.validation_fraction, cfg.optimizer.seed);
    let val_samples: Vec<&SamplePair> = val_idx.iter().map(|&i| &samples[i]).collect();
    let val_targets: Vec<Option<&DetectionOutput>> = val_idx.iter().map(|&i| targets[i].as_ref()).collect();

    if let Some(dir) = &opts.run_dir {
        std::fs::create_dir_all(dir.join("checkpoints")).map_err(|e| Error::io(dir, e))?;
        if let Some(snapshot) = &opts.snapshot {
            let p = dir.join("config.snapshot");
            std::fs::write(&p, snapshot).map_err(|e| Error::io(&p, e))?;
        }
    }

    let mut state = DwaState::new(&cfg.losses, cfg.dwa.clone())?;
    let mut adam = Adam::new(&model.params, cfg.optimizer.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.optimizer.seed, "train-shuffle"));
    let mut log = RunLog {
        losses: cfg.losses.clone(),
        detector_id: backend.id(),
        detector_hash: detector_hash.clone(),
        train_samples: train_idx.len(),
        validation_samples: val_idx.len(),
        epochs: Vec::new(),
        final_params: String::new(),
    };

    for epoch in 1..=cfg.regime.epochs {
        let mut order = train_idx.clone();
        order.shuffle(&mut rng);
        let weights = state.weights.clone();
        let mut sums: BTreeMap<LossComponentId, f64> = BTreeMap::new();
        let (mut norm_sum, mut clipped, mut steps) = (0.0, 0usize, 0usize);
        for batch in order.chunks(cfg.optimizer.batch_size) {
            let results: Vec<Result<(BTreeMap<LossComponentId, f64>, Gradients)>> = batch
                .par_iter()
                .map(|&i| sample_gradients(&model, &samples[i], targets[i].as_ref(), backend, &state))
                .collect();
            let mut grads = Gradients::zeros_like(&model.params);
            for r in results {
                let (values, g) = r?;
                for (id, v) in values {
                    *sums.entry(id).or_default() += v;
                }
                grads.add_assign(&g);
            }
            grads.scale(1.0 / batch.len() as f64);
            if !grads.all_finite() {
                return Err(Error::NonFinite(format!("gradient at epoch {epoch}")));
            }
            let norm = match cfg.optimizer.clip_norm {
                Some(max) => clip_global_norm(&mut grads, max),
                None => grads.global_norm(),
            };
            if cfg.optimizer.clip_norm.is_some_and(|max| norm > max) {
                clipped += 1;
            }
            norm_sum += norm;
            steps += 1;
            adam.step(&mut model.params, &grads);
            if !model.params.all_finite() {
                return Err(Error::NonFinite(format!("SR parameters after a step at epoch {epoch}")));
            }
        }
        let n = train_idx.len() as f64;
        let means: BTreeMap<LossComponentId, f64> = sums.into_iter().map(|(id, v)| (id, v / n)).collect();
        let train_total = means.iter().map(|(id, v)| weights[id] * v).sum();

        let (validation, validation_total) = if val_samples.is_empty() {
            (BTreeMap::new(), None)
        } else {
            let v = evaluate_losses(&model, &val_samples, &val_targets, backend, &state)?;
            let total = v.iter().map(|(id, x)| weights[id] * x).sum();
            (v, Some(total))
        };

        if backend.param_hash() != detector_hash || targets_digest(&targets) != target_hash {
            return Err(Error::InvalidArgument(format!("detector or targets changed during epoch {epoch}")));
        }
        state.update(&means)?;

        let record = EpochRecord {
            epoch,
            weights,
            train: means,
            train_total,
            validation,
            validation_total,
            grad_norm: norm_sum / steps.max(1) as f64,
            clipped_steps: clipped,
        };
        if let Some(cb) = opts.progress {
            cb(&record);
        }
        log.epochs.push(record);

        if let Some(dir) = &opts.run_dir {
            if cfg.optimizer.checkpoint_every > 0 && epoch % cfg.optimizer.checkpoint_every == 0 {
                save_checkpoint(&model, dir.join("checkpoints").join(format!("epoch_{epoch:03}.ckpt")))?;
            }
            write_logs(dir, &log)?;
        }
    }

    log.final_params = model.params.digest();
    if let Some(dir) = &opts.run_dir {
        save_checkpoint(&model, dir.join("final.ckpt"))?;
        write_logs(dir, &log)?;
        let p = dir.join("run_log.json");
        std::fs::write(&p, serde_json::to_string_pretty(&log)?).map_err(|e| Error::io(&p, e))?;
    }
    Ok(TrainOutcome { model, log })
}

fn write_logs(dir: &Path, log: &RunLog) -> Result<()> {
    let p = dir.join("metrics.csv");
    std::fs::write(&p, log.metrics_csv()?).map_err(|e| Error::io(&p, e))?;
    let p = dir.join("validation.csv");
    std::fs::write(&p, log.validation_csv()).map_err(|e| Error::io(&p, e))
}

/// Gradient norm of every SR parameter on a probe batch.
pub fn probe_gradient_norms(
    model: &SrModel,
    batch: &[SamplePair],
    backend: &DetectorBackend,
    state: &DwaState,
) -> Result<BTreeMap<String, f64>> {
    let uses_detector = state.enabled.iter().any(|id| id.is_task());
    let mut grads = Gradients::zeros_like(&model.params);
    for pair in batch {
        let target = if uses_detector { Some(backend.extract_targets(&pair.hr)?) } else { None };
        grads.add_assign(&sample_gradients(model, pair, target.as_ref(), backend, state)?.1);
    }
    Ok(model
        .params
        .iter()
        .zip(grads.iter())
        .map(|((name, _), g)| (name.to_string(), g.iter().map(|v| v * v).sum::<f64>().sqrt()))
        .collect())
}

/// A matrix row: a name (its output directory), an optional row it starts
/// from, and the payload the runner consumes.
#[derive(Clone, Debug)]
pub struct MatrixRow<T> {
    pub name: String,
    pub depends_on: Option<String>,
    pub payload: T,
}

#[derive(Clone, Debug)]
pub struct MatrixOutcome<R> {
    pub name: String,
    pub result: std::result::Result<R, String>,
}

impl<R> MatrixOutcome<R> {
    pub fn failed(&self) -> bool {
        self.result.is_err()
    }
}

/// Runs every row, at most `jobs` at a time, in dependency order. A failing
/// (or panicking) row is recorded and the rest still run; rows depending on
/// a failed row fail without running. Outcomes keep the row order.
pub fn training_matrix<T, R, F>(rows: &[MatrixRow<T>], jobs: usize, run: F) -> Result<Vec<MatrixOutcome<R>>>
where
    T: Sync,
    R: Send,
    F: Fn(&MatrixRow<T>) -> Result<R> + Sync,
{
    let mut names = BTreeSet::new();
    for r in rows {
        if r.name.is_empty() || r.name.contains(['/', '\\']) || r.name == "." || r.name == ".." {
            return Err(Error::config("row.name", format!("`{}` cannot name an output directory", r.name)));
        }
        if !names.insert(r.name.as_str()) {
            return Err(Error::config("row.name", format!("duplicate row `{}`; output directories must be disjoint", r.name)));
        }
    }
    for r in rows {
        if let Some(d) = &r.depends_on {
            if !names.contains(d.as_str()) {
                return Err(Error::config("row.init_from", format!("row `{}` starts from unknown row `{d}`", r.name)));
            }
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::InvalidArgument(format!("cannot start {jobs} workers: {e}")))?;

    let mut results: Vec<Option<std::result::Result<R, String>>> = rows.iter().map(|_| None).collect();
    loop {
        let status = |name: &str, results: &[Option<std::result::Result<R, String>>]| {
            let k = rows.iter().position(|r| r.name == name).expect("validated");
            results[k].as_ref().map(|r| r.is_ok())
        };
        let mut ready = Vec::new();
        for (k, r) in rows.iter().enumerate() {
            if results[k].is_some() {
                continue;
            }
            match r.depends_on.as_deref().map(|d| status(d, &results)) {
                None | Some(Some(true)) => ready.push(k),
                Some(Some(false)) => {
                    results[k] = Some(Err(format!("depends on failed row `{}`", r.depends_on.as_deref().unwrap_or(""))))
                }
                Some(None) => {}
            }
        }
        if ready.is_empty() {
            break;
        }
        let wave: Vec<(usize, std::result::Result<R, String>)> = pool.install(|| {
            ready
                .par_iter()
                .map(|&k| {
                    let out = match catch_unwind(AssertUnwindSafe(|| run(&rows[k]))) {
                        Ok(Ok(v)) => Ok(v),
                        Ok(Err(e)) => Err(e.to_string()),
                        Err(p) => Err(panic_message(&p)),
                    };
                    (k, out)
                })
                .collect()
        });
        for (k, out) in wave {
            results[k] = Some(out);
        }
    }
    Ok(rows
        .iter()
        .zip(results)
        .map(|(r, res)| MatrixOutcome {
            name: r.name.clone(),
            result: res.unwrap_or_else(|| Err("dependency cycle".into())),
        })
        .collect())
}

fn panic_message(p: &Box<dyn std::any::Any + Send>) -> String {
    if let Some(s) = p.downcast_ref::<&str>() {
        format!("panicked: {s}")
    } else if let Some(s) = p.downcast_ref::<String>() {
        format!("panicked: {s}")
    } else {
        "panicked".into()
    }
}
