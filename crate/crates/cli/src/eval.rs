use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use tasksr::data::{PreparedDataset, SamplePair};
use tasksr::eval::{evaluate_samples, summarize, write_report, EvalOptions, IouMode, MetricReport, SampleEval};
use tasksr::experiment::{ConfigFile, ExperimentConfig};
use tasksr::models::{build_model, load_checkpoint, SrModel};
use tasksr::resample::resize;
use tasksr::train::losses_label;
use tasksr::ImageTensor;

use crate::draw::Canvas;
use crate::{CliError, Common, Outcome};

const PANEL_GAP: usize = 4;
const LABEL_H: usize = 12;
const SR_BOX: [u8; 3] = [220, 40, 40];
const HR_BOX: [u8; 3] = [30, 150, 60];

struct Job {
    config: ExperimentConfig,
    checkpoint: PathBuf,
}

/// Bicubic LR upscale | SR with its detections | HR with its targets.
pub fn render_panel(pair: &SamplePair, s: &SampleEval) -> Result<Canvas, CliError> {
    let (h, w) = (pair.hr.height(), pair.hr.width());
    let up = ImageTensor::new(resize(pair.lr.data(), (h, w)))?.clamp();
    let mut c = Canvas::new(3 * w + 2 * PANEL_GAP, h + LABEL_H, [255, 255, 255]);
    for (k, (label, img)) in [("LR", &up), ("SR", &s.sr), ("HR", &pair.hr)].into_iter().enumerate() {
        let left = k * (w + PANEL_GAP);
        c.text(label, left + 2, 2, 1, [0, 0, 0]);
        c.blit(img, left, LABEL_H, 1);
    }
    for b in &s.det_sr.boxes {
        c.rect_outline(b, w + PANEL_GAP, LABEL_H, SR_BOX);
    }
    for b in &s.det_hr.boxes {
        c.rect_outline(b, 2 * (w + PANEL_GAP), LABEL_H, HR_BOX);
    }
    Ok(c)
}

fn jobs(common: &Common, checkpoint: Option<PathBuf>) -> Result<Vec<Job>, CliError> {
    match crate::train::load(common)? {
        ConfigFile::Single(cfg) => {
            let config = cfg.resolve()?;
            let checkpoint = checkpoint.unwrap_or_else(|| config.run_dir().join("final.ckpt"));
            Ok(vec![Job { config, checkpoint }])
        }
        ConfigFile::Matrix(m) => {
            if checkpoint.is_some() {
                return Err(CliError::Usage("--checkpoint applies to single experiments only".into()));
            }
            let mut out = Vec::new();
            for (name, entry) in m.expand() {
                let config = entry.map_err(|e| CliError::Usage(format!("row {name}: {e}")))?;
                let checkpoint = config.config.run_dir().join("final.ckpt");
                out.push(Job { config: config.config, checkpoint });
            }
            Ok(out)
        }
    }
}

fn dataset_name(cfg: &ExperimentConfig) -> String {
    cfg.data.root.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "dataset".into())
}

fn eval_one(
    job: &Job,
    data: &PreparedDataset,
    opts: EvalOptions<'_>,
    panels: &Path,
) -> Result<(tasksr::eval::MetricRow, Vec<String>), CliError> {
    let cfg = &job.config;
    let model: SrModel = if opts.identity_bypass {
        build_model(&cfg.model, cfg.seed)?
    } else {
        load_checkpoint(&job.checkpoint)?
    };
    let backend = cfg.load_backend()?;
    let samples = evaluate_samples(&model, &data.test, &backend, opts)?;
    let row = summarize(cfg.model.arch.as_str(), &losses_label(&cfg.enabled_losses), &samples)?;
    let mut failures = Vec::new();
    let dir = panels.join(&cfg.name);
    for (pair, s) in data.test.iter().zip(&samples) {
        let path = dir.join(format!("{}.png", s.id));
        if let Err(e) = render_panel(pair, s).and_then(|c| Ok(c.save(&path)?)) {
            failures.push(message(e));
        }
    }
    Ok((row, failures))
}

fn message(e: CliError) -> String {
    match e {
        CliError::Usage(m) | CliError::Runtime(m) => m,
    }
}

pub fn run(
    common: &Common,
    checkpoint: Option<PathBuf>,
    dataset: Option<String>,
    iou_mode: IouMode,
    identity_bypass: bool,
) -> Result<Outcome, CliError> {
    let jobs = jobs(common, checkpoint)?;
    let Some(first) = jobs.first() else {
        return Err(CliError::Usage("no runs to evaluate".into()));
    };
    let out_dir = first.config.output_dir.clone();
    let name = dataset.unwrap_or_else(|| dataset_name(&first.config));
    let opts = EvalOptions { iou_mode, plugin: None, identity_bypass };

    // rows sharing a data section share the loaded test split
    let mut datasets: BTreeMap<String, PreparedDataset> = BTreeMap::new();
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for job in &jobs {
        let key = dataset_key(&job.config);
        if !datasets.contains_key(&key) {
            datasets.insert(key.clone(), job.config.load_dataset()?);
        }
        let data = &datasets[&key];
        if !identity_bypass && !job.checkpoint.is_file() {
            failures.push(format!("{}: checkpoint {} not found", job.config.name, job.checkpoint.display()));
            continue;
        }
        match eval_one(job, data, opts, &out_dir.join("panels")) {
            Ok((row, panel_failures)) => {
                rows.push(row);
                failures.extend(panel_failures);
            }
            Err(e) => failures.push(format!("{}: {}", job.config.name, message(e))),
        }
    }
    if rows.is_empty() {
        return Ok(Outcome::Partial(failures));
    }
    let report = MetricReport { dataset: name, iou_mode, rows };
    let (csv, txt) = write_report(&report, &out_dir)?;
    println!("wrote {} and {}", csv.display(), txt.display());
    if failures.is_empty() {
        Ok(Outcome::Ok)
    } else {
        Ok(Outcome::Partial(failures))
    }
}

fn dataset_key(cfg: &ExperimentConfig) -> String {
    let d = &cfg.data;
    format!(
        "{}|{}|{}|{}|{}|{}|{}",
        d.root.display(),
        d.split_fraction,
        d.patch_size_hr,
        d.stride_hr,
        cfg.model.scale.get(),
        cfg.model.channels,
        cfg.seed
    )
}
