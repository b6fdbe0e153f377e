use std::collections::BTreeSet;
use std::fmt::Write as _;

use tasksr::experiment::{run_experiment, ConfigFile, ExperimentConfig, MatrixConfig, MatrixEntry};
use tasksr::train::{training_matrix, EpochRecord, MatrixRow};

use crate::{CliError, Common, Outcome};

fn override_one(cfg: &mut ExperimentConfig, common: &Common) -> Result<(), CliError> {
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.output {
        let cwd = std::env::current_dir().map_err(|e| CliError::Runtime(e.to_string()))?;
        cfg.output_dir = cwd.join(out);
    }
    Ok(())
}

/// Loads `--config` and applies `--seed` / `--output`.
pub fn load(common: &Common) -> Result<ConfigFile, CliError> {
    let mut file = ConfigFile::load(&common.config)?;
    match &mut file {
        ConfigFile::Single(cfg) => override_one(cfg, common)?,
        ConfigFile::Matrix(m) => override_one(&mut m.base, common)?,
    }
    Ok(file)
}

pub fn load_single(common: &Common) -> Result<ExperimentConfig, CliError> {
    match load(common)? {
        ConfigFile::Single(cfg) => Ok(cfg.resolve()?),
        ConfigFile::Matrix(_) => Err(CliError::Usage(format!("{} is a matrix file", common.config.display()))),
    }
}

fn progress(name: &str, epochs: usize) -> impl Fn(&EpochRecord) + Sync + '_ {
    move |e: &EpochRecord| {
        let mut line = format!("[{name}] epoch {}/{epochs} loss {:.6}", e.epoch, e.train_total);
        for (id, v) in &e.train {
            write!(line, " {id}={v:.6}(w {:.3})", e.weights[id]).expect("string write");
        }
        if let Some(v) = e.validation_total {
            write!(line, " val {v:.6}").expect("string write");
        }
        eprintln!("{line}");
    }
}

pub fn run(common: &Common, jobs: usize) -> Result<Outcome, CliError> {
    match load(common)? {
        ConfigFile::Single(cfg) => {
            let cfg = cfg.resolve()?;
            let epochs = cfg.regime.epochs.unwrap_or_default();
            let report = progress(&cfg.name, epochs);
            let log = run_experiment(&cfg, Some(&report))?;
            let last = log.epochs.last().map(|e| e.train_total).unwrap_or(f64::NAN);
            println!("{}: {} epochs, final loss {last:.6}, run directory {}", cfg.name, log.epochs.len(), cfg.run_dir().display());
            Ok(Outcome::Ok)
        }
        ConfigFile::Matrix(m) => run_matrix(&m, jobs),
    }
}

pub fn run_matrix_only(common: &Common, jobs: usize) -> Result<Outcome, CliError> {
    match load(common)? {
        ConfigFile::Matrix(m) => run_matrix(&m, jobs),
        ConfigFile::Single(_) => Err(CliError::Usage(format!("{} has no [base] table; not a matrix file", common.config.display()))),
    }
}

fn run_matrix(m: &MatrixConfig, jobs: usize) -> Result<Outcome, CliError> {
    // (row, reason) for rows rejected before anything runs
    let mut invalid: Vec<(String, String)> = Vec::new();
    let mut rows: Vec<MatrixRow<MatrixEntry>> = Vec::new();
    for (name, entry) in m.expand() {
        match entry {
            Ok(e) => rows.push(MatrixRow { name, depends_on: e.depends_on.clone(), payload: e }),
            Err(e) => invalid.push((name, e.to_string())),
        }
    }
    let valid: BTreeSet<String> = rows.iter().map(|r| r.name.clone()).collect();
    rows.retain(|r| match &r.depends_on {
        Some(d) if !valid.contains(d) => {
            invalid.push((r.name.clone(), format!("depends on invalid row `{d}`")));
            false
        }
        _ => true,
    });
    // shared dataset roots are rendered once, before any row starts
    let mut roots = BTreeSet::new();
    for r in &rows {
        if roots.insert(r.payload.config.data.root.clone()) {
            r.payload.config.ensure_dataset()?;
        }
    }
    let outcomes = training_matrix(&rows, jobs, |row| {
        let cfg = &row.payload.config;
        let report = progress(&row.name, cfg.regime.epochs.unwrap_or_default());
        run_experiment(cfg, Some(&report))
    })?;

    let mut summary = String::from("row,status,detail\n");
    let mut failures = Vec::new();
    for o in &outcomes {
        match &o.result {
            Ok(log) => {
                let last = log.epochs.last().map(|e| e.train_total).unwrap_or(f64::NAN);
                writeln!(summary, "{},ok,final loss {last}", o.name).expect("string write");
            }
            Err(e) => failures.push((o.name.clone(), e.clone())),
        }
    }
    failures.extend(invalid);
    for (name, e) in &failures {
        writeln!(summary, "{name},failed,\"{}\"", e.replace('"', "'")).expect("string write");
    }
    let dir = &m.base.output_dir;
    std::fs::create_dir_all(dir).map_err(|e| CliError::Runtime(format!("{}: {e}", dir.display())))?;
    let path = dir.join("matrix_summary.csv");
    std::fs::write(&path, summary).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    let total = outcomes.len() + failures.len() - outcomes.iter().filter(|o| o.failed()).count();
    println!("{total} row(s), {} failed; summary in {}", failures.len(), path.display());
    if failures.is_empty() {
        Ok(Outcome::Ok)
    } else {
        Ok(Outcome::Partial(failures.into_iter().map(|(n, e)| format!("{n}: {e}")).collect()))
    }
}
