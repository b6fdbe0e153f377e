use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const BIN: &str = env!("CARGO_BIN_EXE_tasksr");

fn config(name: &str, losses: &str, epochs: usize, pages: usize) -> String {
    format!(
        r#"name = "{name}"
seed = 11
enabled_losses = [{losses}]
output_dir = "out"

[model]
arch = "SRCNN"
scale = 4
channels = 1
width_multiplier = 0.25

[regime]
kind = "from_scratch"
epochs = {epochs}

[optimizer]
learning_rate = 1e-3
batch_size = 4

[data]
root = "data"
patch_size_hr = 64
stride_hr = 64

[data.synthetic]
count = {pages}
height = 64
width = 64

[backend]
kind = "toy"
"#
    )
}

fn write(dir: &Path, file: &str, text: &str) -> PathBuf {
    let p = dir.join(file);
    fs::write(&p, text).unwrap();
    p
}

fn tasksr(dir: &Path, args: &[&str]) -> Output {
    Command::new(BIN).args(args).current_dir(dir).output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(o: &Output) {
    assert!(o.status.success(), "exit {:?}\n{}", o.status.code(), stderr(o));
}

fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn manifest(dir: &Path) -> serde_json::Value {
    serde_json::from_slice(&fs::read(dir.join("data/manifest.json")).unwrap()).unwrap()
}

#[test]
fn empty_loss_set_is_rejected_before_any_work() {
    let t = TempDir::new().unwrap();
    write(t.path(), "exp.toml", &config("e", "", 1, 4));
    let o = tasksr(t.path(), &["train", "--config", "exp.toml"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("enabled_losses"), "{}", stderr(&o));
    assert!(!t.path().join("out").exists());
    assert!(!t.path().join("data").exists());
}

#[test]
fn unknown_config_key_names_the_key() {
    let t = TempDir::new().unwrap();
    let text = config("e", r#""L2_HR""#, 1, 4).replace("[model]", "[model]\nwidht_multiplier = 2.0");
    write(t.path(), "exp.toml", &text);
    let o = tasksr(t.path(), &["train", "--config", "exp.toml"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("widht_multiplier"), "{}", stderr(&o));
}

#[test]
fn prepare_splits_seventy_thirty_and_is_idempotent() {
    let t = TempDir::new().unwrap();
    write(t.path(), "exp.toml", &config("p", r#""L2_HR""#, 1, 10));
    ok(&tasksr(t.path(), &["prepare", "--config", "exp.toml"]));
    let m = manifest(t.path());
    assert_eq!(m["train"].as_array().unwrap().len(), 7);
    assert_eq!(m["test"].as_array().unwrap().len(), 3);
    let first = tree(&t.path().join("data"));
    assert_eq!(first.keys().filter(|p| p.starts_with("patches/test/hr")).count(), 3);
    ok(&tasksr(t.path(), &["prepare", "--config", "exp.toml"]));
    assert_eq!(first, tree(&t.path().join("data")));
}

#[test]
fn corrupt_page_is_named_and_the_rest_processed() {
    let t = TempDir::new().unwrap();
    write(t.path(), "exp.toml", &config("c", r#""L2_HR""#, 1, 10));
    ok(&tasksr(t.path(), &["prepare", "--config", "exp.toml"]));
    fs::write(t.path().join("data/hr/doc_003.png"), b"not a png").unwrap();
    let o = tasksr(t.path(), &["prepare", "--config", "exp.toml"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("doc_003.png"), "{}", stderr(&o));
    let m = manifest(t.path());
    let listed = m["train"].as_array().unwrap().len() + m["test"].as_array().unwrap().len();
    assert_eq!(listed, 9);
}

#[test]
fn train_eval_plot_end_to_end() {
    let t = TempDir::new().unwrap();
    write(t.path(), "exp.toml", &config("all", r#""L2_HR", "L2_LR", "TASK_DEEP", "TASK_OUT""#, 3, 6));
    ok(&tasksr(t.path(), &["train", "--config", "exp.toml"]));
    let run = t.path().join("out/runs/all");
    for f in ["final.ckpt", "metrics.csv", "config.snapshot", "run_log.json", "checkpoints/epoch_003.ckpt"] {
        assert!(run.join(f).is_file(), "missing {f}");
    }

    ok(&tasksr(t.path(), &["eval", "--config", "exp.toml", "--dataset", "fixture"]));
    let csv = fs::read_to_string(t.path().join("out/report/fixture.csv")).unwrap();
    assert_eq!(
        csv.lines().next().unwrap(),
        "model,losses,psnr_db,ssim,lpips,iou,ctpn_deep_x100,ctpn_out_x100,best_flags"
    );
    assert!(t.path().join("out/report/fixture.txt").is_file());
    ok(&tasksr(t.path(), &["prepare", "--config", "exp.toml"]));
    let test_patches = manifest(t.path())["test_patches"].as_array().unwrap().len();
    assert!(test_patches > 0);
    let panels = fs::read_dir(t.path().join("out/panels/all")).unwrap().count();
    assert_eq!(panels, test_patches);

    ok(&tasksr(t.path(), &["plot", "out/runs/all/metrics.csv", "--output", "p1"]));
    ok(&tasksr(t.path(), &["plot", "out/runs/all/metrics.csv", "--output", "p2"]));
    assert_eq!(fs::read(t.path().join("p1/curves.png")).unwrap(), fs::read(t.path().join("p2/curves.png")).unwrap());
    let curves = fs::read_to_string(t.path().join("p1/curves.csv")).unwrap();
    let mut lines = curves.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(header.last(), Some(&"n"));
    let mut rows = 0;
    for l in lines {
        let f: Vec<f64> = l.split(',').map(|x| x.parse().unwrap()).collect();
        let n = f[f.len() - 1];
        assert_eq!(n, 4.0);
        let sum: f64 = f[1..f.len() - 2].iter().sum();
        assert!((sum - n).abs() < 1e-9, "{l}");
        assert!((f[f.len() - 2] - n).abs() < 1e-9, "{l}");
        rows += 1;
    }
    assert_eq!(rows, 3);
}

#[test]
fn identity_bypass_hits_metric_ceilings() {
    let t = TempDir::new().unwrap();
    write(t.path(), "exp.toml", &config("id", r#""L2_HR""#, 1, 6));
    ok(&tasksr(t.path(), &["eval", "--config", "exp.toml", "--identity-bypass", "--dataset", "self"]));
    let csv = fs::read_to_string(t.path().join("out/report/self.csv")).unwrap();
    let row: Vec<&str> = csv.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(row[2].parse::<f64>().unwrap(), 100.0);
    assert_eq!(row[3].parse::<f64>().unwrap(), 1.0);
    assert_eq!(row[5].parse::<f64>().unwrap(), 1.0);
    assert_eq!(row[6].parse::<f64>().unwrap(), 0.0);
}

#[test]
fn eval_without_checkpoint_fails() {
    let t = TempDir::new().unwrap();
    write(t.path(), "exp.toml", &config("none", r#""L2_HR""#, 1, 4));
    let o = tasksr(t.path(), &["eval", "--config", "exp.toml"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("final.ckpt"), "{}", stderr(&o));
}

#[test]
fn single_component_weights_stay_at_one() {
    let t = TempDir::new().unwrap();
    let mut csv = String::from("epoch,component,raw_value,weight,weighted_value\n");
    for e in 1..=5 {
        csv += &format!("{e},L2_HR,{},1,{}\n", 0.1 / e as f64, 0.1 / e as f64);
    }
    write(t.path(), "metrics.csv", &csv);
    ok(&tasksr(t.path(), &["plot", "metrics.csv"]));
    let curves = fs::read_to_string(t.path().join("curves.csv")).unwrap();
    for l in curves.lines().skip(1) {
        let f: Vec<&str> = l.split(',').collect();
        assert_eq!(&f[1..], ["1", "1", "1"], "{l}");
    }
    assert!(t.path().join("curves.png").is_file());
}

#[test]
fn malformed_metrics_reports_the_line() {
    let t = TempDir::new().unwrap();
    let csv = "epoch,component,raw_value,weight,weighted_value\n1,L2_HR,0.1,1,0.1\n2,L2_HR,abc,1,0.1\n";
    write(t.path(), "metrics.csv", csv);
    let o = tasksr(t.path(), &["plot", "metrics.csv"]);
    assert_ne!(o.status.code(), Some(0));
    assert!(stderr(&o).contains("line 3"), "{}", stderr(&o));

    write(t.path(), "short.csv", "epoch,component,raw_value,weight,weighted_value\n1,L2_HR,0.1\n");
    let o = tasksr(t.path(), &["plot", "short.csv"]);
    assert!(stderr(&o).contains("line 2"), "{}", stderr(&o));
}

#[test]
fn snapshot_reproduces_the_run() {
    let t = TempDir::new().unwrap();
    write(t.path(), "exp.toml", &config("snap", r#""L2_HR", "TASK_OUT""#, 2, 6));
    ok(&tasksr(t.path(), &["train", "--config", "exp.toml"]));
    let run = t.path().join("out/runs/snap");
    fs::copy(run.join("config.snapshot"), t.path().join("snapshot.toml")).unwrap();
    ok(&tasksr(t.path(), &["train", "--config", "snapshot.toml", "--output", "again"]));
    let rerun = t.path().join("again/runs/snap");
    for f in ["final.ckpt", "metrics.csv", "checkpoints/epoch_001.ckpt"] {
        assert_eq!(fs::read(run.join(f)).unwrap(), fs::read(rerun.join(f)).unwrap(), "{f} differs");
    }
}

#[test]
fn matrix_reports_broken_rows_and_runs_the_rest() {
    let t = TempDir::new().unwrap();
    let base = config("base", r#""L2_HR""#, 1, 6);
    let base: String = base.lines().map(|l| if l.starts_with('[') { format!("[base.{}\n", &l[1..]) } else { format!("{l}\n") }).collect();
    let text = format!(
        "[base]\n{base}
[[row]]
name = \"good\"

[[row]]
name = \"tuned\"
regime = \"fine_tune\"
epochs = 1
init_from = \"good\"

[[row]]
name = \"both\"
regime = \"fine_tune\"
init_from = \"good\"
init_checkpoint = \"x.ckpt\"

[[row]]
name = \"missing\"
regime = \"fine_tune\"
init_checkpoint = \"nowhere.ckpt\"

[[row]]
name = \"after_missing\"
regime = \"fine_tune\"
init_from = \"missing\"
"
    );
    write(t.path(), "matrix.toml", &text);
    let o = tasksr(t.path(), &["matrix", "--config", "matrix.toml", "--jobs", "2"]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    let err = stderr(&o);
    for name in ["both", "missing", "after_missing"] {
        assert!(err.contains(&format!("{name}: ")), "{name} not listed:\n{err}");
    }
    assert!(!err.contains("good: ") && !err.contains("tuned: "), "{err}");
    assert!(t.path().join("out/runs/good/final.ckpt").is_file());
    assert!(t.path().join("out/runs/tuned/final.ckpt").is_file());
    let summary = fs::read_to_string(t.path().join("out/matrix_summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 6);
}
