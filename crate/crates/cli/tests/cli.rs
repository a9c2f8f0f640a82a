use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use dprisk::container::Container;
use dprisk::imprint::implant;
use dprisk::trainer::{Model, ModelSpec};

const TINY: &str = "\
[dataset]
samples = 200
size = 8

[train]
epochs = 2
batch_size = 16

[privacy]
eps = 1, 1e9

[attack]
samples = 8

[run]
seeds = 2
";

fn dprisk(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dprisk"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("tiny.conf"), TINY).unwrap();
    dir
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn bounds_prints_one_row_per_budget() {
    let dir = setup();
    let o = dprisk(dir.path(), &["bounds", "--config", "tiny.conf", "--eps", "1,8,32", "--kappa", "1e-4"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "epsilon,noise_multiplier,worst_case,relaxed");
    assert_eq!(lines.len(), 4);
    for l in &lines[1..] {
        let cols: Vec<f64> = l.split(',').map(|c| c.parse().unwrap()).collect();
        assert!(cols[2] >= cols[3]);
    }
}

#[test]
fn calibrate_round_trips() {
    let dir = setup();
    let o = dprisk(dir.path(), &["calibrate", "--config", "tiny.conf", "--eps", "1,8"]);
    assert!(o.status.success());
    for l in stdout(&o).lines().skip(2) {
        let cols: Vec<f64> = l.split(',').map(|c| c.parse().unwrap()).collect();
        assert!(cols[2] <= cols[0] && cols[2] >= 0.99 * cols[0], "{l}");
    }
}

#[test]
fn detect_reports_clean_and_modified_models() {
    let dir = setup();
    let m = Model::init(&ModelSpec::mlp(&[1, 8, 8], &[6], 2), 1).unwrap();
    m.to_container().unwrap().save(&dir.path().join("clean.dprk")).unwrap();
    implant(&m, 10).unwrap().to_container().unwrap().save(&dir.path().join("bad.dprk")).unwrap();
    let o = dprisk(dir.path(), &["detect", "--model", "clean.dprk"]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(stdout(&o).trim(), "clean");
    let o = dprisk(dir.path(), &["detect", "--model", "bad.dprk"]);
    assert_eq!(stdout(&o).trim(), "imprint detected");
    let o = dprisk(dir.path(), &["detect", "--model", "missing.dprk"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn nonprivate_attack_then_report() {
    let dir = setup();
    let o = dprisk(dir.path(), &["attack", "--config", "tiny.conf", "--out", "res", "--budget", "nonprivate"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let o = dprisk(dir.path(), &["report", "--config", "tiny.conf", "--out", "res"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(dir.path().join("res/profile.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows.len(), 2);
    let cols: Vec<&str> = rows[1].split(',').collect();
    assert_eq!(cols[0], "inf");
    assert!(cols[6].parse::<f64>().unwrap() >= 0.95, "{}", rows[1]);
}

#[test]
fn run_is_byte_reproducible() {
    let dir = setup();
    for (out, threads) in [("a", "1"), ("b", "3")] {
        let o = dprisk(dir.path(), &["run", "--config", "tiny.conf", "--out", out, "--parallel", threads]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    for f in ["profile.json", "profile.csv", "curves.svg", "bounds.svg", "curve_nonprivate.csv"] {
        let a = fs::read(dir.path().join("a").join(f)).unwrap();
        let b = fs::read(dir.path().join("b").join(f)).unwrap();
        // The output directory and thread count are echoed in the configuration.
        let a = String::from_utf8(a)
            .unwrap()
            .replace("\"a\"", "\"b\"")
            .replace("\"parallel\": 1", "\"parallel\": 3");
        assert_eq!(a.as_bytes(), b.as_slice(), "{f}");
    }
}

#[test]
fn usage_errors_exit_one() {
    let dir = setup();
    fs::write(dir.path().join("bad.conf"), "[train]\nepoch = 3\n").unwrap();
    let o = dprisk(dir.path(), &["bounds", "--config", "bad.conf"]);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("train.epoch") && err.contains("train.epochs"), "{err}");
    assert_eq!(dprisk(dir.path(), &["bounds", "--format", "pdf"]).status.code(), Some(1));
    assert_eq!(dprisk(dir.path(), &["frobnicate"]).status.code(), Some(1));
    assert_eq!(dprisk(dir.path(), &["bounds", "--eps", "8,1"]).status.code(), Some(1));
}

#[test]
fn failed_cells_give_partial_exit() {
    let dir = setup();
    let o = dprisk(dir.path(), &["attack", "--config", "tiny.conf", "--out", "res", "--eps", "1"]);
    assert!(o.status.success());
    let cell = dir.path().join("res/cells/eps1_seed0.json");
    let text = fs::read_to_string(&cell).unwrap().replace("\"errors\": []", "\"errors\": [\"train: injected\"]");
    fs::write(&cell, text).unwrap();
    let o = dprisk(dir.path(), &["report", "--config", "tiny.conf", "--out", "res", "--eps", "1"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(fs::read_to_string(dir.path().join("res/profile.csv")).unwrap().contains("failed"));
}

#[test]
fn generate_writes_a_dataset_container() {
    let dir = setup();
    let o = dprisk(dir.path(), &["generate", "--config", "tiny.conf", "--out", "res"]);
    assert!(o.status.success());
    let c = Container::load(&dir.path().join("res/dataset.dprk")).unwrap();
    let d = dprisk::datagen::Dataset::from_container(&c).unwrap();
    assert_eq!(d.len(), 200);
}
