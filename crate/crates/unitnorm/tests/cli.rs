use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use unitnorm::idx::{encode_idx_images, encode_idx_labels, MnistPaths};

const SIDE: usize = 4;

fn unitnorm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_unitnorm")).args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

/// Three classes, each lighting its own stripe of a 4x4 image.
fn fake_digits(n: usize, salt: usize) -> (Vec<u8>, Vec<u8>) {
    let mut pixels = Vec::with_capacity(n * SIDE * SIDE);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % 3;
        labels.push(c as u8);
        for k in 0..SIDE * SIDE {
            let noise = (i * 31 + k * 17 + salt * 7) % 60;
            pixels.push((noise + if k % 3 == c { 180 } else { 0 }) as u8);
        }
    }
    (pixels, labels)
}

struct Fixture {
    dir: tempfile::TempDir,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let paths = MnistPaths::in_dir(dir.path());
        let (tp, tl) = fake_digits(120, 0);
        let (sp, sl) = fake_digits(30, 1);
        fs::write(&paths.train_images, encode_idx_images(120, SIDE, SIDE, &tp)).unwrap();
        fs::write(&paths.train_labels, encode_idx_labels(&tl)).unwrap();
        fs::write(&paths.test_images, encode_idx_images(30, SIDE, SIDE, &sp)).unwrap();
        fs::write(&paths.test_labels, encode_idx_labels(&sl)).unwrap();
        let config = serde_json::json!({
            "network": {"depth": 2, "input_dim": SIDE * SIDE, "filters_per_layer": 8, "n_classes": 3},
            "train": {
                "lr_grid": [0.1, 0.01], "batch_size": 20,
                "search_train_size": 60, "search_val_size": 20, "search_epochs": 2,
                "full_train_size": 100, "full_val_size": 20, "min_epochs": 2, "max_epochs": 4
            },
            "data_dir": dir.path(),
        });
        fs::write(dir.path().join("config.json"), config.to_string()).unwrap();
        Fixture { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn config(&self) -> String {
        self.path("config.json").display().to_string()
    }

    fn run(&self, command: &str, out: &str, extra: &[&str]) -> Output {
        let out = self.path(out).display().to_string();
        let config = self.config();
        let mut args = vec![command, "--config", &config, "--out", &out, "--quiet"];
        args.extend_from_slice(extra);
        unitnorm(&args)
    }
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn check_passes_and_reports() {
    let dir = tempfile::tempdir().unwrap();
    let out = unitnorm(&["check", "--seed", "3", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stdout));
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.lines().filter(|l| l.starts_with("PASS")).count() >= 10);
    assert!(!stdout.contains("FAIL"));
    let report = json(&dir.path().join("check.json"));
    assert!(report["fd_gradient_max_rel_err"].as_f64().unwrap() <= 1e-5);
    assert!(report["loss_invariance_gap"].as_f64().unwrap() <= 1e-8);
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&unitnorm(&["train", "--depth", "3"])), 1);
    assert_eq!(code(&unitnorm(&["train", "--rule", "adam"])), 1);
    assert_eq!(code(&unitnorm(&["protocol", "--bogus"])), 1);
    assert_eq!(code(&unitnorm(&[])), 1);
    assert_eq!(code(&unitnorm(&["--help"])), 0);

    let f = Fixture::new();
    assert_eq!(code(&f.run("protocol", "o", &["--parallel", "0"])), 1);
    fs::write(f.path("broken.json"), "{\"seed\": ").unwrap();
    let broken = f.path("broken.json").display().to_string();
    assert_eq!(code(&unitnorm(&["train", "--config", &broken])), 1);
    fs::write(f.path("typo.json"), r#"{"sede": 1}"#).unwrap();
    let typo = f.path("typo.json").display().to_string();
    assert_eq!(code(&unitnorm(&["train", "--config", &typo])), 1);
}

#[test]
fn data_command_and_data_errors() {
    let f = Fixture::new();
    let dir = f.dir.path().display().to_string();
    let out = unitnorm(&["data", "--data-dir", &dir]);
    assert_eq!(code(&out), 0);
    let report: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!((report["n_train"].as_u64(), report["n_test"].as_u64()), (Some(120), Some(30)));
    assert_eq!(report["train_label_counts"][0].as_u64(), Some(40));

    // wrong magic
    let bad = f.path("bad-labels");
    let mut bytes = encode_idx_labels(&[1, 2]);
    bytes[3] = 0x03;
    fs::write(&bad, bytes).unwrap();
    let out = unitnorm(&["data", "--data-dir", &dir, "--train-labels", bad.to_str().unwrap()]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("magic"));

    let missing = f.path("nowhere");
    assert_eq!(code(&unitnorm(&["data", "--data-dir", missing.to_str().unwrap()])), 2);

    // data that does not fit the network
    let cfg = f.path("wide.json");
    fs::write(&cfg, serde_json::json!({"network": {"input_dim": 784}, "data_dir": f.dir.path()}).to_string()).unwrap();
    assert_eq!(code(&unitnorm(&["train", "--config", cfg.to_str().unwrap(), "--quiet"])), 2);
}

#[test]
fn train_writes_artifacts_and_replays() {
    let f = Fixture::new();
    let out = f.run("train", "first", &["--seed", "7", "--rule", "bsgd"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));

    let csv = fs::read_to_string(f.path("first/history.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("epoch,train_error,val_error,lr"));
    let rows = lines.count();
    assert!((2..=4).contains(&rows));

    let summary = json(&f.path("first/summary.json"));
    for key in ["test_error", "base_lr", "epochs", "diverged"] {
        assert!(summary.get(key).is_some(), "missing {key}");
    }
    assert_eq!(summary["epochs"].as_u64(), Some(rows as u64));
    assert_eq!(summary["rule"], "bsgd");

    let manifest = json(&f.path("first/manifest.json"));
    assert_eq!(manifest["command"], "train");
    assert_eq!(manifest["seeds"], serde_json::json!([7]));
    assert!(manifest["timestamp"].is_string());

    let replay_out = f.path("second").display().to_string();
    let manifest_path = f.path("first/manifest.json").display().to_string();
    let out = unitnorm(&["train", "--config", &manifest_path, "--out", &replay_out, "--quiet"]);
    assert_eq!(code(&out), 0);
    assert_eq!(fs::read(f.path("first/summary.json")).unwrap(), fs::read(f.path("second/summary.json")).unwrap());
    assert_eq!(fs::read(f.path("first/history.csv")).unwrap(), fs::read(f.path("second/history.csv")).unwrap());

    // a manifest does not replay under another subcommand
    assert_eq!(code(&unitnorm(&["protocol", "--config", &manifest_path, "--quiet"])), 1);
}

#[test]
fn fixed_learning_rate_skips_search() {
    let f = Fixture::new();
    assert_eq!(code(&f.run("train", "fixed", &["--base-lr", "0.05"])), 0);
    assert_eq!(json(&f.path("fixed/summary.json"))["base_lr"].as_f64(), Some(0.05));
    let csv = fs::read_to_string(f.path("fixed/history.csv")).unwrap();
    assert!(csv.lines().nth(1).unwrap().ends_with(",0.05"));
}

#[test]
fn search_reports_candidates() {
    let f = Fixture::new();
    assert_eq!(code(&f.run("search", "s", &["--seed", "2"])), 0);
    let report = json(&f.path("s/search.json"));
    let cands = report["candidates"].as_array().unwrap();
    assert_eq!(cands.len(), 2);
    let selected = report["selected"].as_f64().unwrap();
    assert!(cands.iter().any(|c| c["lr"].as_f64() == Some(selected)));
}

#[test]
fn protocol_aggregates_consecutive_seeds() {
    let f = Fixture::new();
    assert_eq!(code(&f.run("protocol", "p1", &["--seed", "5", "--runs", "3", "--parallel", "3"])), 0);
    assert_eq!(code(&f.run("protocol", "p2", &["--seed", "5", "--runs", "3", "--parallel", "1"])), 0);
    let p1 = fs::read(f.path("p1/protocol.json")).unwrap();
    assert_eq!(p1, fs::read(f.path("p2/protocol.json")).unwrap());

    let report: Value = serde_json::from_slice(&p1).unwrap();
    assert_eq!(report["rule"], "un");
    assert_eq!(report["depth"].as_u64(), Some(2));
    let seeds: Vec<u64> = report["per_run"].as_array().unwrap().iter().map(|r| r["seed"].as_u64().unwrap()).collect();
    assert_eq!(seeds, vec![5, 6, 7]);
    let errs: Vec<f64> =
        report["per_run"].as_array().unwrap().iter().filter_map(|r| r["test_error"].as_f64()).collect();
    assert_eq!(report["n_valid_runs"].as_u64(), Some(errs.len() as u64));
    let mean = errs.iter().sum::<f64>() / errs.len() as f64;
    assert!((report["mean_test_error"].as_f64().unwrap() - mean).abs() < 1e-12);
    assert!(report["std_test_error"].as_f64().is_some());
    for s in seeds {
        assert!(f.path(&format!("p1/history_seed{s}.csv")).is_file());
    }
}
