use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn sumi(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sumi"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn small_config(dir: &Path, floor: f64) -> String {
    let cfg = serde_json::json!({
        "task": { "n_train": 600, "n_test": 160 },
        "train": { "epochs": 4, "min_clean_accuracy": floor },
        "seeds": [3],
        "adapters": ["source", "sumi"],
    });
    let path = dir.join("config.json");
    fs::write(&path, cfg.to_string()).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn adapt_then_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), 0.0);
    let out = dir.path().join("run");
    let o = sumi(&[
        "adapt",
        "--config",
        &cfg,
        "--stream",
        "noise-u1:0.5,miss-u2:0.5@4",
        "--schedule",
        "exp",
        "--quantile-mode",
        "order",
        "--balance-term",
        "off",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(out.join("report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2);
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(json["config"]["adapt"]["schedule"], "exponential");
    assert_eq!(json["config"]["adapt"]["quantile_mode"], "order");

    let o = sumi(&["report", out.to_str().unwrap()]);
    assert!(o.status.success());
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("sumi") && text.contains("source"), "{text}");
}

#[test]
fn ablate_emits_eight_rows_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), 0.0);
    let out = dir.path().join("ablate");
    let o = sumi(&["ablate", "--config", &cfg, "--seed", "1,2", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(out.join("report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 8 * 2);
    assert!(csv.contains("sumi[none]"));
}

#[test]
fn train_source_writes_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), 0.0);
    let out = dir.path().join("src");
    let o = sumi(&["train-source", "--config", &cfg, "--seed", "4,5", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let n = fs::read_dir(&out).unwrap().count();
    assert_eq!(n, 2);
}

#[test]
fn failures_give_nonzero_exit() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), 1.01);
    let out = dir.path().join("fail");
    let o = sumi(&["sweep", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(!o.status.success());
    let csv = fs::read_to_string(out.join("report.csv")).unwrap();
    assert!(csv.contains(",failed,"));

    assert!(!sumi(&["adapt", "--adapter", "tent"]).status.success());
    assert!(!sumi(&["adapt", "--stream", "noise-u1:0.3"]).status.success());
    assert!(!sumi(&["report", dir.path().join("missing").to_str().unwrap()]).status.success());
}
