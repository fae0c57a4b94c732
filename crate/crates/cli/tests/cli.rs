use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn mose(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mose")).args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn manifest(dir: &Path, command: &str) -> serde_json::Value {
    let text = fs::read_to_string(dir.join(format!("manifest-{command}.json"))).unwrap();
    serde_json::from_str(&text).unwrap()
}

fn config_value(m: &serde_json::Value, key: &str) -> String {
    m["config"]
        .as_array()
        .unwrap()
        .iter()
        .find(|e| e[0] == key)
        .map(|e| e[1].as_str().unwrap().to_string())
        .unwrap()
}

/// Generates a small GraphFive set under `root/data`.
fn generate(root: &Path) -> String {
    let data = root.join("data");
    let out = mose(&["gen", "--dataset", "GraphFive", "--count", "20", "--seed", "2", "--out-dir", data.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    data.to_str().unwrap().to_string()
}

const SMALL: [&str; 8] = ["--epochs", "2", "--folds", "2", "--experts", "3", "--hidden-graphs", "2"];

#[test]
fn usage_errors_exit_64() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().to_str().unwrap();
    assert_eq!(code(&mose(&["train", "--no-such-flag"])), 64);
    assert_eq!(code(&mose(&["frobnicate"])), 64);
    assert_eq!(code(&mose(&["train", "--dataset", "X", "--set", "nonsense=1", "--out-dir", out_dir])), 64);
    assert_eq!(code(&mose(&["train", "--dataset", "X", "--lr", "fast", "--out-dir", out_dir])), 64);
    assert_eq!(code(&mose(&["verify", "--suite", "everything", "--out-dir", out_dir])), 64);
    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "epochs = 3\nthis line is broken\n").unwrap();
    let out = mose(&["train", "--config", cfg.to_str().unwrap(), "--out-dir", out_dir]);
    assert_eq!(code(&out), 64);
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 2"));
    assert_eq!(code(&mose(&["--help"])), 0);
}

#[test]
fn missing_dataset_is_a_runtime_failure_with_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    let out = mose(&["train", "--dataset", "Nowhere", "--data-dir", d, "--out-dir", d]);
    assert_eq!(code(&out), 2);
    let m = manifest(dir.path(), "train");
    assert!(m["status"].as_str().unwrap().starts_with("error"));
}

#[test]
fn train_evaluate_export_round_trip() {
    let root = tempfile::tempdir().unwrap();
    let data = generate(root.path());
    let out_dir = root.path().join("run");
    let o = out_dir.to_str().unwrap();

    let cfg = root.path().join("run.cfg");
    fs::write(&cfg, "# small run\nepochs = 5\nhidden_dim = 8\n").unwrap();
    let mut args = vec!["train", "--config", cfg.to_str().unwrap(), "--data-dir", &data, "--dataset", "GraphFive", "--out-dir", o];
    args.extend(SMALL);
    let out = mose(&args);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let m = manifest(&out_dir, "train");
    assert_eq!(m["status"], "ok");
    // flags override the file, the file overrides defaults
    assert_eq!(config_value(&m, "epochs"), "2");
    assert_eq!(config_value(&m, "hidden_dim"), "8");
    assert!(m["dataset_hash"].is_string());
    for f in ["checkpoint.json", "metrics.csv", "summary.json", "GraphFive.subgraphs"] {
        assert!(out_dir.join(f).exists(), "{f}");
    }
    let metrics = fs::read_to_string(out_dir.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("part,epoch,split,loss_task,loss_importance,accuracy,macro_f1,expert_load_0,"));

    let checkpoint = out_dir.join("checkpoint.json");
    let ck = checkpoint.to_str().unwrap();
    let out = mose(&["evaluate", "--checkpoint", ck, "--out-dir", o]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let eval: serde_json::Value = serde_json::from_str(&fs::read_to_string(out_dir.join("evaluation.json")).unwrap()).unwrap();
    assert!(eval["test"]["accuracy"].is_number());

    let export = root.path().join("dot");
    let e = export.to_str().unwrap();
    assert_eq!(code(&mose(&["export-hidden", "--checkpoint", ck, "--out-dir", e])), 0);
    let dots: Vec<_> = fs::read_dir(&export)
        .unwrap()
        .map(|f| f.unwrap().file_name().into_string().unwrap())
        .filter(|f| f.ends_with(".dot"))
        .collect();
    assert_eq!(dots.len(), 6);
    assert!(export.join("expert2_hg1.dot").exists());

    // everything pruned, files still written
    let out = mose(&["export-hidden", "--checkpoint", ck, "--out-dir", e, "--prune-threshold", "1e9"]);
    assert_eq!(code(&out), 0);
    let dot = fs::read_to_string(export.join("expert0_hg0.dot")).unwrap();
    assert!(dot.starts_with("graph expert0_hg0 {"));
    assert!(!dot.contains("--"));
    assert!(manifest(&export, "export-hidden")["outputs"].as_array().unwrap().len() == 6);
}

#[test]
fn resume_reproduces_and_rejects_changed_config() {
    let root = tempfile::tempdir().unwrap();
    let data = generate(root.path());
    let first = root.path().join("a");
    let a = first.to_str().unwrap();
    let mut args = vec!["train", "--data-dir", &data, "--dataset", "GraphFive", "--out-dir", a];
    args.extend(SMALL);
    assert_eq!(code(&mose(&args)), 0);
    let ck = first.join("checkpoint.json");
    let ck = ck.to_str().unwrap();

    let second = root.path().join("b");
    let b = second.to_str().unwrap();
    let mut args = vec!["train", "--data-dir", &data, "--dataset", "GraphFive", "--out-dir", b, "--resume", ck];
    args.extend(SMALL);
    assert_eq!(code(&mose(&args)), 0);
    assert_eq!(fs::read(first.join("summary.json")).unwrap(), fs::read(second.join("summary.json")).unwrap());

    args.extend(["--lr", "0.5"]);
    assert_eq!(code(&mose(&args)), 64);
}

#[test]
fn extract_reuses_its_cache() {
    let root = tempfile::tempdir().unwrap();
    let data = generate(root.path());
    let o = root.path().join("x");
    let args = ["extract", "--data-dir", &data, "--dataset", "GraphFive", "--out-dir", o.to_str().unwrap()];
    let first = mose(&args);
    assert_eq!(code(&first), 0);
    let text = String::from_utf8(first.stdout).unwrap();
    assert!(text.starts_with("pattern\tcount\tgraphs\n"));
    assert!(text.contains("singleton subgraphs: "));
    assert!(text.contains("(built)"));
    let again = String::from_utf8(mose(&args).stdout).unwrap();
    assert!(again.contains("(reused)"));
    assert_eq!(text.replace("(built)", ""), again.replace("(reused)", ""));
}

#[test]
fn diverging_training_exits_2_with_dump() {
    let root = tempfile::tempdir().unwrap();
    let data = generate(root.path());
    let o = root.path().join("nan");
    let mut args = vec!["train", "--data-dir", &data, "--dataset", "GraphFive", "--out-dir", o.to_str().unwrap()];
    args.extend(SMALL);
    args.extend(["--lr", "1e200"]);
    let out = mose(&args);
    assert_eq!(code(&out), 2, "{}", String::from_utf8_lossy(&out.stderr));
    let dump = fs::read_to_string(o.join("failure.txt")).unwrap();
    assert!(dump.starts_with("non-finite value"));
}

#[test]
fn verify_reports_cases() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    let out = mose(&["verify", "--suite", "kernel-oracle", "--max-nodes", "3", "--max-p", "2", "--seed", "4", "--out-dir", d]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stdout));
    let report = fs::read_to_string(dir.path().join("verify-report.txt")).unwrap();
    assert_eq!(report.lines().count(), 2);
    assert!(report.lines().all(|l| l.starts_with("PASS kernel-oracle/")));
    assert_eq!(manifest(dir.path(), "verify")["seed"], 4);
}
