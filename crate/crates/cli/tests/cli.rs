use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_holderpo"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn holderpo")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stdout_json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn write_config(dir: &Path, name: &str, body: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, body).unwrap();
    path
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9 * b.abs().max(1.0)
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn mean_matches_hand_values() {
    let out = run(&["mean", "--ratios", "2,8", "--p", "1"]);
    assert_eq!(code(&out), 0);
    let v = stdout_json(&out);
    assert!(close(v["rho"].as_f64().unwrap(), 5.0));
    let w: Vec<f64> = v["weights"]
        .as_array()
        .unwrap()
        .iter()
        .map(|x| x.as_f64().unwrap())
        .collect();
    assert!(close(w[0], 0.2) && close(w[1], 0.8), "{w:?}");

    let out = run(&["mean", "--ratios", "2,8", "--p", "0,2,-1"]);
    assert_eq!(code(&out), 0);
    let v = stdout_json(&out);
    let rhos: Vec<f64> = v
        .as_array()
        .unwrap()
        .iter()
        .map(|r| r["rho"].as_f64().unwrap())
        .collect();
    assert!(close(rhos[0], 4.0));
    assert!(close(rhos[1], 34f64.sqrt()));
    assert!(close(rhos[2], 3.2));
}

#[test]
fn mean_reads_ratio_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_config(dir.path(), "r.txt", "2\n8\n");
    let out = run(&["mean", "--ratios-file", path.to_str().unwrap(), "--p", "1"]);
    assert_eq!(code(&out), 0);
    assert!(close(stdout_json(&out)["rho"].as_f64().unwrap(), 5.0));
}

#[test]
fn malformed_mean_input_is_a_usage_error() {
    for args in [
        &["mean", "--ratios", "2,abc", "--p", "1"][..],
        &["mean", "--ratios", "2,-1", "--p", "1"],
        &["mean", "--ratios", "", "--p", "1"],
        &["mean", "--ratios", "2,8"],
        &["mean", "--ratios", "2,8", "--p", "nan"],
    ] {
        let out = run(args);
        assert_eq!(code(&out), 1, "{args:?}");
        assert!(!out.stderr.is_empty());
    }
}

#[test]
fn zero_learning_rate_leaves_success_unchanged() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "c.json",
        r#"{"schema_version": 1, "task": "sparse",
            "training": {"p": 2, "learning_rate": 0, "total_rounds": 3}}"#,
    );
    let out_dir = dir.path().join("out");
    let out = run(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--out-dir",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let summary = read_json(&out_dir.join("summary.json"));
    assert_eq!(summary["initial_reward"], summary["final_reward"]);
    assert_eq!(summary["diverged"], Value::Bool(false));
    for f in [
        "run.json",
        "metrics.ndjson",
        "metrics.csv",
        "policy.json",
        "v_curve.csv",
        "weight_profile.csv",
    ] {
        assert!(out_dir.join(f).exists(), "{f} missing");
    }
    let csv = fs::read_to_string(out_dir.join("metrics.csv")).unwrap();
    assert!(csv.starts_with("# {"), "CSV lacks the provenance line");
    let header = fs::read_to_string(out_dir.join("metrics.ndjson")).unwrap();
    let first: Value = serde_json::from_str(header.lines().next().unwrap()).unwrap();
    assert_eq!(first["record"], "header");
    assert_eq!(first["schema_version"], 1);
}

#[test]
fn training_rerun_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/sparse.json");
    let mut files = Vec::new();
    for i in 0..2 {
        let out_dir = dir.path().join(format!("r{i}"));
        let out = run(&[
            "train",
            "--config",
            cfg.to_str().unwrap(),
            "--seed",
            "0",
            "--out-dir",
            out_dir.to_str().unwrap(),
        ]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        files.push(fs::read(out_dir.join("metrics.ndjson")).unwrap());
    }
    assert_eq!(files[0], files[1]);
}

#[test]
fn unknown_config_key_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "c.json",
        r#"{"schema_version": 1, "task": "sparse", "training": {"learnin_rate": 0.1}}"#,
    );
    let out = run(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--out-dir",
        dir.path().join("o").to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 1);
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("learnin_rate"), "{err}");

    let cfg = write_config(
        dir.path(),
        "v.json",
        r#"{"schema_version": 2, "task": "sparse"}"#,
    );
    let out = run(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--out-dir",
        dir.path().join("o").to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("schema_version"));
}

const SWEEP: &str = r#"{"schema_version": 1, "task": "sparse",
    "training": {"total_rounds": 2},
    "sweep": {"p_list": [-2, -1, 0, 1, 2, 3], "seeds": [0, 1]}}"#;

fn sweep_with_threads(dir: &Path, threads: &str) -> (Output, PathBuf) {
    let cfg = write_config(dir, "sweep.json", SWEEP);
    let out_dir = dir.join(format!("t{threads}"));
    let out = bin()
        .args([
            "sweep",
            "--config",
            cfg.to_str().unwrap(),
            "--out-dir",
            out_dir.to_str().unwrap(),
        ])
        .env("HOLDERPO_THREADS", threads)
        .output()
        .unwrap();
    (out, out_dir)
}

#[test]
fn sweep_is_independent_of_thread_count() {
    let dir = tempfile::tempdir().unwrap();
    let (one, d1) = sweep_with_threads(dir.path(), "1");
    let (two, d2) = sweep_with_threads(dir.path(), "2");
    assert_eq!(code(&one), 0, "{}", String::from_utf8_lossy(&one.stderr));
    assert_eq!(code(&two), 0);
    let a = fs::read_to_string(d1.join("comparison.csv")).unwrap();
    let b = fs::read_to_string(d2.join("comparison.csv")).unwrap();
    assert_eq!(a, b);

    let mut rdr = csv_rows(&a);
    let header = rdr.remove(0);
    let seed_col = header.iter().position(|h| h == "seed").unwrap();
    for seed in ["0", "1"] {
        assert_eq!(rdr.iter().filter(|r| r[seed_col] == seed).count(), 6);
    }
    let summary = read_json(&d1.join("summary.json"));
    assert_eq!(summary["runs"], 12);
}

// comparison.csv holds only numbers, booleans and short labels, so a plain split is enough
fn csv_rows(text: &str) -> Vec<Vec<String>> {
    text.lines()
        .filter(|l| !l.starts_with('#'))
        .map(|l| l.split(',').map(str::to_owned).collect())
        .collect()
}

#[test]
fn zero_threads_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let (out, _) = sweep_with_threads(dir.path(), "0");
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("HOLDERPO_THREADS"));
}

#[test]
fn verify_defaults_pass() {
    let out = run(&["verify"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stdout));
}

#[test]
fn verify_digest_is_deterministic() {
    let a = run(&["verify", "--instances", "1", "--seed", "7"]);
    let b = run(&["verify", "--instances", "1", "--seed", "7"]);
    assert_eq!(code(&a), 0);
    assert_eq!(a.stdout, b.stdout);
    assert!(String::from_utf8_lossy(&a.stdout).contains("digest="));
}

#[test]
fn verify_only_selects_one_check() {
    let out = run(&["verify", "--only", "entropy_monotone", "--json"]);
    assert_eq!(code(&out), 0);
    let report = stdout_json(&out);
    let checks = report["checks"].as_array().unwrap();
    assert_eq!(checks.len(), 1);
    assert_eq!(checks[0]["name"], "entropy_monotone");

    let out = run(&["verify", "--only", "no_such_check"]);
    assert_eq!(code(&out), 1);
}

#[test]
fn verify_writes_reports() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "verify",
        "--instances",
        "2",
        "--out-dir",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0);
    let report = read_json(&dir.path().join("report.json"));
    assert_eq!(report["instance_count"], 2);
    assert!(report["provenance"]["version"].is_string());
    assert!(dir.path().join("report.txt").exists());
}

// Targets start at probability about 2e-7; once one is sampled an unclipped
// step with a huge rate sends its ratio past the guard.
#[test]
fn divergence_exits_with_code_three() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "div.json",
        r#"{"schema_version": 1,
            "task": {"kind": "dense", "length": 8, "vocab": 16,
                     "target_sequence": [0, 1, 2, 3, 4, 5, 6, 7],
                     "dense_threshold": 7, "prior_logit": -12.5},
            "training": {"p": 5, "learning_rate": 20000, "clipping_regime": "none",
                         "total_rounds": 1400, "updates_per_round": 8, "minibatch_size": 32}}"#,
    );
    let out_dir = dir.path().join("out");
    let out = run(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--out-dir",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
    let run_json = read_json(&out_dir.join("run.json"));
    assert!(run_json["diverged"]["rho"].as_f64().unwrap() > 1e6);
    let summary = read_json(&out_dir.join("summary.json"));
    assert_eq!(summary["diverged"], Value::Bool(true));
}

#[test]
fn bad_arguments_exit_one() {
    assert_eq!(code(&run(&["train"])), 1);
    assert_eq!(code(&run(&["frobnicate"])), 1);
    assert_eq!(code(&run(&["--help"])), 0);
}
