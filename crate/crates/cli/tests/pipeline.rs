use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn rvekit(cwd: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rvekit"))
        .args(args)
        .current_dir(cwd)
        .env_remove("RVEKIT_JOBS")
        .env_remove("RVEKIT_OUT_ROOT")
        .output()
        .unwrap()
}

fn summary(out: &Output) -> Value {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

const GEN: [&str; 9] = ["generate", "--seed", "7", "--resolution", "32", "--sizes", "16,4,4,4", "--contrasts", "5"];

#[test]
fn generate_is_deterministic_across_job_counts() {
    let dir = tempfile::tempdir().unwrap();
    let a = summary(&rvekit(dir.path(), &[&GEN[..], &["--out", "a", "--jobs", "1"]].concat()));
    let b = summary(&rvekit(dir.path(), &[&GEN[..], &["--out", "b"]].concat()));
    assert_eq!(a["data_hash"], b["data_hash"]);
    assert!(a["data_hash"].as_str().unwrap().len() == 64);
    assert!(dir.path().join("a/manifest.json").exists());
}

#[test]
fn train_then_eval_reports_relative_error() {
    let dir = tempfile::tempdir().unwrap();
    summary(&rvekit(dir.path(), &[&GEN[..], &["--out", "ds"]].concat()));
    let t = summary(&rvekit(
        dir.path(),
        &["train", "--manifest", "ds/manifest.json", "--model", "vol", "--seed", "1", "--epochs", "4", "--out", "vol"],
    ));
    assert_eq!(t["results"]["model"], "vol");
    assert!(dir.path().join("vol/model.ckpt").exists());
    let e = summary(&rvekit(
        dir.path(),
        &["eval", "--manifest", "ds/manifest.json", "--checkpoint", "vol/model.ckpt", "--out", "ev"],
    ));
    assert!(e["results"]["rel_rmse"].as_f64().unwrap().is_finite());
    assert!(e["outputs"]["parity.svg"].is_string());
    assert_eq!(e["data_hash"], t["data_hash"]);
}

#[test]
fn failures_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let code = |args: &[&str]| {
        let o = rvekit(dir.path(), args);
        let err = String::from_utf8_lossy(&o.stderr).to_string();
        (o.status.code().unwrap(), err)
    };
    let (c, err) = code(&["generate", "--resolution", "32", "--out", "x"]);
    assert_eq!(c, 2);
    assert!(err.starts_with("error[config]"));
    assert_eq!(err.trim().lines().count(), 1);
    assert!(!dir.path().join("x").exists());
    assert_eq!(code(&["train", "--manifest", "missing.json", "--model", "vol", "--seed", "1", "--out", "y"]).0, 5);
    std::fs::write(dir.path().join("bad.json"), "{").unwrap();
    assert_eq!(code(&["train", "--manifest", "bad.json", "--model", "vol", "--seed", "1", "--out", "z"]).0, 3);
    assert_eq!(code(&["generate", "--seed", "1", "--sizes", "1,2", "--out", "w"]).0, 2);
}
