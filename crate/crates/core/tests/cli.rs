//! The `parastab` binary end to end: exit codes, file naming, determinism.

use std::path::{Path, PathBuf};
use std::process::Command;

const BIN: &str = env!("CARGO_BIN_EXE_parastab");

fn config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs").join(name)
}

fn run(args: &[&str]) -> (i32, String) {
    let out = Command::new(BIN).args(args).output().unwrap();
    (out.status.code().unwrap_or(-1), String::from_utf8_lossy(&out.stdout).into_owned())
}

fn reports(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| !p.to_string_lossy().ends_with(".timing.json"))
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

#[test]
fn validate_accepts_every_shipped_config() {
    for entry in std::fs::read_dir(config("")).unwrap() {
        let path = entry.unwrap().path();
        let (code, stdout) = run(&["validate", "--config", path.to_str().unwrap()]);
        assert_eq!(code, 0, "{}", path.display());
        assert!(stdout.starts_with("OK"), "{stdout}");
    }
}

#[test]
fn validate_reports_a_pointer_for_bad_input() {
    let dir = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(config("tiny.json")).unwrap().replace("\"eta\": 0.3", "\"eta\": -1.0");
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, text).unwrap();
    let out = Command::new(BIN).args(["validate", "--config", bad.to_str().unwrap()]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("/control/eta"), "{stderr}");
}

#[test]
fn same_config_and_seed_give_identical_reports() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let cfg = config("tiny.json");
    for dir in [&a, &b] {
        let (code, _) = run(&["solve", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap(), "--seed", "3"]);
        assert_eq!(code, 0);
    }
    let (ra, rb) = (reports(a.path()), reports(b.path()));
    assert!(ra.iter().any(|(n, _)| n == "tiny.solve.json"), "{:?}", ra.iter().map(|r| &r.0).collect::<Vec<_>>());
    assert_eq!(ra, rb);
    assert!(a.path().join("tiny.solve.timing.json").exists());
}

#[test]
fn seed_override_reaches_the_report() {
    let out = tempfile::tempdir().unwrap();
    let cfg = config("tiny.json");
    let (code, _) = run(&["lipschitz", "--config", cfg.to_str().unwrap(), "--out", out.path().to_str().unwrap(), "--seed", "42", "--workers", "1"]);
    assert_eq!(code, 0);
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(out.path().join("tiny.lipschitz.json")).unwrap()).unwrap();
    assert_eq!(report["provenance"]["seed"], 42);
}

#[test]
fn plot_data_from_written_reports() {
    let runs = tempfile::tempdir().unwrap();
    let plots = tempfile::tempdir().unwrap();
    let cfg = config("tiny.json");
    let (code, _) = run(&["grad-check", "--config", cfg.to_str().unwrap(), "--out", runs.path().to_str().unwrap()]);
    assert!(code == 0 || code == 2);
    let report = runs.path().join("tiny.grad-check.json");
    let (code, _) = run(&["emit-plot-data", "--out", plots.path().to_str().unwrap(), report.to_str().unwrap()]);
    assert_eq!(code, 0);
    let csv = std::fs::read_to_string(plots.path().join("tiny.grad-check.fd.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("eps,direction_id,rel_error"));
}

#[test]
fn missing_config_is_an_error() {
    let out = tempfile::tempdir().unwrap();
    let (code, _) = run(&["solve", "--config", "/nonexistent.json", "--out", out.path().to_str().unwrap()]);
    assert_eq!(code, 1);
}
