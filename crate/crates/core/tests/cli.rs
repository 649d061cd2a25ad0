use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sdlab::config::ExperimentConfig;
use sdlab::report::Manifest;

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn sdlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sdlab"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn oracle_config() -> String {
    configs().join("point_oracle.toml").display().to_string()
}

#[test]
fn usage_and_config_errors_exit_with_two() {
    assert_eq!(sdlab(&["no-such-verb"]).status.code(), Some(2));
    assert_eq!(sdlab(&["distill", "--config", "/nonexistent/cfg.toml"]).status.code(), Some(2));
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x").display().to_string();
    let cfg = oracle_config();
    let bad_key = sdlab(&["distill", "--config", &cfg, "--set", "run.itterations=3", "--out", &out]);
    assert_eq!(bad_key.status.code(), Some(2));
    let bad_value = sdlab(&["distill", "--config", &cfg, "--set", "objective.eta=2.0", "--out", &out]);
    assert_eq!(bad_value.status.code(), Some(2));
    assert_eq!(sdlab(&["--help"]).status.code(), Some(0));
}

#[test]
fn overrides_and_seed_flag_win_over_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = sdlab(&[
        "distill",
        "--config",
        &oracle_config(),
        "--set",
        "run.iterations=15",
        "--set",
        "objective.eta=0.2",
        "--seed",
        "4",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let cfg = ExperimentConfig::load(&out.join("config.toml")).unwrap();
    assert_eq!(cfg.run.iterations, 15);
    assert_eq!(cfg.objective.eta, 0.2);
    assert_eq!(cfg.run.seed, 4);
    let metrics = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 16);
    assert!(out.join("record.json").exists());
}

#[test]
fn ablate_writes_one_directory_per_value_and_a_table() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sweep");
    let o = sdlab(&[
        "ablate",
        "--config",
        &oracle_config(),
        "--set",
        "run.iterations=10",
        "--axis",
        "objective.eta",
        "--values",
        "0,0.1,0.2",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let mut runs: Vec<String> = std::fs::read_dir(&out)
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .collect();
    runs.sort();
    assert_eq!(runs.len(), 3, "{runs:?}");
    for r in &runs {
        assert!(out.join(r).join("metrics.csv").exists());
    }
    let table = std::fs::read_to_string(out.join("comparison.csv")).unwrap();
    assert_eq!(table.lines().count(), 4);
    let manifest = Manifest::load(&out.join("manifest.json")).unwrap();
    assert!(manifest.files.iter().any(|f| f.file == "comparison.csv"));
}

#[test]
fn ablate_on_an_unknown_axis_runs_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sweep");
    let o = sdlab(&[
        "ablate",
        "--config",
        &oracle_config(),
        "--axis",
        "objective.nope",
        "--values",
        "1,2",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
    let subdirs = std::fs::read_dir(&out)
        .map(|d| d.filter_map(|e| e.ok()).filter(|e| e.path().is_dir()).count())
        .unwrap_or(0);
    assert_eq!(subdirs, 0);
}

#[test]
fn report_collects_finished_runs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = oracle_config();
    let mut runs = Vec::new();
    for kind in ["SDS", "ASD"] {
        let out = dir.path().join(kind);
        let o = sdlab(&[
            "distill",
            "--config",
            &cfg,
            "--set",
            "run.iterations=12",
            "--set",
            &format!("objective.kind={kind}"),
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(o.status.code(), Some(0));
        runs.push(out.display().to_string());
    }
    let rep = dir.path().join("report");
    let mut args = vec!["report", "--out", rep.to_str().unwrap()];
    args.extend(runs.iter().map(String::as_str));
    let o = sdlab(&args);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let table = std::fs::read_to_string(rep.join("grad_norms.csv")).unwrap();
    assert!(table.contains("SDS") && table.contains("ASD"));
    assert!(rep.join("manifest.json").exists());
}
