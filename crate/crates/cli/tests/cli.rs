use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_siamtst"));
    c.env("SIAMTST_THREADS", "1").env("RUST_LOG", "warn");
    c
}

fn run(args: &[&str], dir: &Path) -> Output {
    bin()
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str], dir: &Path) -> Output {
    let out = run(args, dir);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn write_config(dir: &Path, extra: Value) -> PathBuf {
    let mut cfg = json!({
        "seed": 3,
        "data": {"synthetic": {"sectors": 2, "hours": 800, "seed": 4}},
        "horizons": [24],
        "model": {"context_len": 48, "d_model": 8, "n_heads": 2, "n_layers": 1},
        "pretrain": {"epochs": 2, "stride": 12},
        "finetune": {"epochs": 2},
        "linearnet": {"epochs": 2},
        "train_stride": 6,
        "eval_stride": 6,
        "e2": {"sector_counts": [1, 2], "targets": 1, "multi_epochs": 2}
    });
    if let (Some(base), Some(more)) = (cfg.as_object_mut(), extra.as_object()) {
        for (k, v) in more {
            base.insert(k.clone(), v.clone());
        }
    }
    let path = dir.join("config.json");
    fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

fn sorted_files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .flatten()
        .filter(|e| e.path().is_file())
        .map(|e| {
            (
                e.file_name().to_string_lossy().into_owned(),
                fs::read(e.path()).unwrap(),
            )
        })
        .collect();
    v.sort();
    v
}

#[test]
fn usage_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(&["frobnicate"], dir.path()).status.code(), Some(1));
    assert_eq!(run(&["finetune"], dir.path()).status.code(), Some(1));
    assert_eq!(run(&["--help"], dir.path()).status.code(), Some(0));
}

#[test]
fn runtime_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["--config", "missing.json", "generate"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));
    let cfg = write_config(dir.path(), json!({"horizons": []}));
    let out = run(&["--config", cfg.to_str().unwrap(), "e1"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn generate_writes_one_csv_per_sector_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), json!({}));
    let c = cfg.to_str().unwrap();
    ok(
        &["--config", c, "--seed", "7", "--out", "a", "generate"],
        dir.path(),
    );
    ok(
        &["--config", c, "--seed", "7", "--out", "b", "generate"],
        dir.path(),
    );
    ok(
        &["--config", c, "--seed", "8", "--out", "c", "generate"],
        dir.path(),
    );
    let a = sorted_files(&dir.path().join("a"));
    let names: Vec<&str> = a.iter().map(|f| f.0.as_str()).collect();
    assert_eq!(names, ["sector_000.csv", "sector_001.csv"]);
    assert_eq!(a, sorted_files(&dir.path().join("b")));
    assert_ne!(a, sorted_files(&dir.path().join("c")));
    let text = String::from_utf8(a[0].1.clone()).unwrap();
    assert!(text.starts_with("time_period,sector_id,"));
    assert_eq!(text.lines().count(), 801);
}

#[test]
fn pipeline_from_pretraining_to_evaluation() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = write_config(d, json!({}));
    let c = cfg.to_str().unwrap();
    ok(
        &[
            "--config",
            c,
            "--out",
            "run",
            "pretrain",
            "--sector",
            "sector_001",
        ],
        d,
    );
    let ckpt: Value =
        serde_json::from_str(&fs::read_to_string(d.join("run/backbone.json")).unwrap()).unwrap();
    assert_eq!(ckpt["format"], "siamtst-checkpoint");
    assert_eq!(ckpt["kind"], "backbone");
    let log = fs::read_to_string(d.join("run/pretrain_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 3);

    ok(
        &[
            "--config",
            c,
            "--out",
            "run",
            "finetune",
            "--checkpoint",
            "run/backbone.json",
            "--sector",
            "sector_001",
        ],
        d,
    );
    assert!(d.join("run/head_h24.json").exists());
    ok(
        &[
            "--config",
            c,
            "--out",
            "run",
            "forecast",
            "--checkpoint",
            "run/backbone.json",
            "--head",
            "run/head_h24.json",
            "--sector",
            "sector_001",
        ],
        d,
    );
    let out = ok(
        &[
            "--out",
            "run",
            "evaluate",
            "--predictions",
            "run/forecast.csv",
        ],
        d,
    );
    let m: Value = serde_json::from_slice(&out.stdout).unwrap();
    let (mae, mse) = (m["mae"].as_f64().unwrap(), m["mse"].as_f64().unwrap());
    assert!(mae > 0.0 && mae <= mse.sqrt());
    assert!(d.join("run/metrics.json").exists());

    ok(
        &[
            "--config",
            c,
            "--out",
            "run",
            "baseline",
            "persistence",
            "--sector",
            "sector_001",
        ],
        d,
    );
    ok(
        &[
            "--config",
            c,
            "--out",
            "run",
            "baseline",
            "linearnet",
            "--sector",
            "sector_001",
        ],
        d,
    );
    ok(
        &[
            "--config",
            c,
            "--out",
            "run",
            "baseline",
            "ridge",
            "--checkpoint",
            "run/backbone.json",
            "--sector",
            "sector_001",
        ],
        d,
    );
    for f in [
        "forecast_persistence_h24.csv",
        "forecast_linearnet_h24.csv",
        "forecast_ridge_h24.csv",
        "linearnet_h24.json",
    ] {
        assert!(d.join("run").join(f).exists(), "{f}");
    }
    // ridge without a backbone is a runtime error
    let out = run(&["--config", c, "--out", "run", "baseline", "ridge"], d);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn csv_input_matches_synthetic_input() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = write_config(d, json!({}));
    let c = cfg.to_str().unwrap();
    ok(&["--config", c, "--out", "data", "generate"], d);
    let from_csv = write_config(d, json!({"data": {"csv": d.join("data")}}));
    fs::rename(&from_csv, d.join("csv.json")).unwrap();
    write_config(d, json!({}));
    ok(&["--config", c, "--out", "syn", "pretrain"], d);
    ok(&["--config", "csv.json", "--out", "csv", "pretrain"], d);
    let read = |p: &str| -> Value {
        serde_json::from_str(&fs::read_to_string(d.join(p)).unwrap()).unwrap()
    };
    assert_eq!(
        read("syn/backbone.json")["params"],
        read("csv/backbone.json")["params"]
    );
}

#[test]
fn experiment_reports_are_byte_identical_for_a_fixed_seed() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = write_config(d, json!({}));
    let c = cfg.to_str().unwrap();
    for out in ["r1", "r2"] {
        ok(&["--config", c, "--seed", "7", "--out", out, "e1"], d);
    }
    let r1 = sorted_files(&d.join("r1"));
    let names: Vec<&str> = r1.iter().map(|f| f.0.as_str()).collect();
    for f in [
        "aggregates.csv",
        "failures.csv",
        "results.csv",
        "summary.json",
        "trajectories.csv",
        "ttests.csv",
    ] {
        assert!(names.contains(&f), "{f} missing from {names:?}");
    }
    assert_eq!(r1, sorted_files(&d.join("r2")));
    let results =
        String::from_utf8(r1.iter().find(|f| f.0 == "results.csv").unwrap().1.clone()).unwrap();
    assert_eq!(results.lines().count(), 1 + 2 * 4);

    ok(
        &[
            "--out",
            "plots",
            "report",
            "--input",
            "r1",
            "--sector",
            "sector_000",
        ],
        d,
    );
    let plots = sorted_files(&d.join("plots"));
    let names: Vec<&str> = plots.iter().map(|f| f.0.as_str()).collect();
    assert_eq!(names, ["plot_forecasts.csv", "plot_metrics.csv"]);

    for out in ["e2a", "e2b"] {
        ok(&["--config", c, "--seed", "7", "--out", out, "e2"], d);
    }
    assert_eq!(sorted_files(&d.join("e2a")), sorted_files(&d.join("e2b")));
}
