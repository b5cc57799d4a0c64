use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

fn freqcal(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_freqcal")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Hourly CSV with `rows` rows; `value(t, c, rng)` fills channel `c`.
fn write_csv(path: &Path, rows: usize, channels: usize, mut value: impl FnMut(usize, usize, &mut ChaCha8Rng) -> f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut text = String::from("date");
    for c in 0..channels {
        write!(text, ",ch{c}").unwrap();
    }
    text.push('\n');
    for t in 0..rows {
        write!(text, "{t:08}").unwrap();
        for c in 0..channels {
            write!(text, ",{:.9}", value(t, c, &mut rng)).unwrap();
        }
        text.push('\n');
    }
    std::fs::write(path, text).unwrap();
}

fn ar1_csv(dir: &Path) -> PathBuf {
    let path = dir.join("ar1.csv");
    let mut state = [0.0f64; 2];
    write_csv(&path, 40_000, 2, |_, c, rng| {
        state[c] = 0.8 * state[c] + rng.random_range(-1.0..1.0);
        state[c]
    });
    path
}

fn seasonal_csv(dir: &Path) -> PathBuf {
    let path = dir.join("seasonal.csv");
    write_csv(&path, 1500, 2, |t, c, rng| {
        let w = 2.0 * std::f64::consts::PI * t as f64 / 24.0;
        (w + c as f64).sin() + 0.3 * (2.0 * w).cos() + 0.2 * rng.random_range(-1.0..1.0)
    });
    path
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn ridge_ols_on_ar1_generalizes_to_validation() {
    let dir = tempfile::tempdir().unwrap();
    let data = ar1_csv(dir.path());
    let out = dir.path().join("train");
    let o = freqcal(&["train", "--data", p(&data), "--lookback", "16", "--horizon", "4", "--out", p(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report = read_json(&out.join("train_report.json"));
    let (train, val) = (report["train_mse"].as_f64().unwrap(), report["val_mse"].as_f64().unwrap());
    assert!((val - train).abs() <= 0.05 * train, "train {train} val {val}");
    let model = read_json(&out.join("model.json"));
    assert_eq!(model["config_hash"], report["config_hash"]);
    assert_eq!(model["kind"], "ols");
}

#[test]
fn naive_forecaster_needs_no_fitting() {
    let dir = tempfile::tempdir().unwrap();
    let data = seasonal_csv(dir.path());
    let out = dir.path().join("naive");
    let o = freqcal(&["train", "--data", p(&data), "--forecaster", "naive", "--lookback", "24", "--horizon", "12", "--out", p(&out)]);
    assert!(o.status.success());
    let model = read_json(&out.join("model.json"));
    assert_eq!(model["kind"], "naive");
    assert!(model["arrays"].as_object().unwrap().is_empty());
}

#[test]
fn missing_inputs_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.csv");
    for cmd in ["train", "run", "audit"] {
        let o = freqcal(&[cmd, "--data", p(&missing)]);
        assert_eq!(o.status.code(), Some(2), "{cmd}");
        assert!(String::from_utf8_lossy(&o.stderr).contains("does not exist"));
    }
    assert_eq!(freqcal(&["run", "--data", p(&seasonal_csv(dir.path())), "--horizon", "0"]).status.code(), Some(2));
    assert_eq!(freqcal(&["diagnose", "--trace", p(&dir.path().join("x.bin"))]).status.code(), Some(2));
    assert_eq!(freqcal(&["run", "--mode", "streaming"]).status.code(), Some(2));
}

#[test]
fn params_prints_reference_counts() {
    let count = |args: &[&str]| stdout(&freqcal(args)).trim().to_string();
    assert_eq!(count(&["params", "--channels", "7", "--horizon", "96"]), "2758");
    assert_eq!(count(&["params", "--channels", "7", "--horizon", "192", "--no-input-calibration"]), "2723");
    assert_eq!(
        count(&["params", "--channels", "1", "--horizon", "96", "--adapter", "temporal_gcm", "--no-input-calibration"]),
        "9313"
    );
}

fn without_timing(mut v: Value) -> Value {
    v.as_object_mut().unwrap().remove("timing");
    v
}

#[test]
fn repeated_runs_write_identical_reports() {
    let dir = tempfile::tempdir().unwrap();
    let data = seasonal_csv(dir.path());
    let run = |name: &str| {
        let out = dir.path().join(name);
        let o = freqcal(&[
            "run", "--data", p(&data), "--lookback", "48", "--horizon", "24", "--mode", "mixed_supervision",
            "--lr", "0.01", "--steps", "2", "--out", p(&out),
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        out
    };
    let (a, b) = (run("a"), run("b"));
    let (ra, rb) = (read_json(&a.join("report.json")), read_json(&b.join("report.json")));
    assert_eq!(without_timing(ra.clone()), without_timing(rb));
    assert_eq!(std::fs::read(a.join("windows.csv")).unwrap(), std::fs::read(b.join("windows.csv")).unwrap());

    let hash = ra["config_hash"].as_str().unwrap().to_string();
    assert_eq!(hash.len(), 64);
    for file in ["report.csv", "trace.json", "batches.csv", "windows.csv", "adapter.json"] {
        let text = std::fs::read_to_string(a.join(file)).unwrap();
        assert!(text.contains(&hash), "{file} lacks the config hash");
    }
}

#[test]
fn config_file_with_flag_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let data = seasonal_csv(dir.path());
    let cfg = dir.path().join("exp.toml");
    std::fs::write(
        &cfg,
        format!(
            "data = {:?}\nlookback = 48\nhorizon = 24\nmode = \"matured_only\"\nbatch_rule = \"fixed:8\"\n",
            p(&data)
        ),
    )
    .unwrap();
    let out = dir.path().join("o");
    let o = freqcal(&["run", "--config", p(&cfg), "--mode", "frozen", "--out", p(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report = read_json(&out.join("report.json"));
    assert_eq!(report["mode"], "frozen");
    assert_eq!(report["config"]["batch_rule"], "fixed:8");
    assert_eq!(report["updates"], 0);
    assert_eq!(report["mse"], report["frozen_mse"]);
}

#[test]
fn audit_reports_streaming_overlap_and_clean_matured_plan() {
    let dir = tempfile::tempdir().unwrap();
    let data = seasonal_csv(dir.path());
    let out = dir.path().join("audit");
    let o = freqcal(&[
        "audit", "--data", p(&data), "--lookback", "48", "--horizon", "96", "--batch-rule", "fixed:24", "--out", p(&out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report = read_json(&out.join("audit.json"));
    assert!(report["streaming"]["violations"].as_u64().unwrap() > 0);
    assert_eq!(report["matured_only"]["violations"], 0);
}

#[test]
fn diagnose_and_sweep() {
    let dir = tempfile::tempdir().unwrap();
    let data = seasonal_csv(dir.path());
    let mut configs = Vec::new();
    for (name, adapter) in [("fac", "fac"), ("dense", "temporal_gcm")] {
        let cfg = dir.path().join(format!("{name}.json"));
        let body = serde_json::json!({
            "data": p(&data), "lookback": 48, "horizon": 24, "adapter": adapter, "lr": 0.01, "batch_rule": "fixed:6",
        });
        std::fs::write(&cfg, body.to_string()).unwrap();
        configs.push(cfg);
    }
    let out = dir.path().join("sweep");
    let o = freqcal(&["sweep", "--jobs", "2", "--out", p(&out), p(&configs[0]), p(&configs[1])]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let table = std::fs::read_to_string(out.join("sweep.csv")).unwrap();
    assert_eq!(table.lines().count(), 3);

    let diag = dir.path().join("diag");
    let trace = out.join("000_fac").join("trace.bin");
    let o = freqcal(&["diagnose", "--trace", p(&trace), "--out", p(&diag)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let spectrum = std::fs::read_to_string(diag.join("trace_spectrum.csv")).unwrap();
    assert!(spectrum.starts_with("# config_hash="));
    assert_eq!(spectrum.lines().filter(|l| !l.starts_with('#')).count(), 1 + 12);
    let curves = std::fs::read_to_string(diag.join("trace_early_late.csv")).unwrap();
    assert_eq!(curves.lines().filter(|l| !l.starts_with('#')).count(), 1 + 6);
    assert!(std::fs::read_to_string(diag.join("trace_spectrum.svg")).unwrap().contains("config_hash"));
}
