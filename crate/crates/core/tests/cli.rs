use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn data_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/uci")
}

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bnn-bmr"))
        .arg("--data-dir")
        .arg(data_dir())
        .args(args)
        .env_remove("SOURCE_DATE_EPOCH")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) {
    let out = run(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn train_prune_sweep_compare_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let p = |s: &str| dir.path().join(s).to_string_lossy().into_owned();
    ok(&["train", "--dataset", "boston", "--epochs", "15", "--out", &p("train")]);
    let report = json(&dir.path().join("train/report.json"));
    assert_eq!(report["pruning_rate"], 0.0);
    assert_eq!(report["n_train"].as_u64().unwrap() + report["n_test"].as_u64().unwrap(), 506);
    let manifest = json(&dir.path().join("train/manifest.json"));
    assert_eq!(manifest["timestamp"], serde_json::Value::Null);
    assert_eq!(manifest["dataset"]["name"], "boston");

    let snap = p("train/snapshot.json");
    ok(&["prune", "--snapshot", &snap, "--method", "bmr", "--out", &p("bmr")]);
    let pruned = json(&dir.path().join("bmr/report.json"));
    assert!(pruned["pruning_rate"].as_f64().unwrap() > 0.0);

    ok(&["prune", "--snapshot", &snap, "--method", "spr", "--rate", "0.25", "--out", &p("spr")]);
    let spr = json(&dir.path().join("spr/report.json"));
    assert!((spr["pruning_rate"].as_f64().unwrap() - 0.25).abs() < 0.01);

    ok(&["sweep", "--snapshot", &snap, "--step", "0.1", "--out", &p("sweep")]);
    let csv = std::fs::read_to_string(dir.path().join("sweep/sweep.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "rate,estimated_vfe,actual_vfe");
    assert_eq!(lines.len(), 12);
    let first: Vec<&str> = lines[1].split(',').collect();
    assert_eq!(first[1], first[2]);

    ok(&["compare", "--snapshot", &snap, "--methods", "bmr,snr", "--step", "0.25", "--out", &p("cmp")]);
    let csv = std::fs::read_to_string(dir.path().join("cmp/compare.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "rate,method,vfe");
    assert_eq!(csv.lines().count(), 11);
}

#[test]
fn region_export_has_the_grid() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("region");
    ok(&["region", "--out", out.to_str().unwrap()]);
    let csv = std::fs::read_to_string(out.join("region.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "mu,sigma,delta_f,snr,spr");
    assert_eq!(csv.lines().count(), 1 + 201 * 200);
    let report = json(&out.join("report.json"));
    let contour = report["zero_contour"].as_array().unwrap();
    for point in contour {
        let (s, mu) = (point["sigma"].as_f64().unwrap(), point["mu"].as_f64().unwrap());
        assert!((mu * mu + s * s * (s * s).ln()).abs() < 1e-9);
    }
}

#[test]
fn repeated_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let p = |s: &str| dir.path().join(s).to_string_lossy().into_owned();
    for name in ["a", "b"] {
        ok(&["iterate", "--dataset", "boston", "--mode", "sample-global", "--epochs", "10", "--retrain-epochs", "3", "--max-iterations", "3", "--out", &p(name)]);
    }
    for file in ["manifest.json", "report.json", "snapshot.json", "trained.json"] {
        let a = std::fs::read(dir.path().join("a").join(file)).unwrap();
        let b = std::fs::read(dir.path().join("b").join(file)).unwrap();
        assert!(a == b, "{file} differs");
    }
}

#[test]
fn bad_requests_fail_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x");
    let out = out.to_str().unwrap();
    let missing = run(&["train", "--dataset", "no-such-dataset", "--out", out]);
    assert!(!missing.status.success());
    assert!(String::from_utf8_lossy(&missing.stderr).contains("no-such-dataset"));

    let gru_moments = run(&["train", "--dataset", "sine", "--arch", "gru16", "--mode", "moments", "--out", out]);
    assert!(!gru_moments.status.success());

    ok(&["train", "--dataset", "boston", "--epochs", "1", "--out", out]);
    let snap = dir.path().join("x/snapshot.json");
    let snr = run(&["prune", "--snapshot", snap.to_str().unwrap(), "--method", "snr", "--out", out]);
    assert!(!snr.status.success(), "SNR pruning needs a rate");
    let step = run(&["sweep", "--snapshot", snap.to_str().unwrap(), "--step", "0.3", "--out", out]);
    assert!(!step.status.success());
}

#[test]
fn gru_on_a_waveform() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("gru");
    ok(&["iterate", "--dataset", "square", "--arch", "gru16", "--mode", "sample-local", "--epochs", "5", "--retrain-epochs", "2", "--max-iterations", "2", "--out", out.to_str().unwrap()]);
    let report = json(&out.join("report.json"));
    assert_eq!(report["architecture"], "gru16");
    assert!(report["start_vfe"]["total"].as_f64().unwrap().is_finite());
}
