use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pitchcatch"))
        .args(args)
        .output()
        .expect("spawn pitchcatch")
}

fn preset(name: &str) -> Value {
    let out = run(&["config", "--preset", name]);
    assert!(out.status.success());
    serde_json::from_slice(&out.stdout).unwrap()
}

fn write_config(dir: &Path, name: &str, cfg: &Value) -> String {
    let path = dir.join(name);
    fs::write(&path, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    path.to_str().unwrap().to_owned()
}

#[test]
fn dmax_table() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("d");
    let out = run(&[
        "dmax",
        "--preset",
        "wr90_5m",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let text = fs::read_to_string(out_dir.join("dmax.csv")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(
        lines[0],
        "kappa_mhz,d_max_scan_ns2,d_max_law_ns2,relative_difference"
    );
    assert_eq!(lines.len(), 6);
    for l in &lines[1..] {
        let rel: f64 = l.split(',').nth(3).unwrap().parse().unwrap();
        assert!(rel.abs() < 0.02, "{l}");
    }
    assert!(out_dir.join("config.json").exists());
}

#[test]
fn invalid_config_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = preset("calibration_5m");
    cfg["link"]["length"] = (-1.0).into();
    let path = write_config(dir.path(), "bad.json", &cfg);
    let out = run(&[
        "emit",
        "--config",
        &path,
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));

    fs::write(dir.path().join("junk.json"), "{ not json").unwrap();
    let junk = dir.path().join("junk.json");
    let out = run(&["transfer", "--config", junk.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));

    let out = run(&["sweep", "--preset", "no_such_preset"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn starved_calibration_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = preset("calibration_5m");
    cfg["calibration"]["window"] = 0.01.into();
    cfg["calibration"]["steps"] = 4.into();
    let path = write_config(dir.path(), "tiny.json", &cfg);
    let out = run(&[
        "emit",
        "--config",
        &path,
        "--out",
        dir.path().join("o").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("insufficient"));
}

#[test]
fn emit_writes_calibration() {
    let dir = tempfile::tempdir().unwrap();
    let o = dir.path().join("e");
    let out = run(&[
        "emit",
        "--preset",
        "calibration_5m",
        "--out",
        o.to_str().unwrap(),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let summary: Value =
        serde_json::from_str(&fs::read_to_string(o.join("calibration.json")).unwrap()).unwrap();
    let k = summary["kappa_est_mhz"].as_f64().unwrap();
    assert!((k / 200.0 - 1.0).abs() < 1e-3, "{k}");
    let header = fs::read_to_string(o.join("calibration.csv")).unwrap();
    assert!(header.starts_with("t,re_2gamma_over_kappa_c"));
    assert!(o.join("emission.csv").exists());
}

#[test]
fn transfer_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for o in [&a, &b] {
        let out = run(&[
            "transfer",
            "--preset",
            "wr90_5m",
            "--out",
            o.to_str().unwrap(),
        ]);
        assert!(
            out.status.success(),
            "{}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
    let ra = fs::read(a.join("results.csv")).unwrap();
    assert_eq!(ra, fs::read(b.join("results.csv")).unwrap());
    assert_eq!(
        fs::read(a.join("config.json")).unwrap(),
        fs::read(b.join("config.json")).unwrap()
    );
    assert_eq!(String::from_utf8(ra).unwrap().lines().count(), 4);
}

#[test]
fn sweep_streams_progress() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = preset("wr90_5m");
    cfg["sweep"]["kappa_mhz"] = serde_json::json!([100.0, 200.0]);
    cfg["protocol"]["strategies"] = serde_json::json!(["ideal_sech", "nonmarkov_corrected"]);
    cfg["protocol"]["step_doubling"] = false.into();
    let path = write_config(dir.path(), "s.json", &cfg);
    let o = dir.path().join("s");
    let out = run(&[
        "sweep",
        "--config",
        &path,
        "--out",
        o.to_str().unwrap(),
        "--workers",
        "2",
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let progress = fs::read_to_string(o.join("progress.jsonl")).unwrap();
    let results = fs::read_to_string(o.join("results.csv")).unwrap();
    assert_eq!(progress.lines().count(), 4);
    assert_eq!(results.lines().count(), 5);
    for l in progress.lines() {
        let v: Value = serde_json::from_str(l).unwrap();
        assert_eq!(v["status"], "ok");
    }
    let kappas: Vec<&str> = results
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap())
        .collect();
    assert_eq!(kappas, ["1e2", "1e2", "2e2", "2e2"]);
}

#[test]
fn pulse_writes_controls() {
    let dir = tempfile::tempdir().unwrap();
    let o = dir.path().join("p");
    let out = run(&["pulse", "--preset", "wr90_5m", "--out", o.to_str().unwrap()]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    for s in ["ideal_sech", "markov_corrected", "nonmarkov_corrected"] {
        for n in [1, 2] {
            assert!(o.join(format!("control_{s}_node{n}.csv")).exists());
        }
    }
}

#[test]
fn shipped_configs_match_presets() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for entry in fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        let name = path.file_stem().unwrap().to_str().unwrap().to_owned();
        let file: Value = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
        assert_eq!(file, preset(&name), "{name}");
    }
}
