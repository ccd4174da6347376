use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn sarqc(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sarqc"))
        .args(args)
        .current_dir(cwd)
        .env_remove("SARQC_JOBS")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str], cwd: &Path) -> Output {
    let out = sarqc(args, cwd);
    assert!(
        out.status.success(),
        "sarqc {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

fn write_spec(dir: &Path, name: &str, v: Value) {
    fs::write(dir.join(name), v.to_string()).unwrap();
}

fn small_gen(dir: &Path, layers: usize) {
    write_spec(dir, "gen.json", serde_json::json!({"layers": layers, "d_out": 8, "d_in": 32, "n": 48}));
    ok(&["gen", "--spec", "gen.json", "--out", "g", "--seed", "11"], dir);
}

fn encode_f64(rows: u64, cols: u64, data: &[f64]) -> Vec<u8> {
    let mut b = b"SQTENSR1".to_vec();
    b.push(1);
    b.push(2);
    b.extend_from_slice(&rows.to_le_bytes());
    b.extend_from_slice(&cols.to_le_bytes());
    for v in data {
        b.extend_from_slice(&v.to_le_bytes());
    }
    b
}

fn dir_snapshot(dir: &Path, skip: &[&str]) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap())
        .filter(|e| !skip.contains(&e.file_name().to_str().unwrap()))
        .map(|e| (e.file_name().into_string().unwrap(), fs::read(e.path()).unwrap()))
        .collect();
    v.sort();
    v
}

#[test]
fn rtn_on_representable_layer_is_byte_identical() {
    let t = TempDir::new().unwrap();
    let d = t.path();
    // Every row spans 0..=15 with unit steps, so asymmetric 4-bit RTN is exact.
    let w: Vec<f64> = (0..2).flat_map(|r| (0..16).map(move |c| ((c * 7 + r * 3) % 16) as f64)).collect();
    let x: Vec<f64> = (0..16 * 4).map(|i| (i % 5) as f64 - 2.0).collect();
    let w_bytes = encode_f64(2, 16, &w);
    fs::write(d.join("w.sqt"), &w_bytes).unwrap();
    fs::write(d.join("x.sqt"), encode_f64(16, 4, &x)).unwrap();
    write_spec(
        d,
        "m.json",
        serde_json::json!({"schema": 1, "layers": [{"layer_id": "l0", "weights": "w.sqt", "calib": "x.sqt", "d_out": 2, "d_in": 16, "n": 4}]}),
    );
    ok(&["quantize", "--manifest", "m.json", "--method", "rtn", "--bits", "4", "--group-size", "16", "--mode", "asym", "--out", "o"], d);
    assert_eq!(fs::read(d.join("o/l0.dequant.sqt")).unwrap(), w_bytes);
}

#[test]
fn gbs_at_zero_lambda_matches_gptq() {
    let t = TempDir::new().unwrap();
    let d = t.path();
    small_gen(d, 2);
    ok(&["quantize", "--manifest", "g/manifest.json", "--method", "gptq", "--group-size", "8", "--out", "a"], d);
    ok(&["quantize", "--manifest", "g/manifest.json", "--method", "sarqc-gbs", "--lambda", "0", "--group-size", "8", "--out", "b"], d);
    for id in ["layer_000", "layer_001"] {
        for kind in ["codes", "scales", "zeros"] {
            let name = format!("{id}.{kind}.sqt");
            assert_eq!(fs::read(d.join("a").join(&name)).unwrap(), fs::read(d.join("b").join(&name)).unwrap(), "{name}");
        }
    }
    let (ra, rb) = (read_json(&d.join("a/report.json")), read_json(&d.join("b/report.json")));
    for i in 0..2 {
        assert_eq!(ra["layers"][i]["losses"], rb["layers"][i]["losses"]);
        assert_eq!(ra["layers"][i]["heldout_risk"], rb["layers"][i]["heldout_risk"]);
    }
}

#[test]
fn gs_defaults_pick_from_default_grids() {
    let t = TempDir::new().unwrap();
    let d = t.path();
    small_gen(d, 1);
    ok(&["quantize", "--manifest", "g/manifest.json", "--method", "sarqc-gs", "--out", "o"], d);
    let r = read_json(&d.join("o/report.json"));
    let alpha = r["layers"][0]["alpha"].as_f64().unwrap();
    let lambda = r["layers"][0]["lambda"].as_f64().unwrap();
    assert!((0..=20).any(|k| alpha == k as f64 / 20.0), "alpha {alpha}");
    assert!((1..=10).any(|k| lambda == k as f64 / 10.0), "lambda {lambda}");
    assert_eq!(r["config"]["alpha_grid"].as_array().unwrap().len(), 21);
    assert_eq!(r["layers"][0]["selection"].as_array().unwrap().len(), 10);
}

#[test]
fn exit_codes() {
    let t = TempDir::new().unwrap();
    let d = t.path();
    assert_eq!(sarqc(&["verify", "--trials", "0"], d).status.code(), Some(2));
    assert_eq!(sarqc(&["verify", "--suite", "nope"], d).status.code(), Some(2));
    assert_eq!(sarqc(&["quantize", "--manifest", "missing.json", "--out", "o"], d).status.code(), Some(3));
    small_gen(d, 1);
    assert_eq!(
        sarqc(&["quantize", "--manifest", "g/manifest.json", "--lambda", "0.1", "--lambda-grid", "0.1,0.2", "--out", "o"], d)
            .status
            .code(),
        Some(2)
    );
    assert_eq!(sarqc(&["quantize", "--manifest", "g/manifest.json", "--bits", "1", "--out", "o"], d).status.code(), Some(2));

    // A declared shape that disagrees with the tensor header is rejected before any output is written.
    let mut m = read_json(&d.join("g/manifest.json"));
    m["layers"][0]["d_in"] = serde_json::json!(31);
    fs::write(d.join("g/bad.json"), m.to_string()).unwrap();
    assert_eq!(sarqc(&["quantize", "--manifest", "g/bad.json", "--out", "bad"], d).status.code(), Some(2));
    assert!(!d.join("bad").exists());

    fs::write(d.join("g/layer_000.calib.sqt"), b"garbage").unwrap();
    assert_eq!(sarqc(&["quantize", "--manifest", "g/manifest.json", "--out", "o"], d).status.code(), Some(3));
}

#[test]
fn verify_passes_and_detects_injected_fault() {
    let t = TempDir::new().unwrap();
    let d = t.path();
    ok(&["verify", "--suite", "compensation", "--trials", "100", "--out", "ok.json"], d);
    assert_eq!(read_json(&d.join("ok.json"))["pass"], Value::Bool(true));

    let out = sarqc(
        &["verify", "--suite", "compensation", "--trials", "100", "--inject-fault", "flip-compensation-sign", "--out", "bad.json"],
        d,
    );
    assert_eq!(out.status.code(), Some(1));
    let r = read_json(&d.join("bad.json"));
    assert_eq!(r["pass"], Value::Bool(false));
    assert_eq!(r["suites"][0]["suite"], "compensation");
    assert!(r["suites"][0]["counterexample"].is_object());
}

#[test]
fn gen_is_deterministic_and_feeds_quantize() {
    let t = TempDir::new().unwrap();
    let d = t.path();
    write_spec(d, "gen.json", serde_json::json!({"layers": 3, "d_out": 4, "d_in": 16, "n": 128}));
    ok(&["gen", "--spec", "gen.json", "--out", "a", "--seed", "5"], d);
    ok(&["gen", "--spec", "gen.json", "--out", "b", "--seed", "5", "--jobs", "1"], d);
    ok(&["gen", "--spec", "gen.json", "--out", "c", "--seed", "6"], d);
    let a = dir_snapshot(&d.join("a"), &[]);
    assert_eq!(a, dir_snapshot(&d.join("b"), &[]));
    assert_ne!(a, dir_snapshot(&d.join("c"), &[]));
    let m = read_json(&d.join("a/manifest.json"));
    assert_eq!(m["layers"][0]["n"], 128);
    ok(&["quantize", "--manifest", "a/manifest.json", "--method", "rtn", "--out", "q"], d);
}

#[test]
fn sweep_csv_is_deterministic_and_sorted() {
    let t = TempDir::new().unwrap();
    let d = t.path();
    write_spec(
        d,
        "spec.json",
        serde_json::json!({"layer": {"d_out": 8, "d_in": 32}, "n_calib": 32, "n_heldout": 256}),
    );
    let args = ["sweep", "--spec", "spec.json", "--lambda-grid", "1,0,0.1", "--seeds", "2", "--seed", "3", "--out"];
    ok(&[&args[..], &["a.csv"]].concat(), d);
    ok(&[&args[..], &["b.csv", "--jobs", "1"]].concat(), d);
    let a = fs::read_to_string(d.join("a.csv")).unwrap();
    assert_eq!(a, fs::read_to_string(d.join("b.csv")).unwrap());
    let lines: Vec<&str> = a.lines().collect();
    assert_eq!(lines[0], "lambda,gamma,recon,sar,drift,heldout_risk,method,seed");
    assert_eq!(lines.len(), 7);
    let keys: Vec<(u64, f64)> = lines[1..]
        .iter()
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[7].parse().unwrap(), f[0].parse().unwrap())
        })
        .collect();
    assert_eq!(keys, vec![(3, 0.0), (3, 0.1), (3, 1.0), (4, 0.0), (4, 0.1), (4, 1.0)]);

    ok(&["sweep", "--spec", "spec.json", "--lambda-grid", "0.5", "--method", "sarqc-gs", "--out", "one.csv"], d);
    let one = fs::read_to_string(d.join("one.csv")).unwrap();
    assert_eq!(one.lines().count(), 2);
    assert!(one.lines().nth(1).unwrap().starts_with("0.5,,"));
}

#[test]
fn sweep_on_manifest_layer() {
    let t = TempDir::new().unwrap();
    let d = t.path();
    small_gen(d, 2);
    assert_eq!(sarqc(&["sweep", "--manifest", "g/manifest.json", "--out", "s.csv"], d).status.code(), Some(2));
    ok(&["sweep", "--manifest", "g/manifest.json", "--layer", "layer_001", "--group-size", "8", "--lambda-grid", "0,1", "--out", "s.csv"], d);
    assert_eq!(fs::read_to_string(d.join("s.csv")).unwrap().lines().count(), 3);
}

#[test]
fn jobs_do_not_change_outputs() {
    let t = TempDir::new().unwrap();
    let d = t.path();
    small_gen(d, 4);
    let base = ["quantize", "--manifest", "g/manifest.json", "--method", "sarqc-gbs", "--group-size", "8"];
    ok(&[&base[..], &["--jobs", "1", "--out", "j1"]].concat(), d);
    ok(&[&base[..], &["--jobs", "8", "--out", "j8"]].concat(), d);
    let env = Command::new(env!("CARGO_BIN_EXE_sarqc"))
        .args([&base[..], &["--out", "je"]].concat())
        .current_dir(d)
        .env("SARQC_JOBS", "3")
        .status()
        .unwrap();
    assert!(env.success());
    let j1 = dir_snapshot(&d.join("j1"), &["timings.json"]);
    assert_eq!(j1, dir_snapshot(&d.join("j8"), &["timings.json"]));
    assert_eq!(j1, dir_snapshot(&d.join("je"), &["timings.json"]));
    assert!(d.join("j1/timings.json").exists());
}

#[test]
fn replay_reproduces_outputs() {
    let t = TempDir::new().unwrap();
    let d = t.path();
    small_gen(d, 2);
    ok(
        &["quantize", "--manifest", "g/manifest.json", "--method", "sarqc-gbs", "--bits", "3", "--group-size", "16", "--mode", "sym", "--lambda-grid", "0.1,0.5", "--seed", "9", "--out", "first"],
        d,
    );
    ok(&["quantize", "--replay", "first/report.json", "--out", "second"], d);
    assert_eq!(dir_snapshot(&d.join("first"), &["timings.json"]), dir_snapshot(&d.join("second"), &["timings.json"]));
}
