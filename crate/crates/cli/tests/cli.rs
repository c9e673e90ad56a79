use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn emfg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_emfg")).args(args).output().expect("binary runs")
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn out_arg(dir: &Path) -> String {
    dir.to_str().unwrap().to_string()
}

fn market_json(lambda_perm: f64) -> String {
    format!(
        r#"{{"sigma": 0.1, "lambda_perm": {lambda_perm}, "a_temp": 0.1, "phi_urgency": 0.1,
            "psi_terminal": 1.0, "T": 1.0, "F0": 100.0, "q0": 1.0}}"#
    )
}

#[test]
fn solve_decoupled_writes_report_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = emfg(&["solve", "builtin:decoupled-scalar", "--out", &out_arg(dir.path())]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let report = read_json(&dir.path().join("stability_report.json"));
    assert!(report["residual"].as_f64().unwrap() < 1e-8);
    assert_eq!(report["stable"], Value::Bool(true));
    assert!(dir.path().join("meanfield_solution.json").exists());
    assert!(dir.path().join("spec.json").exists());
    let manifest = read_json(&dir.path().join("run_manifest.json"));
    assert_eq!(manifest["spec_path"], "builtin:decoupled-scalar");
    assert_eq!(manifest["seed"], 0);
}

#[test]
fn unstable_spec_exits_numerical() {
    let dir = tempfile::tempdir().unwrap();
    emfg(&["solve", "builtin:decoupled-scalar", "--out", &out_arg(dir.path())]);
    let mut spec = read_json(&dir.path().join("spec.json"));
    spec["subpops"][0]["F"] = serde_json::json!([[5.0]]);
    let path = dir.path().join("unstable.json");
    fs::write(&path, spec.to_string()).unwrap();
    let out_dir = dir.path().join("run");
    let out = emfg(&["solve", path.to_str().unwrap(), "--out", &out_arg(&out_dir)]);
    assert_eq!(out.status.code(), Some(2));
    let err: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert!(err["message"].as_str().unwrap().contains("consistency iteration diverged"));
    assert_eq!(read_json(&out_dir.join("error.json"))["exit_code"], 2);
}

#[test]
fn missing_and_malformed_inputs_exit_usage() {
    let dir = tempfile::tempdir().unwrap();
    let out = emfg(&["solve", "/definitely/not/here.json", "--out", &out_arg(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"sigma": "x"}"#).unwrap();
    let out = emfg(&["trade", "learn", bad.to_str().unwrap(), "--out", &out_arg(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
    let out = emfg(&["experiment", "bogus", "builtin:scalar-coe"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn coe_estimate_near_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = emfg(&["experiment", "coe", "builtin:scalar-coe", "--reps", "2000", "--out", &out_arg(dir.path())]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let s = read_json(&dir.path().join("coe_summary.json"));
    let est = s["coe"]["estimate"].as_f64().unwrap();
    let se = s["coe"]["std_err"].as_f64().unwrap();
    assert!((est - 1.0).abs() < 4.0 * se, "{est} ± {se}");
}

#[test]
fn lambda_sweep_is_monotone() {
    let dir = tempfile::tempdir().unwrap();
    let out = emfg(&["experiment", "lambda-sweep", "builtin:scalar-coe", "--reps", "1000", "--out", &out_arg(dir.path())]);
    assert_eq!(out.status.code(), Some(0));
    let s = read_json(&dir.path().join("lambda-sweep_summary.json"));
    assert_eq!(s["monotone_in_magnitude"], Value::Bool(true));
    assert_eq!(s["points"].as_array().unwrap().len(), 7);
}

#[test]
fn nash_with_equilibrium_family_is_zero() {
    let dir = tempfile::tempdir().unwrap();
    let args = [
        "experiment", "nash", "builtin:coupled", "--family", "equilibrium", "--Ns", "4,8", "--reps", "2", "--out",
    ];
    let mut all: Vec<&str> = args.to_vec();
    let o = out_arg(dir.path());
    all.push(&o);
    let out = emfg(&all);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(dir.path().join("nash.csv")).unwrap();
    for line in csv.lines().skip(1).filter(|l| l.starts_with("nash,")) {
        assert_eq!(line.split(',').nth(4), Some("0"), "{line}");
    }
}

#[test]
fn experiments_are_byte_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let base = ["experiment", "coupling-gap", "builtin:coupled", "--Ns", "4,16", "--reps", "4", "--seed", "7"];
    let mut first = base.to_vec();
    let oa = out_arg(a.path());
    first.extend(["--out", &oa]);
    let mut second = base.to_vec();
    let ob = out_arg(b.path());
    second.extend(["--out", &ob, "--sequential"]);
    assert_eq!(emfg(&first).status.code(), Some(0));
    assert_eq!(emfg(&second).status.code(), Some(0));
    let ca = fs::read(a.path().join("coupling-gap.csv")).unwrap();
    let cb = fs::read(b.path().join("coupling-gap.csv")).unwrap();
    assert_eq!(ca, cb);
}

#[test]
fn learning_from_truth_keeps_gains() {
    let dir = tempfile::tempdir().unwrap();
    let params = dir.path().join("market.json");
    fs::write(&params, market_json(0.05)).unwrap();
    let out = emfg(&["trade", "learn", params.to_str().unwrap(), "--out", &out_arg(dir.path())]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let trace = read_json(&dir.path().join("learning_trace.json"));
    let records = trace["records"].as_array().unwrap();
    assert_eq!(records.len(), 6);
    let g0 = records[0]["gain_q"].as_f64().unwrap();
    for r in records {
        assert!((r["gain_q"].as_f64().unwrap() - g0).abs() < 0.01 * g0.abs());
    }
    let csv = fs::read_to_string(dir.path().join("learning_trace.csv")).unwrap();
    assert!(csv.starts_with("iteration,sigma_hat,lambda_hat,a_hat,cost,n_rows\n"));
    assert!(dir.path().join("params.json").exists());
}

#[test]
fn simulate_without_impact_is_martingale() {
    let dir = tempfile::tempdir().unwrap();
    let params = dir.path().join("market.json");
    fs::write(&params, market_json(0.0)).unwrap();
    let out = emfg(&["trade", "simulate", params.to_str().unwrap(), "--out", &out_arg(dir.path())]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let s = read_json(&dir.path().join("market_summary.json"));
    assert_eq!(s["martingale_ok"], Value::Bool(true));
}
