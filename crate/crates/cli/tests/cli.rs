use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const SMALL: [&str; 6] = [
    "--set",
    "solver.grid_size=21",
    "--set",
    "solver.nodes_per_dim=3",
    "--set",
    r#"solver.method={"kind":"modified_policy","evaluations":500}"#,
];

fn ammlab(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ammlab"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn malformed_config_exits_2_with_location() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.json"), "{\"f\": 0.003,\n  \"eta\": }").unwrap();
    let o = ammlab(dir.path(), &["solve", "--config", "bad.json"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line 2"), "{}", stderr(&o));
}

#[test]
fn out_of_range_config_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.json"), r#"{"eta": 1.5}"#).unwrap();
    let o = ammlab(dir.path(), &["solve", "--config", "c.json"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("eta"));
}

#[test]
fn unknown_axis_lists_valid_ones() {
    let dir = tempfile::tempdir().unwrap();
    let o = ammlab(dir.path(), &["sweep", "--axis", "zeta", "--values", "0.1"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("sigmaA_fixed_sigma"));
}

#[test]
fn sweep_without_values_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let o = ammlab(dir.path(), &["sweep", "--axis", "muA"]);
    assert_eq!(o.status.code(), Some(2));
    let o = ammlab(dir.path(), &["sweep", "--axis", "f", "--range", "0.01:0.001:0.001"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn fee_sweep_writes_csv_and_json() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["sweep", "--axis", "f", "--range", "0.001:0.011:0.005", "--out", "o"];
    args.extend(SMALL);
    let o = ammlab(dir.path(), &args);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(dir.path().join("o/sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
    assert!(csv.starts_with("f,partner,expected_v0"));
    let json = read_json(&dir.path().join("o/sweep.json"));
    assert_eq!(json["result"]["points"].as_array().unwrap().len(), 3);
}

#[test]
fn simulate_is_deterministic_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let run = |out: &str, seed: &str, threads: &str| {
        let o = ammlab(
            dir.path(),
            &["simulate", "--steps", "200", "--seed", seed, "--threads", threads, "--out", out, "--format", "csv"],
        );
        assert!(o.status.success(), "{}", stderr(&o));
        std::fs::read_to_string(dir.path().join(out).join("trajectory.csv")).unwrap()
    };
    let a = run("a", "9", "1");
    let b = run("b", "9", "4");
    let c = run("c", "10", "1");
    assert_eq!(a, b);
    assert_ne!(a, c);
    assert_eq!(a.lines().count(), 201);
    assert!(!dir.path().join("a/trajectory.json").exists());
}

#[test]
fn simulate_rejects_start_outside_band() {
    let dir = tempfile::tempdir().unwrap();
    let o = ammlab(dir.path(), &["simulate", "--s0", "1.5"]);
    assert_eq!(o.status.code(), Some(2));
}

fn write_klines(path: &Path, closes: &[f64]) {
    let mut text = String::new();
    for (i, c) in closes.iter().enumerate() {
        let t = 1_600_000_000_000i64 + 3_600_000 * i as i64;
        text.push_str(&format!("{t},{c},{c},{c},{c},1.0,{},0,0,0,0,0\n", t + 3_599_999));
    }
    std::fs::write(path, text).unwrap();
}

#[test]
fn estimates_feed_back_into_a_config() {
    let dir = tempfile::tempdir().unwrap();
    let n = 200;
    let a: Vec<f64> = (0..n).map(|i| 100.0 * (0.001 * i as f64 + 0.01 * (i as f64).sin()).exp()).collect();
    let b: Vec<f64> = (0..n).map(|i| 50.0 * (0.0005 * i as f64 + 0.008 * (0.7 * i as f64).cos()).exp()).collect();
    write_klines(&dir.path().join("a.csv"), &a);
    write_klines(&dir.path().join("b.csv"), &b);
    let o = ammlab(dir.path(), &["estimate", "a.csv", "b.csv", "--out", "e"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let est = read_json(&dir.path().join("e/estimate.json"));
    assert_eq!(est["bars"], 200);
    let stdout: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(stdout, est);

    // The estimate file is itself a valid partial config.
    let mut args = vec!["simulate", "--config", "e/estimate.json", "--steps", "3", "--out", "s", "--format", "json"];
    args.extend(SMALL);
    let o = ammlab(dir.path(), &args);
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn estimate_reports_bad_rows() {
    let dir = tempfile::tempdir().unwrap();
    write_klines(&dir.path().join("a.csv"), &[1.0; 40]);
    std::fs::write(dir.path().join("b.csv"), "0,1,1,1,-1\n").unwrap();
    let o = ammlab(dir.path(), &["estimate", "a.csv", "b.csv"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("row 1"), "{}", stderr(&o));
}

#[test]
fn regression_recovers_a_line() {
    let dir = tempfile::tempdir().unwrap();
    let mut table = String::from("x,z,y\n");
    for i in 0..20 {
        let x = i as f64;
        let z = (i * i % 7) as f64;
        table.push_str(&format!("{x},{z},{}\n", 2.0 + 3.0 * x - 0.5 * z));
    }
    std::fs::write(dir.path().join("t.csv"), table).unwrap();
    let o = ammlab(dir.path(), &["regress", "t.csv", "--response", "y", "--regressors", "x,z", "--out", "r"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let r = read_json(&dir.path().join("r/regression.json"));
    let beta: Vec<f64> = r["coefficients"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
    for (got, want) in beta.iter().zip([2.0, 3.0, -0.5]) {
        assert!((got - want).abs() < 1e-9, "{beta:?}");
    }
    assert!((r["r_squared"].as_f64().unwrap() - 1.0).abs() < 1e-12);
}

#[test]
fn collinear_regressors_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let mut table = String::from("x,w,y\n");
    for i in 0..10 {
        table.push_str(&format!("{i},{},{}\n", 2 * i, i + 1));
    }
    std::fs::write(dir.path().join("t.csv"), table).unwrap();
    let o = ammlab(dir.path(), &["regress", "t.csv", "--response", "y", "--regressors", "x,w"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains('w'));
}

#[test]
fn solve_without_liquidity_traders_reports_no_investment() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["solve", "--set", "alpha=0", "--out", "o"];
    args.extend(SMALL);
    let o = ammlab(dir.path(), &args);
    assert!(o.status.success(), "{}", stderr(&o));
    let summary = read_json(&dir.path().join("o/summary.json"));
    assert_eq!(summary["invests"], false);
    assert_eq!(summary["message"], "LP does not invest on DEX");
    assert!(String::from_utf8_lossy(&o.stdout).contains("LP does not invest on DEX"));
    for f in ["value_function.csv", "policy.csv", "stationary.csv", "solution.json"] {
        assert!(dir.path().join("o").join(f).exists(), "{f}");
    }
}

#[test]
fn design_without_liquidity_traders_is_flagged() {
    let dir = tempfile::tempdir().unwrap();
    let mut args =
        vec!["design", "--set", "alpha=0", "--fees", "0.001,0.005", "--etas", "0.3,0.5", "--no-refine", "--out", "o"];
    args.extend(SMALL);
    let o = ammlab(dir.path(), &args);
    assert!(o.status.success(), "{}", stderr(&o));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("design irrelevant"), "{stdout}");
    let d = read_json(&dir.path().join("o/design.json"));
    assert_eq!(d["result"]["surface"].as_array().unwrap().len(), 4);
}

#[test]
fn solve_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["solve", "--out", "a", "--format", "csv"];
    args.extend(SMALL);
    assert!(ammlab(dir.path(), &args).status.success());
    args[2] = "b";
    args.extend(["--threads", "3"]);
    assert!(ammlab(dir.path(), &args).status.success());
    for f in ["value_function.csv", "policy.csv", "stationary.csv"] {
        let a = std::fs::read(dir.path().join("a").join(f)).unwrap();
        let b = std::fs::read(dir.path().join("b").join(f)).unwrap();
        assert_eq!(a, b, "{f}");
    }
}
