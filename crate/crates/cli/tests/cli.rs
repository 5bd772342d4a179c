use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dshoot::prelude::*;
use dshoot_cli::config::RunConfig;
use dshoot_cli::output::{parse_trace_csv, trace_csv};
use serde_json::Value;

fn write_config(dir: &Path, name: &str, json: &str) -> PathBuf {
    let path = dir.join(format!("{name}.json"));
    std::fs::write(&path, json).unwrap();
    path
}

fn dshoot(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dshoot")).args(args).output().unwrap()
}

fn solve(dir: &Path, name: &str, json: &str) -> (Output, PathBuf) {
    let cfg = write_config(dir, name, json);
    let out = dir.join(name);
    let res = dshoot(&["solve", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    (res, out)
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn floats(v: &Value) -> Vec<f64> {
    v.as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect()
}

fn keys(v: &Value) -> BTreeSet<String> {
    v.as_object().unwrap().keys().cloned().collect()
}

#[test]
fn example1_solve_writes_all_files() {
    let tmp = tempfile::tempdir().unwrap();
    let (res, out) = solve(tmp.path(), "e1", r#"{"problem": "example1"}"#);
    assert_eq!(res.status.code(), Some(0), "{}", String::from_utf8_lossy(&res.stderr));
    let report = read_json(&out.join("report.json"));
    assert_eq!(report["converged"], Value::Bool(true));
    let p = floats(&report["p_final"]);
    for (a, b) in p.iter().zip([-3.5, 3.0, 0.0, 0.0]) {
        assert!((a - b).abs() <= 1e-3, "{p:?}");
    }
    let pi = floats(&report["pi_final"]);
    assert!((pi[0] - 3.0).abs() <= 1e-3 && (pi[1] + 2.5).abs() <= 1e-3);
    assert!(report["analytic_errors"]["lambda_sup"].as_f64().unwrap() <= 1e-3);

    let traj = std::fs::read_to_string(out.join("trajectory.csv")).unwrap();
    assert!(traj.starts_with("t,x_0,x_1,u_0\n"));
    let first: Vec<f64> = traj.lines().nth(1).unwrap().split(',').map(|x| x.parse().unwrap()).collect();
    assert_eq!(&first[..3], &[0.0, 1.0, 1.0]);
    let costates = std::fs::read_to_string(out.join("costates.csv")).unwrap();
    assert!(costates.starts_with("t,lambda_0,lambda_1\n"));
    // λ(0) = [3, 3.5]
    let l0: Vec<f64> = costates.lines().nth(1).unwrap().split(',').map(|x| x.parse().unwrap()).collect();
    assert!((l0[1] - 3.0).abs() < 1e-3 && (l0[2] - 3.5).abs() < 1e-3);
}

#[test]
fn trace_csv_round_trips_in_memory_trace() {
    let tmp = tempfile::tempdir().unwrap();
    let json = r#"{"problem": "brachistochrone", "parameterization": {"case": "case2"}, "stop": {"tau_max": 40}}"#;
    let (res, out) = solve(tmp.path(), "c2", json);
    assert_eq!(res.status.code(), Some(4));
    let text = std::fs::read_to_string(out.join("trace.csv")).unwrap();
    assert!(text.starts_with("tau,p_0,p_1,p_2,p_3,p_4,t_f,pi_0,pi_1,J,g_norm,residual_norm,V\n"));

    let run = RunConfig::parse(json).unwrap().resolve().unwrap();
    let b = &run.builtin;
    let mem = solve_evolution(run.mode, &b.problem, &run.par, &run.gains, &run.init, &run.stop, &run.settings).unwrap();
    let parsed = parse_trace_csv(&text).unwrap();
    assert_eq!(parsed.rows.len(), mem.trace.rows.len());
    for (a, b) in parsed.rows.iter().zip(&mem.trace.rows) {
        let bits = |r: &TraceRow| -> Vec<u64> {
            [r.tau, r.tf, r.j, r.g_norm, r.residual_norm, r.v]
                .into_iter()
                .chain(r.p.iter().copied())
                .chain(r.pi.iter().copied())
                .map(f64::to_bits)
                .collect()
        };
        assert_eq!(bits(a), bits(b));
    }
    assert_eq!(trace_csv(&parsed), text);
}

#[test]
fn report_schema_is_stable() {
    let tmp = tempfile::tempdir().unwrap();
    let configs = [
        ("a", r#"{"problem": "example1"}"#),
        ("b", r#"{"problem": "example1", "mode": "gradient_flow", "gains": {"k_theta": 10}}"#),
        ("c", r#"{"problem": "brachistochrone", "parameterization": {"case": "case4"}}"#),
        ("d", r#"{"problem": "brachistochrone", "stop": {"tau_max": 5}}"#),
    ];
    let mut sets = Vec::new();
    for (name, json) in configs {
        let (_, out) = solve(tmp.path(), name, json);
        sets.push(keys(&read_json(&out.join("report.json"))));
    }
    assert!(sets.windows(2).all(|w| w[0] == w[1]), "{sets:?}");
}

#[test]
fn brachistochrone_case4_terminal_time() {
    let tmp = tempfile::tempdir().unwrap();
    let (res, out) = solve(tmp.path(), "c4", r#"{"problem": "brachistochrone", "parameterization": {"case": "case4"}}"#);
    assert_eq!(res.status.code(), Some(0));
    let report = read_json(&out.join("report.json"));
    assert!((report["tf_final"].as_f64().unwrap() - 0.8165).abs() <= 1e-3);
    assert_eq!(report["mode"], "form2");
}

#[test]
fn config_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let (res, _) = solve(
        tmp.path(),
        "neg",
        r#"{"problem": "example1", "ode_inner": {"rel_tol": -1e-9, "abs_tol": 1e-11}}"#,
    );
    assert_eq!(res.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&res.stderr).contains("ode_inner.rel_tol"));
    for (name, json) in [("unknown", r#"{"problem": "nope"}"#), ("broken", r#"{"problem": "#)] {
        assert_eq!(solve(tmp.path(), name, json).0.status.code(), Some(2), "{name}");
    }
    let res = dshoot(&["solve", "--config", tmp.path().join("missing.json").to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(2));
}

#[test]
fn solver_error_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    let json = r#"{"problem": "example1", "ode_inner": {"rel_tol": 1e-9, "abs_tol": 1e-11, "max_steps": 1}}"#;
    assert_eq!(solve(tmp.path(), "budget", json).0.status.code(), Some(3));
}

#[test]
fn not_converged_exits_4_and_still_writes() {
    let tmp = tempfile::tempdir().unwrap();
    let (res, out) = solve(tmp.path(), "short", r#"{"problem": "example1", "stop": {"tau_max": 2}}"#);
    assert_eq!(res.status.code(), Some(4));
    let report = read_json(&out.join("report.json"));
    assert_eq!(report["converged"], Value::Bool(false));
    for f in ["trace.csv", "trajectory.csv", "costates.csv"] {
        assert!(out.join(f).exists(), "{f}");
    }
}

#[test]
fn batch_writes_one_directory_per_config() {
    let tmp = tempfile::tempdir().unwrap();
    let a = write_config(tmp.path(), "first", r#"{"problem": "example1"}"#);
    let b = write_config(tmp.path(), "second", r#"{"problem": "brachistochrone", "parameterization": {"case": "case1"}}"#);
    let out = tmp.path().join("batch");
    let res = dshoot(&[
        "solve",
        "--config",
        a.to_str().unwrap(),
        b.to_str().unwrap(),
        "--jobs",
        "2",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(res.status.code(), Some(0));
    assert_eq!(read_json(&out.join("first/report.json"))["problem"], "example1");
    assert_eq!(read_json(&out.join("second/report.json"))["problem"], "brachistochrone");
}

fn check(dir: &Path, name: &str, json: &str, what: &str) -> (Output, Value) {
    let cfg = write_config(dir, name, json);
    let out = dir.join(name);
    let res = dshoot(&["check", "--config", cfg.to_str().unwrap(), "--what", what, "--out", out.to_str().unwrap()]);
    let report = read_json(&out.join("checks.json"));
    (res, report)
}

#[test]
fn gradient_check_passes_on_example1() {
    let tmp = tempfile::tempdir().unwrap();
    let (res, report) = check(tmp.path(), "e1", r#"{"problem": "example1", "init": {"p": [0.5, -1, 0.2, 0.3]}}"#, "gradients");
    assert_eq!(res.status.code(), Some(0));
    assert!(report["gradients"]["f_rel_err"].as_f64().unwrap() < 1e-3);
    assert!(report["projection"].is_null());
}

#[test]
fn projection_check_passes_on_brachistochrone() {
    let tmp = tempfile::tempdir().unwrap();
    for case in ["case1", "case3"] {
        let json = format!(r#"{{"problem": "brachistochrone", "parameterization": {{"case": "{case}"}}}}"#);
        let (res, report) = check(tmp.path(), case, &json, "projection");
        assert_eq!(res.status.code(), Some(0), "{case}: {report}");
        assert!(report["projection"]["idempotence"].as_f64().unwrap() <= 1e-8);
        assert!(report["projection"]["orthogonality"].as_f64().unwrap() <= 1e-8);
    }
}

#[test]
fn corrupted_jacobian_fails_check() {
    let tmp = tempfile::tempdir().unwrap();
    let (res, report) = check(
        tmp.path(),
        "bad",
        r#"{"problem": "example1-corrupt-fx", "init": {"p": [0.5, -1, 0.2, 0.3]}}"#,
        "all",
    );
    assert_eq!(res.status.code(), Some(5));
    assert_eq!(report["passed"], Value::Bool(false));
    assert!(!report["failures"].as_array().unwrap().is_empty());
    assert!(String::from_utf8_lossy(&res.stderr).contains("gradients"));
}

#[test]
fn list_problems_names_all_builtins() {
    let res = dshoot(&["list-problems"]);
    assert_eq!(res.status.code(), Some(0));
    let text = String::from_utf8_lossy(&res.stdout);
    for name in dshoot::problems::NAMES {
        assert!(text.contains(name));
    }
}
