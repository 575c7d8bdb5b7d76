use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use clion_core::harness::step_indices;
use serde_json::{json, Value};
use tempfile::TempDir;

fn clion(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_clion")).args(args).env_remove("CLION_OUT_DIR").output().unwrap()
}

fn write(dir: &Path, name: &str, v: &Value) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, serde_json::to_vec_pretty(v).unwrap()).unwrap();
    p
}

fn files_in(dir: &Path) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
    v.sort();
    v
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn quadratic_run() -> Value {
    json!({
        "problem": { "kind": "quadratic" },
        "data": { "generator": "quadratic-gauss", "n": 30, "dim": 4, "seed": 1 },
        "optimizer": { "method": "clion", "eta": 0.01, "lambda": 0.01 },
        "steps": 200
    })
}

fn twin(n: usize, replace_index: usize) -> Value {
    json!({
        "problem": { "kind": "logistic" },
        "data": { "generator": "two-cluster", "n": n, "dim": 5, "seed": 2 },
        "optimizer": { "method": "clion", "eta": 0.01, "lambda": 0.01, "nu": 0.05 },
        "steps": 40,
        "replace_index": replace_index,
        "index_seed": 3
    })
}

#[test]
fn missing_config_is_a_config_error_naming_the_path() {
    let out = clion(&["run", "/no/such/config.json"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("/no/such/config.json"));
}

#[test]
fn run_writes_csv_and_json_with_stamps() {
    let tmp = TempDir::new().unwrap();
    let cfg = write(tmp.path(), "run.json", &quadratic_run());
    let out_dir = tmp.path().join("out");
    let out = clion(&["run", cfg.to_str().unwrap(), "-o", out_dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let files = files_in(&out_dir);
    assert_eq!(files.len(), 2);
    let csv = fs::read_to_string(files.iter().find(|p| p.extension().unwrap() == "csv").unwrap()).unwrap();
    let mut lines = csv.lines();
    assert!(lines.next().unwrap().starts_with("# clion "));
    assert_eq!(lines.next().unwrap(), "t,train_loss,test_loss,grad_l1,w_norm,branch");
    let js: Value =
        serde_json::from_slice(&fs::read(files.iter().find(|p| p.extension().unwrap() == "json").unwrap()).unwrap())
            .unwrap();
    assert!(js["tool_version"].is_string());
    assert_eq!(js["config_hash"].as_str().unwrap().len(), 16);
    assert!(String::from_utf8_lossy(&out.stdout).contains("train_loss="));
}

#[test]
fn out_dir_comes_from_the_environment() {
    let tmp = TempDir::new().unwrap();
    let cfg = write(tmp.path(), "run.json", &quadratic_run());
    let out_dir = tmp.path().join("env-out");
    let out = Command::new(env!("CARGO_BIN_EXE_clion"))
        .args(["run", cfg.to_str().unwrap()])
        .env("CLION_OUT_DIR", &out_dir)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(files_in(&out_dir).len(), 2);
}

#[test]
fn negative_eta_override_is_rejected() {
    let tmp = TempDir::new().unwrap();
    let cfg = write(tmp.path(), "run.json", &quadratic_run());
    let out = clion(&["run", cfg.to_str().unwrap(), "--set", "optimizer.eta=-1", "-o", tmp.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("eta must be positive"));
}

#[test]
fn unknown_override_path_and_unknown_keys_are_rejected() {
    let tmp = TempDir::new().unwrap();
    let cfg = write(tmp.path(), "run.json", &quadratic_run());
    let out = clion(&["run", cfg.to_str().unwrap(), "--set", "optimizer.etaa=0.1"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("unknown config path 'optimizer.etaa'"));

    let mut bad = quadratic_run();
    bad["stepz"] = json!(3);
    let cfg = write(tmp.path(), "bad.json", &bad);
    let out = clion(&["run", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("stepz"));
}

#[test]
fn conflicting_verbosity_flags_are_rejected() {
    let tmp = TempDir::new().unwrap();
    let cfg = write(tmp.path(), "run.json", &quadratic_run());
    let out = clion(&["run", cfg.to_str().unwrap(), "-v", "-q"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn aborted_run_exits_3_and_keeps_a_snapshot() {
    let tmp = TempDir::new().unwrap();
    let cfg = json!({
        "problem": { "kind": "quadratic" },
        "data": { "generator": "quadratic-gauss", "n": 10, "dim": 3, "seed": 1 },
        "optimizer": { "method": "sgd", "eta": 3.0 },
        "steps": 3000
    });
    let cfg = write(tmp.path(), "run.json", &cfg);
    let out_dir = tmp.path().join("out");
    let out = clion(&["run", cfg.to_str().unwrap(), "-o", out_dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr(&out).contains("run aborted at step"));
    let snap = files_in(&out_dir).into_iter().find(|p| p.to_str().unwrap().ends_with("-aborted.json")).unwrap();
    let js: Value = serde_json::from_slice(&fs::read(snap).unwrap()).unwrap();
    assert_eq!(js["last_good"].as_array().unwrap().len(), 3);
}

#[test]
fn sweep_with_one_point_is_a_config_error() {
    let tmp = TempDir::new().unwrap();
    let cfg = write(tmp.path(), "s.json", &json!({ "twin": twin(20, 0), "n_grid": [20] }));
    let out = clion(&["stability", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("need ≥4 N values for slope fit"));
}

#[test]
fn sweep_json_has_slope_fields() {
    let tmp = TempDir::new().unwrap();
    let cfg =
        write(tmp.path(), "s.json", &json!({ "twin": twin(10, 0), "n_grid": [10, 20, 40, 80], "replicates": 10 }));
    let out_dir = tmp.path().join("out");
    let out = clion(&["stability", cfg.to_str().unwrap(), "-o", out_dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let json_path = files_in(&out_dir).into_iter().find(|p| p.extension().unwrap() == "json").unwrap();
    let js: Value = serde_json::from_slice(&fs::read(json_path).unwrap()).unwrap();
    for key in ["slope", "slope_stderr", "tau_joint"] {
        assert!(js["report"].get(key).is_some(), "missing {key}");
    }
}

#[test]
fn never_visited_index_reports_zero_divergence() {
    let n = 60;
    let visited: Vec<usize> = (1..=40).map(|t| step_indices(3, n, t, 1)[0]).collect();
    let i = (0..n).find(|i| !visited.contains(i)).unwrap();
    let tmp = TempDir::new().unwrap();
    let cfg = write(tmp.path(), "t.json", &json!({ "twin": twin(n, i) }));
    let out_dir = tmp.path().join("out");
    let out = clion(&["stability", cfg.to_str().unwrap(), "-o", out_dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let json_path = files_in(&out_dir).into_iter().find(|p| p.extension().unwrap() == "json").unwrap();
    let js: Value = serde_json::from_slice(&fs::read(json_path).unwrap()).unwrap();
    assert_eq!(js["final_divergence"], json!(0.0));
    assert_eq!(js["replaced_visits"], json!(0));
}

fn compare_spec() -> Value {
    json!({
        "base": {
            "problem": { "kind": "logistic" },
            "data": { "generator": "two-cluster", "n": 50, "dim": 4, "seed": 0 },
            "optimizer": { "method": "sgd", "eta": 0.1 },
            "steps": 100
        },
        "entries": [
            { "label": "lion", "optimizer": { "method": "lion", "eta": 0.001, "lambda": 0.01 } },
            { "label": "clion", "optimizer": { "method": "clion", "eta": 0.001, "lambda": 0.01, "nu": 0.001 } }
        ]
    })
}

#[test]
fn compare_table_schema() {
    let tmp = TempDir::new().unwrap();
    let cfg = write(tmp.path(), "c.json", &compare_spec());
    let out_dir = tmp.path().join("out");
    let out = clion(&["compare", cfg.to_str().unwrap(), "-o", out_dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let files = files_in(&out_dir);
    assert_eq!(files.len(), 3);
    let table = files
        .iter()
        .find(|p| p.to_str().unwrap().ends_with(".csv") && !p.to_str().unwrap().contains("curves"))
        .unwrap();
    let text = fs::read_to_string(table).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 4);
    assert!(lines[1].contains("nu") && lines[1].contains("branch_fraction"));
    assert!(lines[3].starts_with("clion,clion,"));

    let curves = fs::read_to_string(files.iter().find(|p| p.to_str().unwrap().contains("curves")).unwrap()).unwrap();
    let steps = |label: &str| -> Vec<String> {
        curves
            .lines()
            .skip(2)
            .filter(|l| l.starts_with(&format!("{label},")))
            .map(|l| l.split(',').nth(1).unwrap().to_string())
            .collect()
    };
    assert_eq!(steps("lion"), steps("clion"));
}

#[test]
fn compare_with_mismatched_problem_is_a_config_error() {
    let tmp = TempDir::new().unwrap();
    let mut spec = compare_spec();
    spec["entries"][1]["problem"] = json!({ "kind": "quadratic" });
    let cfg = write(tmp.path(), "c.json", &spec);
    let out = clion(&["compare", cfg.to_str().unwrap(), "-o", tmp.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn grid_output_is_identical_across_thread_counts() {
    let tmp = TempDir::new().unwrap();
    let spec = json!({
        "base": quadratic_run(),
        "axes": { "optimizer.eta": [0.001, 0.01, 0.05], "optimizer.nu": [0.001, 0.1] },
        "replicates": 2
    });
    let cfg = write(tmp.path(), "g.json", &spec);
    let mut outputs = Vec::new();
    for threads in ["1", "4"] {
        let dir = tmp.path().join(format!("t{threads}"));
        let out = clion(&["grid", cfg.to_str().unwrap(), "-o", dir.to_str().unwrap(), "--threads", threads]);
        assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
        outputs.push(files_in(&dir).iter().map(|p| fs::read(p).unwrap()).collect::<Vec<_>>());
    }
    assert_eq!(outputs[0], outputs[1]);
}

#[test]
fn diagnose_writes_report() {
    let tmp = TempDir::new().unwrap();
    let spec = json!({
        "run": {
            "problem": { "kind": "logistic" },
            "data": { "generator": "two-cluster", "n": 50, "dim": 4, "seed": 0 },
            "optimizer": { "method": "clion", "eta": 0.01, "lambda": 0.0001, "nu": 0.01 },
            "steps": 100
        },
        "replicates": 3,
        "twin": { "replace_index": 1 }
    });
    let cfg = write(tmp.path(), "d.json", &spec);
    let out_dir = tmp.path().join("out");
    let out = clion(&["diagnose", cfg.to_str().unwrap(), "-o", out_dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert!(String::from_utf8_lossy(&out.stdout).contains("sign_lipschitz_violations=0"));
    assert_eq!(files_in(&out_dir).len(), 2);
}
