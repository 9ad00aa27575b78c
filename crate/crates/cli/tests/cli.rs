use std::process::{Command, Output};

use serde_json::Value;

const BIN: &str = env!("CARGO_BIN_EXE_steinlab");

fn model(name: &str) -> String {
    format!("{}/../../models/{name}", env!("CARGO_MANIFEST_DIR"))
}

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

fn json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

#[test]
fn regression_on_deterministic_preset_passes() {
    let out = run(&["verify-regression", "--model", &model("combinatorial_n3_deterministic.json"), "--functional", "lin:coord=1,t=1"]);
    assert_eq!(out.status.code(), Some(0));
    let v = json(&out);
    let max = v["estimates"].as_array().unwrap().iter().find(|e| e["name"] == "max_residual").unwrap();
    assert!(max["value"].as_f64().unwrap() < 1e-12);
}

#[test]
fn regression_on_small_graph_passes() {
    let out = run(&["verify-regression", "--model", r#"{"model":"graph","n":3,"p":0.5}"#]);
    assert_eq!(out.status.code(), Some(0));
}

#[test]
fn regression_rejects_large_models() {
    let out = run(&["verify-regression", "--model", r#"{"model":"graph","n":40,"p":0.3}"#]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("exceeds the limit"));
}

#[test]
fn usage_errors_exit_with_two() {
    let graph = model("graph_n32.json");
    for args in [
        vec!["distance", "--model", graph.as_str(), "--samples", "0"],
        vec!["distance", "--model", graph.as_str(), "--functional", "lin:coords=1,2,t=1"],
        vec!["distance", "--model", "/nonexistent/model.json"],
        vec!["bound", "--model", r#"{"model":"graph","n":2,"p":0.3}"#],
        vec!["coupling", "--bogus-flag"],
        vec!["simulate", "--model", graph.as_str(), "--times", "3/2"],
    ] {
        let out = run(&args);
        assert_eq!(out.status.code(), Some(2), "{args:?}");
    }
}

#[test]
fn failing_check_exits_with_one() {
    let out = run(&[
        "stein-identity",
        "--model",
        &model("graph_n7.json"),
        "--functional",
        "cos:coords=1,2,t=3/4,1,scale=8",
        "--scale",
        "1.1",
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(json(&out)["pass"], false);
}

#[test]
fn distance_on_graph_passes() {
    let out = run(&["distance", "--model", &model("graph_n32.json"), "--functional", "sin:coords=1,2,t=1/2,1,scale=4", "--samples", "20000", "--workers", "4"]);
    assert_eq!(out.status.code(), Some(0));
    let v = json(&out);
    assert_eq!(v["bounds"][0]["name"], "prelimit_bound[sin:coords=1,2,t=1/2,1,scale=4]");
}

#[test]
fn distance_on_iid_combinatorial_passes() {
    let out = run(&["distance", "--model", &model("combinatorial_n16_iid_gaussian.json"), "--samples", "20000", "--workers", "4"]);
    assert_eq!(out.status.code(), Some(0));
}

#[test]
fn coupling_reports_three_checks() {
    let out = run(&["coupling", "--n", "100", "--samples", "2000", "--workers", "2"]);
    assert_eq!(out.status.code(), Some(0));
    let v = json(&out);
    let names: Vec<&str> = v["checks"].as_array().unwrap().iter().map(|c| c["name"].as_str().unwrap()).collect();
    assert_eq!(names, ["coupling_dist", "coupling_dist_sq", "limit_norm_sq"]);
    let b = v["bounds"].as_array().unwrap();
    assert!((b[0]["value"].as_f64().unwrap() - 12.1444).abs() < 1e-3);
}

#[test]
fn bound_instantiation() {
    let out = run(&["bound", "--model", r#"{"model":"graph","n":100,"p":0.5}"#, "--gnorm", "1"]);
    assert_eq!(out.status.code(), Some(0));
    let v = json(&out);
    assert_eq!(v["bounds"][0]["value"].as_f64().unwrap(), 0.12);
    assert!((v["bounds"][1]["value"].as_f64().unwrap() - 207.13).abs() < 0.01);
}

#[test]
fn verify_covariance_defaults_and_degenerate_grid() {
    let out = run(&["verify-covariance", "--samples", "5000"]);
    assert_eq!(out.status.code(), Some(0));
    let out = run(&["verify-covariance", "--times", "0", "--samples", "100"]);
    assert_eq!(out.status.code(), Some(0));
    let v = json(&out);
    assert!(v["warnings"].as_array().unwrap().iter().any(|w| w.as_str().unwrap().contains("vacuous")));
    let out = run(&["verify-covariance", "--model", &model("combinatorial_n4_entries.json"), "--samples", "20000"]);
    assert_eq!(out.status.code(), Some(0));
}

#[test]
fn simulate_and_csv_output() {
    let dir = std::env::temp_dir().join(format!("steinlab-cli-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("sim.csv");
    let out = run(&[
        "simulate",
        "--model",
        &model("combinatorial_n4_entries.json"),
        "--samples",
        "20000",
        "--format",
        "csv",
        "--out",
        path.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0));
    assert!(out.stdout.is_empty());
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.starts_with("kind,name,value,stderr,ci95_lo,ci95_hi,pass,detail"));
    assert!(text.contains("\"dn_variance[t=1,c=1]\",,,,,true"));
    std::fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn stein_identity_passes_on_gaussian_law() {
    let out = run(&["stein-identity", "--model", &model("combinatorial_n3_deterministic.json"), "--samples", "50000", "--workers", "4"]);
    assert_eq!(out.status.code(), Some(0));
}

/// Re-running from the parameters recorded in a report reproduces it.
#[test]
fn report_round_trips_from_its_parameters() {
    let first = run(&["distance", "--model", &model("graph_n7.json"), "--samples", "3000", "--seed", "99"]);
    let v = json(&first);
    let params = &v["parameters"];
    let model_json = params["model"].to_string();
    let mut args = vec!["distance".to_string(), "--model".into(), model_json, "--samples".into(), params["samples"].to_string()];
    for f in params["functionals"].as_array().unwrap() {
        args.push("--functional".into());
        args.push(f.as_str().unwrap().into());
    }
    args.push("--seed".into());
    args.push(v["seed"].to_string());
    let second = Command::new(BIN).args(&args).output().unwrap();
    assert_eq!(first.stdout, second.stdout);
}

#[test]
fn help_documents_functional_language() {
    let out = run(&["distance", "--help"]);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("sin:coord=1,t=1"));
    assert!(text.contains("tanhprod:coords=1,2,t=1/2,1"));
}
