//! Integration tests for the `clfstab` binary: exit-code contract, JSON
//! error stream, artifact round-trips, and config-file merging.

use std::process::{Command, Output};

use tempfile::tempdir;

fn clfstab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_clfstab"))
        .args(args)
        .output()
        .expect("binary runs")
}

#[test]
fn zoo_list_and_show() {
    let out = clfstab(&["zoo", "list"]);
    assert!(out.status.success());
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let names: Vec<&str> = v["systems"]
        .as_array()
        .unwrap()
        .iter()
        .map(|s| s.as_str().unwrap())
        .collect();
    assert!(names.contains(&"artstein-circles"));
    assert!(names.contains(&"nonholonomic-integrator"));

    let out = clfstab(&["zoo", "show", "rigid-body-reduced"]);
    assert!(out.status.success());
    let desc: clfstab::systems::ZooDescription = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(desc.state_dim, 3);
    assert_eq!(desc.control_dim, 2);
    assert!(desc.affine);
}

#[test]
fn missing_args_exit_2_with_json_error() {
    let out = clfstab(&["simulate", "--system", "cubic-1d"]);
    assert_eq!(out.status.code(), Some(2));
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["kind"], "config");
    assert!(err["message"].as_str().unwrap().contains("--x0"));
}

#[test]
fn unknown_system_exit_2() {
    let out = clfstab(&["zoo", "show", "nope"]);
    assert_eq!(out.status.code(), Some(2));
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["kind"], "unknown_system");
}

#[test]
fn escape_exits_3_and_still_writes_artifact() {
    let dir = tempdir().unwrap();
    let csv = dir.path().join("escape.csv");
    let out = clfstab(&[
        "simulate",
        "--system",
        "unstable-1d",
        "--feedback",
        "zero",
        "--schedule",
        "uniform:0.01",
        "--x0",
        "1",
        "--horizon",
        "20",
        "--out",
        csv.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    let summary: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(summary["escaped"], true);
    assert!(csv.exists());
    let body = std::fs::read_to_string(&csv).unwrap();
    assert!(body.starts_with("t,x1,u1,is_sample\n"));
}

#[test]
fn malformed_config_exit_2_no_artifacts() {
    let dir = tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, "{\"schema\": 99, \"command\": \"simulate\", \"args\": {}}").unwrap();
    let csv = dir.path().join("never.csv");
    let out = clfstab(&[
        "simulate",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        csv.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!csv.exists());
}

#[test]
fn config_supplies_defaults_flags_override() {
    let dir = tempdir().unwrap();
    let cfg = dir.path().join("sim.json");
    std::fs::write(
        &cfg,
        serde_json::json!({
            "schema": 1,
            "command": "simulate",
            "args": {
                "system": "gas-not-iss",
                "feedback": "zero",
                "x0": "1",
                "horizon": 1.0,
                "step": 0.001
            }
        })
        .to_string(),
    )
    .unwrap();
    // config alone
    let out = clfstab(&["simulate", "--config", cfg.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let summary: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let x1 = summary["final_state"][0].as_f64().unwrap();
    assert!((x1 - (-1.0f64).exp()).abs() < 1e-6);
    // flag overrides the horizon from the file
    let out = clfstab(&[
        "simulate",
        "--config",
        cfg.to_str().unwrap(),
        "--horizon",
        "2",
    ]);
    let summary: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(summary["final_time"].as_f64().unwrap(), 2.0);
}

#[test]
fn clf_verify_strict_exit_4_and_report_reparses() {
    let dir = tempdir().unwrap();
    let json = dir.path().join("report.json");
    let out = clfstab(&[
        "clf-verify",
        "--system",
        "artstein-circles",
        "--clf",
        "artstein",
        "--region",
        "0.1:2",
        "--grid",
        "41",
        "--strict",
        "--out",
        json.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(4));
    let report: clfstab::clf::ClfRegionReport =
        serde_json::from_str(&std::fs::read_to_string(&json).unwrap()).unwrap();
    assert!(!report.passed());
    assert!(report.violations.iter().all(|v| v.x[0] == 0.0));
}

#[test]
fn check_brockett_fixture() {
    let out = clfstab(&["check-brockett", "--system", "nonholonomic-integrator"]);
    assert!(out.status.success());
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["status"], "fails_necessary_condition");
    // embedded verdicts re-parse into their producing type
    let probe: clfstab::obstructions::BrockettVerdict =
        serde_json::from_value(v["probe"].clone()).unwrap();
    assert!(probe.fails());
}

#[test]
fn brockett_linear_matrices() {
    let out = clfstab(&["brockett-linear", "--a", "0,1;0,0", "--b", "0;1"]);
    assert!(out.status.success());
    let verdict: clfstab::obstructions::BrockettVerdict =
        serde_json::from_slice(&out.stdout).unwrap();
    assert!(!verdict.fails());
}

#[test]
fn iss_fit_gain_table() {
    let out = clfstab(&[
        "iss-fit",
        "--system",
        "arctan-iiss",
        "--amplitudes",
        "0.2,0.5",
        "--x0-grid",
        "0;1",
        "--horizon",
        "20",
        "--step",
        "0.01",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: clfstab::iss::AgReport = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report.rows.len(), 2);
    assert!(report.rows.iter().all(|r| !r.escaped));
}

#[test]
fn lyap_verify_candidate_file() {
    let dir = tempdir().unwrap();
    let cand = dir.path().join("cand.json");
    // xdot = -x + u with V = x^2/2 and the half-split dissipation
    std::fs::write(
        &cand,
        serde_json::json!({
            "clf": {"kind": "quadratic", "c": 0.5},
            "dissipation": {"form": "iss", "alpha3": [0.5, 2.0], "gamma": [0.5, 2.0]}
        })
        .to_string(),
    )
    .unwrap();
    let out = clfstab(&[
        "lyap-verify",
        "--system",
        "gas-not-iss",
        "--candidate",
        cand.to_str().unwrap(),
        "--state-radius",
        "2",
        "--input-radius",
        "1",
    ]);
    // gas-not-iss is NOT ISS: the candidate must be flagged somewhere
    assert!(out.status.success());
    let report: clfstab::iss::LyapReport = serde_json::from_slice(&out.stdout).unwrap();
    assert!(!report.passed());

    // the genuinely ISS redesigned system passes with a matching candidate
    let cand2 = dir.path().join("cand2.json");
    std::fs::write(
        &cand2,
        serde_json::json!({
            "clf": {"kind": "quadratic", "c": 0.5},
            "dissipation": {"form": "implication", "alpha3": [1.0, 2.0], "rho": [2.0, 1.0]}
        })
        .to_string(),
    )
    .unwrap();
    let out = clfstab(&[
        "lyap-verify",
        "--system",
        "iss-redesigned-1d",
        "--candidate",
        cand2.to_str().unwrap(),
        "--state-radius",
        "3",
        "--input-radius",
        "1",
        "--strict",
    ]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stdout)
    );
}

#[test]
fn synthesize_exports_envelope_grid() {
    let dir = tempdir().unwrap();
    let grid = dir.path().join("env.csv");
    let out = clfstab(&[
        "synthesize",
        "--system",
        "artstein-circles",
        "--method",
        "proximal",
        "--clf",
        "artstein",
        "--alpha",
        "0.1",
        "--grid-points",
        "9",
        "--envelope-grid-out",
        grid.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let body = std::fs::read_to_string(&grid).unwrap();
    assert!(body.starts_with("x1,x2,Valpha\n"));
    assert_eq!(body.lines().count(), 1 + 81);
}

#[test]
fn envelope_check_flags_oversized_alpha() {
    let out = clfstab(&[
        "envelope-check",
        "--system",
        "artstein-circles",
        "--clf",
        "artstein",
        "--alpha",
        "2.0",
        "--r",
        "0.2",
        "--big-r",
        "2",
        "--grid",
        "15",
        "--strict",
    ]);
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn sweep_writes_cell_csv() {
    let dir = tempdir().unwrap();
    let csv = dir.path().join("cells.csv");
    let json = dir.path().join("report.json");
    // the 100x gap keeps this cheap: few intervals per cell
    let out = clfstab(&[
        "sweep-robustness",
        "--system",
        "artstein-circles",
        "--clf",
        "artstein",
        "--r",
        "0.2",
        "--big-r",
        "2",
        "--x0-count",
        "2",
        "--schedule-scales",
        "100",
        "--perturbations",
        "zero",
        "--csv-out",
        csv.to_str().unwrap(),
        "--out",
        json.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let body = std::fs::read_to_string(&csv).unwrap();
    assert_eq!(body.lines().count(), 1 + 2);
    let report: clfstab::sim::ExperimentReport =
        serde_json::from_str(&std::fs::read_to_string(&json).unwrap()).unwrap();
    assert_eq!(report.cells.len(), 2);
    assert!(report.cells.iter().all(|c| !c.band_compliant));
}

#[test]
fn sweep_rejects_empty_grid() {
    let out = clfstab(&[
        "sweep-robustness",
        "--system",
        "artstein-circles",
        "--x0-count",
        "0",
        "--schedule-scales",
        "1",
    ]);
    assert_eq!(out.status.code(), Some(2));
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert!(err["message"].as_str().unwrap().contains("empty"));
}
