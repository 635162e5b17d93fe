use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use surveyscope::ecv::{DeltaReport, TriageThresholds};
use surveyscope::evalcore::Metric;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_surveyscope")).args(args).output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synth(dir: &Path) {
    let o = run(&["synth", "--out", s(dir), "--seed", "3", "--n", "300"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

#[test]
fn missing_seed_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(&["synth", "--out", s(&tmp.path().join("x"))]);
    assert_eq!(o.status.code(), Some(2));
    let err: Value = serde_json::from_slice(&o.stderr).unwrap();
    assert_eq!(err["error"], "InvalidParameter");
}

#[test]
fn manifest_records_command_and_config() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data);
    let m = read_json(&data.join("manifest.json"));
    assert_eq!(m["command"], "synth");
    assert_eq!(m["config"]["seed"], 3);
    assert_eq!(m["config"]["n"], 300);
    assert!(m["config"].get("out").is_none());
}

#[test]
fn non_empty_output_directory_is_refused() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data);
    let o = run(&["synth", "--out", s(&data), "--seed", "3"]);
    assert_eq!(o.status.code(), Some(2));
    let err: Value = serde_json::from_slice(&o.stderr).unwrap();
    assert_eq!(err["error"], "Precondition");
    assert!(err["message"].as_str().unwrap().contains("not empty"));
}

#[test]
fn validate_reports_unknown_subdimension_as_error() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data);

    let clean = run(&["validate", "--out", s(&tmp.path().join("ok")), "--seed", "3", "--data", s(&data)]);
    assert_eq!(clean.status.code(), Some(0), "{}", String::from_utf8_lossy(&clean.stderr));
    assert!(tmp.path().join("ok/validation.json").exists());

    let mut w = read_json(&data.join("mapping.json"));
    let rows = w["rows"].as_array_mut().unwrap();
    rows[0]["weights"] = serde_json::json!({ "ghost_subdim": 1.0 });
    let bad = tmp.path().join("bad.json");
    fs::write(&bad, serde_json::to_string(&w).unwrap()).unwrap();
    let o = run(&[
        "validate",
        "--out",
        s(&tmp.path().join("v")),
        "--seed",
        "3",
        "--data",
        s(&data),
        "--mapping",
        s(&bad),
    ]);
    assert_eq!(o.status.code(), Some(2));
    let err: Value = serde_json::from_slice(&o.stderr).unwrap();
    assert_eq!(err["error"], "UnknownSubdimension");
}

#[test]
fn report_sorts_by_auc_gain() {
    let tmp = tempfile::tempdir().unwrap();
    let th = TriageThresholds::default();
    let gains = [
        ("health_risk", -0.003),
        ("service_tenure_lockin", 0.114),
        ("benefit_value", 0.021),
        ("employer_contribution", 0.0),
    ];
    let mut reports = Vec::new();
    for (cand, d) in gains {
        reports.push(DeltaReport::from_raw(cand, "switch_accept", Metric::Auc, vec![d; 5], 300, 3, &th));
        reports.push(DeltaReport::from_raw(cand, "switch_threshold", Metric::R2, vec![d / 2.0; 5], 300, 3, &th));
    }
    let deltas = tmp.path().join("deltas.json");
    fs::write(&deltas, serde_json::to_string(&reports).unwrap()).unwrap();
    let out = tmp.path().join("r");
    let o = run(&["report", "--out", s(&out), "--seed", "0", "--deltas", s(&deltas)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    let rows = read_json(&out.join("triage.json"));
    let order: Vec<&str> = rows.as_array().unwrap().iter().map(|r| r["subdimension"].as_str().unwrap()).collect();
    assert_eq!(order, ["service_tenure_lockin", "benefit_value", "employer_contribution", "health_risk"]);
    assert_eq!(rows[0]["label_auc"], "signal");
    assert_eq!(rows[3]["label_auc"], "noise_like");

    let csv = fs::read_to_string(out.join("triage.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "Family,Subdimension,Items,dAUC,dR2,label_auc,label_r2,notes");
    assert!(lines.next().unwrap().contains("service_tenure_lockin"));
}

#[test]
fn config_file_replays_a_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data);
    let again = tmp.path().join("again");
    let o = run(&["synth", "--out", s(&again), "--config", s(&data.join("manifest.json"))]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fs::read(data.join("responses.csv")).unwrap(), fs::read(again.join("responses.csv")).unwrap());

    let other = run(&["score", "--out", s(&tmp.path().join("x")), "--config", s(&data.join("manifest.json"))]);
    assert_eq!(other.status.code(), Some(2));
}
