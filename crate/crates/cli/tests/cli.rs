//! Command-line behavior: outputs, a short pipeline and exit codes.

use std::path::Path;
use std::process::{Command, Output};

fn hilhip(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hilhip"))
        .args(args)
        .current_dir(dir)
        .env("HILHIP_THREADS", "2")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

const LOG: &str = "t_min,event_type,value\n\
0,meal,15\n300,meal,60\n600,meal,110\n1440,meal,18\n1740,meal,55\n2040,meal,105\n\
2880,meal,12\n3180,meal,65\n3480,meal,100\n4320,meal,20\n4620,meal,58\n4920,meal,115\n";

#[test]
fn learn_mc_then_doa() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("log.csv"), LOG).unwrap();
    let out = hilhip(&["learn-mc", "--log", "log.csv", "--out", "chain.json", "--meal-model", "meals.json"], dir.path());
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let chain = json(&dir.path().join("chain.json"));
    assert_eq!(chain["states"], serde_json::json!(["Small", "Medium", "Large"]));
    assert!(dir.path().join("meals.json").exists());

    let out = hilhip(&["doa", "--chain", "chain.json", "--p", "0.95", "--initial", "Small"], dir.path());
    assert_eq!(code(&out), 0);
    let result: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let set = result["doa_set"].as_array().unwrap();
    assert!(set.contains(&serde_json::json!("Small")));
    assert_eq!(result["probabilities"].as_array().unwrap().len(), 3);
}

#[test]
fn fis_training_reach_and_simulation() {
    let dir = tempfile::tempdir().unwrap();
    let out = hilhip(&["train-fis", "--wizard", "200", "--rules-per-dim", "2", "--epochs", "20", "--out", "fis.json"], dir.path());
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let fis = json(&dir.path().join("fis.json"));
    assert_eq!(fis["rules"].as_array().unwrap().len(), 8);

    let out = hilhip(&["reach", "--fis", "fis.json", "--subdivisions", "4", "--out", "enc.json"], dir.path());
    assert_eq!(code(&out), 0);
    let enc = json(&dir.path().join("enc.json"));
    assert!(enc["u_lo"].as_f64().unwrap() <= enc["u_hi"].as_f64().unwrap());

    std::fs::write(
        dir.path().join("scenario.json"),
        r#"{"controller": "pid", "events": {"kind": "none"}, "duration_days": 1, "seed": 3}"#,
    )
    .unwrap();
    let out = hilhip(&["simulate", "--config", "scenario.json", "--trace", "trace.csv"], dir.path());
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let metrics: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(metrics["pct_in_range"].as_f64(), Some(100.0));
    let trace = std::fs::read_to_string(dir.path().join("trace.csv")).unwrap();
    assert_eq!(trace.lines().count(), 1 + 1441);
}

#[test]
fn compare_writes_report_files() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("scenario.json"),
        r#"{"controller": "pid", "events": {"kind": "monte_carlo"}, "duration_days": 1, "seed": 1}"#,
    )
    .unwrap();
    let out = hilhip(
        &["compare", "--config", "scenario.json", "--controllers", "pid,mpc", "--keep-traces", "1", "--out-dir", "out"],
        dir.path(),
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let o = dir.path().join("out");
    let csv = std::fs::read_to_string(o.join("metrics.csv")).unwrap();
    // Two controllers over the five-subject cohort, one day each.
    assert_eq!(csv.lines().count(), 1 + 10);
    assert!(o.join("metrics.svg").exists());
    assert_eq!(json(&o.join("report.json"))["aggregates"].as_array().unwrap().len(), 2);

    let out = hilhip(&["report", "--report", "out/report.json", "--out-dir", "again"], dir.path());
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(std::fs::read_to_string(dir.path().join("again/metrics.csv")).unwrap(), csv);
}

#[test]
fn invalid_input_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.csv"), "t_min,event_type,value\nx,meal,1\n").unwrap();
    let out = hilhip(&["learn-mc", "--log", "bad.csv", "--out", "c.json"], dir.path());
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 2"));

    std::fs::write(dir.path().join("chain.json"), r#"{"states": ["A", "B"], "matrix": [[0.5, 0.5], [0.0, 1.0]]}"#).unwrap();
    let out = hilhip(&["doa", "--chain", "chain.json", "--p", "1.5", "--initial", "A"], dir.path());
    assert_eq!(code(&out), 2);

    std::fs::write(dir.path().join("s.json"), r#"{"controller": "pid", "bogus": 1}"#).unwrap();
    let out = hilhip(&["simulate", "--config", "s.json"], dir.path());
    assert_eq!(code(&out), 2);

    std::fs::write(
        dir.path().join("nn.json"),
        r#"{"controller": "neural", "events": {"kind": "none"}, "duration_days": 1, "seed": 0}"#,
    )
    .unwrap();
    let out = hilhip(&["simulate", "--config", "nn.json"], dir.path());
    assert_eq!(code(&out), 2);
}

#[test]
fn runtime_failure_exits_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let out = hilhip(&["doa", "--chain", "missing.json", "--p", "0.5", "--initial", "A"], dir.path());
    assert_eq!(code(&out), 3);
}
