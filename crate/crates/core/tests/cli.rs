use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn betel(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_betel"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap()
}

fn write_config(dir: &Path, name: &str, json: &str) {
    fs::write(dir.join(name), json).unwrap();
}

#[test]
fn simulate_writes_reproducible_csv() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path(), "c.json", r#"{"data": {"simulate": {"n": 250, "rho": 0.3, "seed": 1}}}"#);
    let out = betel(dir.path(), &["simulate", "--config", "c.json", "--out", "a"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let a = fs::read_to_string(dir.path().join("a/data.csv")).unwrap();
    let mut lines = a.lines();
    assert_eq!(lines.next(), Some("y,x,const,z1,z2"));
    assert_eq!(lines.count(), 250);
    betel(dir.path(), &["simulate", "--config", "c.json", "--out", "b"]);
    assert_eq!(a, fs::read_to_string(dir.path().join("b/data.csv")).unwrap());
}

#[test]
fn seed_flag_changes_the_draw() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path(), "c.json", r#"{"data": {"simulate": {"n": 50, "rho": 0.3, "seed": 1}}}"#);
    betel(dir.path(), &["simulate", "--config", "c.json", "--out", "a"]);
    betel(dir.path(), &["simulate", "--config", "c.json", "--out", "b", "--seed", "2"]);
    assert_ne!(
        fs::read(dir.path().join("a/data.csv")).unwrap(),
        fs::read(dir.path().join("b/data.csv")).unwrap()
    );
}

#[test]
fn config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path(), "bad.json", r#"{"data": {"simulate": {"n": 100, "rho": 1.5}}}"#);
    assert_eq!(betel(dir.path(), &["simulate", "--config", "bad.json"]).status.code(), Some(2));
    write_config(
        dir.path(),
        "missing.json",
        r#"{"data": {"csv": {"path": "nope.csv", "schema": {"y": "y", "x": ["x"], "z1": ["c"], "z2": ["z"]}}}}"#,
    );
    assert_eq!(betel(dir.path(), &["test-endogeneity", "--config", "missing.json"]).status.code(), Some(2));
    assert_eq!(betel(dir.path(), &["fit"]).status.code(), Some(2));
}

#[test]
fn select_ranks_the_true_model_first() {
    let dir = tempfile::tempdir().unwrap();
    write_config(
        dir.path(),
        "c.json",
        r#"{"data": {"simulate": {"n": 1000, "seed": 0, "design": {"kind": "two_treatments"}}}}"#,
    );
    let out = betel(dir.path(), &["select", "--config", "c.json", "--quick", "--out", "o"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(dir.path().join("o/comparison.csv")).unwrap();
    let first = csv.lines().skip(1).find(|l| l.split(',').nth(3) == Some("1")).unwrap();
    assert!(first.starts_with("endogenous:x1,"), "{first}");
    assert!(dir.path().join("o/comparison.json").exists());
}

#[test]
fn fit_and_test_write_their_outputs() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path(), "c.json", r#"{"data": {"simulate": {"n": 300, "rho": 0.5, "seed": 3}}}"#);
    let out = betel(dir.path(), &["fit", "--config", "c.json", "--quick", "--mask", "1", "--out", "f"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("f/fit_summary.json")).unwrap()).unwrap();
    assert!(summary.is_object());
    let chain = fs::read_to_string(dir.path().join("f/chain.csv")).unwrap();
    assert!(chain.lines().count() > 1);

    let out = betel(dir.path(), &["test-endogeneity", "--config", "c.json", "--quick", "--out", "t"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let t: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("t/test.json")).unwrap()).unwrap();
    let v = t["verdict"].as_str().unwrap();
    assert!(v == "ENDOGENOUS" || v == "EXOGENOUS");
    let bf = t["log_bf_eb"].as_f64().unwrap();
    assert!((bf - (t["log_ml_e"].as_f64().unwrap() - t["log_ml_b"].as_f64().unwrap())).abs() < 1e-9);
}

#[test]
fn mc_on_one_cell_writes_one_row() {
    let dir = tempfile::tempdir().unwrap();
    write_config(
        dir.path(),
        "c.json",
        r#"{"data": {"simulate": {"n": 100, "seed": 0}},
            "grid": {"rho": [0.5], "n": [100], "reps": 2, "base_seed": 5}}"#,
    );
    let out = betel(dir.path(), &["mc", "--config", "c.json", "--quick", "--out", "m"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(dir.path().join("m/mc.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "rho,n,reps,extended_wins,failures,mean_log_bf,wall_time_s");
    assert_eq!(lines.len(), 2);
    assert!(lines[1].starts_with("0.5,100,2,"));
}

#[test]
fn gmm_msc_lists_both_models() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path(), "c.json", r#"{"data": {"simulate": {"n": 300, "rho": 0.4, "seed": 2}}}"#);
    let out = betel(dir.path(), &["gmm-msc", "--config", "c.json", "--out", "g"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(dir.path().join("g/msc.csv")).unwrap();
    let rows: Vec<Vec<&str>> = csv.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 2);
    for r in &rows {
        for v in &r[4..7] {
            assert!(v.parse::<f64>().unwrap().is_finite());
        }
    }
}
