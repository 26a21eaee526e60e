use std::process::Command;

const BIN: &str = env!("CARGO_BIN_EXE_shardflow");

fn smoke() -> String {
    concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/smoke.json").to_string()
}

#[test]
fn runs_a_config_and_writes_a_report() {
    let out = tempfile::tempdir().unwrap();
    let run = Command::new(BIN)
        .args(["--config", &smoke(), "--seeds", "1", "--policies", "rc,ec", "--report", "--out"])
        .arg(out.path())
        .output()
        .unwrap();
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    let summary = std::fs::read_to_string(out.path().join("summary.csv")).unwrap();
    // header plus 2 policies × 2 sweep values
    assert_eq!(summary.lines().count(), 5, "{summary}");
    assert!(out.path().join("report.md").exists());
    assert!(!String::from_utf8_lossy(&run.stdout).is_empty());

    let again = Command::new(BIN).args(["--report", "--out"]).arg(out.path()).output().unwrap();
    assert!(again.status.success(), "{}", String::from_utf8_lossy(&again.stderr));
}

#[test]
fn bad_input_exits_non_zero() {
    let none = Command::new(BIN).output().unwrap();
    assert!(!none.status.success());
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"base": {}, "policies": [], "seeds": [1]}"#).unwrap();
    let run = Command::new(BIN).arg("--config").arg(&bad).output().unwrap();
    assert!(!run.status.success());
    assert!(String::from_utf8_lossy(&run.stderr).contains("error"));
}
