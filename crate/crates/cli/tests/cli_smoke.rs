//! End-to-end smoke tests for the binary: synthetic generation, full
//! diagnosis with the scripted backend, metrics display, and exit codes.

use std::path::{Path, PathBuf};
use std::process::Command;

fn bin() -> PathBuf {
    PathBuf::from(env!("CARGO_BIN_EXE_alertpilot"))
}

fn scenarios() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../core/tests/fixtures/golden_scenarios.json")
}

#[test]
fn gen_synth_then_diagnose_then_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let synth_dir = dir.path().join("synth");
    let out_dir = dir.path().join("out");

    let gen = Command::new(bin())
        .args(["gen-synth", "--requests", "40", "--patterns", "2", "--seed", "7", "--out"])
        .arg(&synth_dir)
        .output()
        .unwrap();
    assert!(gen.status.success(), "{}", String::from_utf8_lossy(&gen.stderr));
    assert!(synth_dir.join("logs.jsonl").exists());
    assert!(synth_dir.join("alert.json").exists());
    assert!(synth_dir.join("truth.json").exists());

    let diag = Command::new(bin())
        .arg("diagnose")
        .arg(synth_dir.join("alert.json"))
        .arg(synth_dir.join("logs.jsonl"))
        .arg("--mock-scenarios")
        .arg(scenarios())
        .arg("--out")
        .arg(&out_dir)
        .output()
        .unwrap();
    assert!(diag.status.success(), "{}", String::from_utf8_lossy(&diag.stderr));
    for artifact in ["report.json", "report.md", "metrics.json", "tool_cache.json"] {
        assert!(out_dir.join(artifact).exists(), "missing {artifact}");
    }

    let metrics = Command::new(bin())
        .args(["metrics", "--out"])
        .arg(&out_dir)
        .output()
        .unwrap();
    assert!(metrics.status.success());
    let table = String::from_utf8_lossy(&metrics.stdout);
    assert!(table.contains("reduction ratio"), "{table}");
    assert!(table.contains("95.00%"), "{table}");
}

#[test]
fn missing_input_exits_4() {
    let out = Command::new(bin())
        .args(["ingest", "/nonexistent/logs.jsonl"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn unparseable_rca_response_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let synth_dir = dir.path().join("synth");
    Command::new(bin())
        .args(["gen-synth", "--requests", "10", "--patterns", "1", "--seed", "3", "--out"])
        .arg(&synth_dir)
        .output()
        .unwrap();
    // Scoping succeeds but the RCA agent answers in prose, twice.
    let rules = r#"[
        {"match": "Write one DSL query", "regex": false, "role": "any",
         "response": "```\nFROM 2026-01-01T00:00:00Z TO 2026-01-01T01:00:00Z WHERE code = \"500\"\n```"},
        {"match": "Diagnose the root cause", "regex": false, "role": "any",
         "response": "it looks broken to me"}
    ]"#;
    let rules_path = dir.path().join("rules.json");
    std::fs::write(&rules_path, rules).unwrap();
    let out = Command::new(bin())
        .arg("diagnose")
        .arg(synth_dir.join("alert.json"))
        .arg(synth_dir.join("logs.jsonl"))
        .arg("--mock-scenarios")
        .arg(&rules_path)
        .arg("--out")
        .arg(dir.path().join("out"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn scoping_failure_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let synth_dir = dir.path().join("synth");
    Command::new(bin())
        .args(["gen-synth", "--requests", "10", "--patterns", "1", "--seed", "3", "--out"])
        .arg(&synth_dir)
        .output()
        .unwrap();
    // Every generated query selects nothing, so scoping exhausts its budget.
    let rules = r#"[
        {"match": "Write one DSL query", "regex": false, "role": "any",
         "response": "```\nFROM 2026-01-01T00:00:00Z TO 2026-01-01T01:00:00Z WHERE code = \"404\"\n```"},
        {"match": "Refine", "regex": false, "role": "any",
         "response": "```\nFROM 2026-01-01T00:00:00Z TO 2026-01-01T01:00:00Z WHERE code = \"404\"\n```"}
    ]"#;
    let rules_path = dir.path().join("rules.json");
    std::fs::write(&rules_path, rules).unwrap();
    let out = Command::new(bin())
        .arg("diagnose")
        .arg(synth_dir.join("alert.json"))
        .arg(synth_dir.join("logs.jsonl"))
        .arg("--mock-scenarios")
        .arg(&rules_path)
        .arg("--out")
        .arg(dir.path().join("out"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}
