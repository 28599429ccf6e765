use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn m2cl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_m2cl"))
        .args(args)
        .env_remove("M2CL_API_KEY")
        .output()
        .expect("binary runs")
}

fn fixture(name: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("fixtures/synthetic_qa")
        .join(name)
        .display()
        .to_string()
}

fn s(p: &Path) -> String {
    p.display().to_string()
}

#[test]
fn init_commands_write_loadable_files() {
    let dir = tempfile::tempdir().unwrap();
    let pool = dir.path().join("pool.json");
    let problems = dir.path().join("problems.json");
    assert!(m2cl(&["init-pool", "--size", "12", "--seed", "3", "--out", &s(&pool)]).status.success());
    assert!(m2cl(&["init-problems", "--count", "5", "--seed", "3", "--out", &s(&problems)]).status.success());
    let loaded = m2cl_core::ContextPool::load(&pool).unwrap();
    assert_eq!(loaded.len(), 12);
    assert_eq!(m2cl_core::synthetic::load_problems(&problems).unwrap().len(), 5);

    let out = m2cl(&["init-pool", "--size", "1", "--out", &s(&pool)]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn fixed_context_discussion_writes_transcripts() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let res = m2cl(&[
        "discuss",
        "--config",
        &fixture("config.json"),
        "--agents",
        "3",
        "--rounds",
        "2",
        "--fixed-context",
        "--jobs",
        "2",
        "--out",
        &s(&out),
    ]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let transcript = std::fs::read_to_string(out.join("transcripts/q-000.jsonl")).unwrap();
    // One record per agent and round, then the summary line.
    assert_eq!(transcript.lines().count(), 2 * 3 + 1);
    let metrics = std::fs::read_to_string(out.join("metrics/q-000.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 3);
    let summary: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["total"], 20);

    let report_dir = dir.path().join("report");
    let res = m2cl(&["report", &s(&out), "--out", &s(&report_dir)]);
    assert!(res.status.success());
    let disc = std::fs::read_to_string(report_dir.join("discrepancy_by_round.csv")).unwrap();
    assert_eq!(disc.lines().next(), Some("run_id,round,mean_discrepancy,problems"));
    assert_eq!(disc.lines().count(), 3);
    assert!(disc.lines().nth(1).unwrap().ends_with(",20"));
    let acc = std::fs::read_to_string(report_dir.join("accuracy.csv")).unwrap();
    assert!(acc.lines().nth(1).unwrap().starts_with("run,fixed-context,"));
}

#[test]
fn http_backend_without_key_is_a_validation_error() {
    let res = m2cl(&[
        "discuss",
        "--config",
        &fixture("config.json"),
        "--backend",
        "http",
        "--endpoint",
        "http://127.0.0.1:9",
        "--fixed-context",
        "--out",
        &s(&tempfile::tempdir().unwrap().path().join("x")),
    ]);
    assert_eq!(res.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&res.stderr).contains("M2CL_API_KEY"));
}

#[test]
fn exit_codes_separate_validation_and_io() {
    let dir = tempfile::tempdir().unwrap();
    // No pool given at all.
    assert_eq!(m2cl(&["discuss", "--fixed-context", "--out", &s(dir.path())]).status.code(), Some(1));
    // Pool path that does not exist.
    let missing: PathBuf = dir.path().join("nope.json");
    let res = m2cl(&["discuss", "--pool", &s(&missing), "--problems", &fixture("problems.json"), "--fixed-context"]);
    assert_eq!(res.status.code(), Some(2));
    // Missing checkpoints for a trained run.
    let res = m2cl(&["discuss", "--config", &fixture("config.json"), "--out", &s(dir.path())]);
    assert_eq!(res.status.code(), Some(2));
    assert_eq!(m2cl(&["discuss", "--agents", "1", "--fixed-context"]).status.code(), Some(1));
}

#[test]
fn verify_bounds_reports_and_flags_adversarial_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("bounds.jsonl");
    let res = m2cl(&["verify-bounds", "--seed", "0", "--samples", "20", "--out", &s(&report)]);
    assert!(res.status.success());
    let text = std::fs::read_to_string(&report).unwrap();
    assert_eq!(text.lines().count(), 6 * 20);
    for line in text.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["holds"], true);
    }
    let res = m2cl(&["verify-bounds", "--samples", "20", "--adversarial", "--out", &s(&report)]);
    assert_eq!(res.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&res.stderr).contains("failed for"));
}
