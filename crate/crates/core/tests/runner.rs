use std::path::{Path, PathBuf};

use stabench_core::runner::{self, artifacts, AuditConfig, RunOptions};
use stabench_core::Error;

fn config(overrides: &[&str]) -> Result<AuditConfig, Error> {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/optimizer-spike-quadratic.toml");
    let o: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
    AuditConfig::load(&path, &o, None)
}

fn opts() -> RunOptions {
    RunOptions {
        jobs: 1,
        seed_override: None,
    }
}

fn written_audit(tmp: &Path) -> PathBuf {
    let cfg = config(&["seeds=[0, 1]"]).unwrap();
    let outcome = runner::run_audit(&cfg, &opts()).unwrap();
    let dir = tmp.join("audit");
    runner::write_artifacts(&outcome, &dir, &opts()).unwrap();
    dir
}

fn first_run_dir(dir: &Path) -> PathBuf {
    let manifest: artifacts::Manifest = artifacts::read_json(&dir.join("manifest.json")).unwrap();
    dir.join(&manifest.runs[0].dir)
}

#[test]
fn replay_accepts_untouched_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = written_audit(tmp.path());
    let summary = runner::replay(&dir).unwrap();
    assert_eq!(summary.runs_verified, 4);
    assert_eq!(summary.config_hash, config(&["seeds=[0, 1]"]).unwrap().hash());
}

#[test]
fn replay_rejects_edited_metrics() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = written_audit(tmp.path());
    let path = first_run_dir(&dir).join("metrics.json");
    let mut doc: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    let metrics = doc["metrics"].as_object_mut().unwrap();
    let (key, value) = metrics
        .iter_mut()
        .find(|(_, v)| v.as_f64().is_some_and(|x| x != 0.0))
        .expect("a nonzero numeric metric");
    let key = key.clone();
    *value = serde_json::json!(value.as_f64().unwrap() * 1.5);
    std::fs::write(&path, serde_json::to_string(&doc).unwrap()).unwrap();
    let err = runner::replay(&dir).unwrap_err();
    assert!(matches!(err, Error::Integrity { .. }), "editing {key}: {err}");
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn replay_rejects_edited_config() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = written_audit(tmp.path());
    let path = dir.join("config.toml");
    let text = std::fs::read_to_string(&path).unwrap();
    std::fs::write(&path, text.replace("lr = 0.05", "lr = 0.06")).unwrap();
    match runner::replay(&dir).unwrap_err() {
        Error::Integrity { field, .. } => assert_eq!(field, "config_hash"),
        other => panic!("unexpected error {other}"),
    }
}

#[test]
fn replay_rejects_edited_telemetry() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = written_audit(tmp.path());
    let path = first_run_dir(&dir).join("telemetry.jsonl");
    let text = std::fs::read_to_string(&path).unwrap();
    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    let mut rec: serde_json::Value = serde_json::from_str(&lines[400]).unwrap();
    let x = rec["x_inst"].as_f64().unwrap();
    rec["x_inst"] = serde_json::json!(x * 2.0 + 1.0);
    lines[400] = serde_json::to_string(&rec).unwrap();
    std::fs::write(&path, lines.join("\n") + "\n").unwrap();
    assert!(matches!(runner::replay(&dir).unwrap_err(), Error::Integrity { .. }));
}

#[test]
fn unknown_override_is_a_config_error() {
    let err = config(&["learner.learning_rate=0.1"]).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
    assert!(err.to_string().contains("learner.learning_rate"), "{err}");
}

#[test]
fn override_changes_the_hash() {
    let a = config(&[]).unwrap();
    let b = config(&["learner.lr=0.04"]).unwrap();
    assert_eq!(b.learner.lr, 0.04);
    assert_ne!(a.hash(), b.hash());
}

#[test]
fn seed_override_replaces_seed_list() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/optimizer-spike-quadratic.toml");
    let cfg = AuditConfig::load(&path, &[], Some("3, 5")).unwrap();
    assert_eq!(cfg.seeds, vec![3, 5]);
    assert!(AuditConfig::load(&path, &[], Some("x")).is_err());
}

#[test]
fn parallel_and_serial_audits_agree() {
    let cfg = config(&["seeds=[0, 1, 2]"]).unwrap();
    let a = runner::run_audit(&cfg, &opts()).unwrap();
    let b = runner::run_audit(
        &cfg,
        &RunOptions {
            jobs: 3,
            seed_override: None,
        },
    )
    .unwrap();
    assert_eq!(a.report, b.report);
    for (x, y) in a.runs.iter().zip(&b.runs) {
        assert_eq!(x.output.records, y.output.records);
        assert_eq!(x.output.latents, y.output.latents);
    }
}
