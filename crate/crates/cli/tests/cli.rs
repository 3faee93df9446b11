use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn stabench(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stabench"))
        .args(args)
        .env_remove("SB_SEED")
        .output()
        .expect("binary runs")
}

fn config() -> String {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs/optimizer-spike-quadratic.toml")
        .display()
        .to_string()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Runs a two-seed audit and returns the artifact directory it printed.
fn run_small(out: &Path) -> PathBuf {
    let o = stabench(&["run", &config(), "-o", "seeds=[0, 1]", "--out", out.to_str().unwrap(), "-q"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    PathBuf::from(stdout(&o).lines().last().unwrap().trim())
}

#[test]
fn run_then_replay() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = run_small(tmp.path());
    assert!(dir.join("manifest.json").is_file());
    let o = stabench(&["replay", dir.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).starts_with("metrics verified: 4 runs, config "), "{}", stdout(&o));
}

#[test]
fn repeated_runs_get_distinct_directories() {
    let tmp = tempfile::tempdir().unwrap();
    let a = run_small(tmp.path());
    let b = run_small(tmp.path());
    assert_ne!(a, b);
}

#[test]
fn unknown_override_exits_2_and_names_key() {
    let o = stabench(&["run", &config(), "-o", "learner.momentm=0.9"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("learner.momentm"), "{}", stderr(&o));
}

#[test]
fn usage_errors_exit_1() {
    assert_eq!(stabench(&[]).status.code(), Some(1));
    assert_eq!(stabench(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(stabench(&["run"]).status.code(), Some(1));
    assert_eq!(stabench(&["--help"]).status.code(), Some(0));
}

#[test]
fn missing_audit_dir_is_a_runtime_error() {
    let tmp = tempfile::tempdir().unwrap();
    let o = stabench(&["replay", tmp.path().join("nope").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn tampered_audit_fails_replay_with_2() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = run_small(tmp.path());
    let path = dir.join("config.toml");
    let text = std::fs::read_to_string(&path).unwrap();
    std::fs::write(&path, text.replace("lr = 0.05", "lr = 0.07")).unwrap();
    let o = stabench(&["replay", dir.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("config_hash"), "{}", stderr(&o));
}

#[test]
fn export_writes_csv_and_refuses_to_overwrite() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = run_small(tmp.path());
    let csv = tmp.path().join("traj.csv");
    let args = ["export", dir.to_str().unwrap(), "--what", "trajectories", "--output", csv.to_str().unwrap()];
    let o = stabench(&args);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = std::fs::read_to_string(&csv).unwrap();
    assert!(text.starts_with("run_id,perturbation,step,J"));
    // 4 runs x 1000 steps plus the header.
    assert_eq!(text.lines().count(), 4001);

    let o = stabench(&args);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(std::fs::read_to_string(&csv).unwrap(), text);

    let o = stabench(&["export", dir.to_str().unwrap(), "--what", "bogus"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn analyze_and_compare_read_stored_audits() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = run_small(tmp.path());
    let o = stabench(&["analyze", dir.to_str().unwrap(), "--json"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let rows: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert!(rows.as_array().is_some_and(|r| !r.is_empty()));

    let report = dir.join("report.json");
    let o = stabench(&["compare", report.to_str().unwrap(), report.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("lr-spike"));
}

#[test]
fn sweep_writes_one_audit_per_fraction() {
    let tmp = tempfile::tempdir().unwrap();
    let o = stabench(&[
        "sweep",
        &config(),
        "-o",
        "seeds=[0]",
        "--fracs",
        "0.3,0.6",
        "--out",
        tmp.path().to_str().unwrap(),
        "-q",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let dir = PathBuf::from(stdout(&o).lines().last().unwrap().trim());
    assert!(dir.join("sweep.json").is_file());
    for frac in ["0.30", "0.60"] {
        let sub = dir.join(format!("start-{frac}"));
        let o = stabench(&["replay", sub.to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    }
}

#[test]
fn seed_env_overrides_config_seeds() {
    let tmp = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_stabench"))
        .args(["run", &config(), "--out", tmp.path().to_str().unwrap(), "-q"])
        .env("SB_SEED", "4")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let dir = PathBuf::from(stdout(&o).lines().last().unwrap().trim());
    let o = stabench(&["replay", dir.to_str().unwrap()]);
    assert!(stdout(&o).starts_with("metrics verified: 2 runs"), "{}", stdout(&o));
}
