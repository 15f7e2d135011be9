//! End-to-end checks of the command-line interface.

use std::path::Path;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_tfqkd"))
}

fn repo_scenario(name: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../scenarios")
        .join(name)
        .to_string_lossy()
        .into_owned()
}

#[test]
fn run_toy_scenario_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let out1 = dir.path().join("a");
    let out2 = dir.path().join("b");
    for out in [&out1, &out2] {
        let status = bin()
            .args([
                "run",
                "--config",
                &repo_scenario("toy.toml"),
                "--out-dir",
                out.to_str().unwrap(),
            ])
            .status()
            .unwrap();
        assert!(status.success());
    }
    let a = std::fs::read(out1.join("reports/toy.csv")).unwrap();
    let b = std::fs::read(out2.join("reports/toy.csv")).unwrap();
    assert_eq!(a, b, "same seed must give byte-identical reports");
}

#[test]
fn expected_headline_scenario_reports_positive_rate() {
    let dir = tempfile::tempdir().unwrap();
    let output = bin()
        .args([
            "run",
            "--config",
            &repo_scenario("headline_expected.toml"),
            "--out-dir",
            dir.path().to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(output.status.success());
    let text = String::from_utf8_lossy(&output.stdout);
    assert!(text.contains("R:"), "{text}");
    assert!(
        dir.path().join("reports/headline_expected.csv").exists(),
        "report artifact missing"
    );
}

#[test]
fn sweep_emits_table() {
    let dir = tempfile::tempdir().unwrap();
    let output = bin()
        .args([
            "sweep",
            "--config",
            &repo_scenario("headline_expected.toml"),
            "--out-dir",
            dir.path().to_str().unwrap(),
            "--from-db",
            "40",
            "--to-db",
            "70",
            "--step-db",
            "10",
        ])
        .env("TFQKD_WORKERS", "2")
        .output()
        .unwrap();
    assert!(output.status.success());
    let csv = std::fs::read_to_string(
        dir.path()
            .join("sweeps/headline_expected_rate_vs_loss.csv"),
    )
    .unwrap();
    assert_eq!(csv.lines().count(), 5); // header + 4 grid points
}

#[test]
fn bad_config_fails_with_field_path() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    std::fs::write(&path, "name = \"x\"\nmode = \"expected\"\nseed = 1\nbogus = 2\n").unwrap();
    let output = bin()
        .args(["run", "--config", path.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(!output.status.success());
    let err = String::from_utf8_lossy(&output.stderr);
    assert!(err.contains("bogus"), "{err}");
}
