//! Smoke tests of the command-line surface.

use std::process::{Command, Output};

fn vlmprobe(args: &[&str], dir: &std::path::Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vlmprobe")).current_dir(dir).args(args).output().unwrap()
}

#[test]
fn init_validate_and_override() {
    let dir = tempfile::tempdir().unwrap();
    let world = dir.path().join("world");
    assert!(vlmprobe(&["init-toy", world.to_str().unwrap()], dir.path()).status.success());

    let out = vlmprobe(&["--offline", "validate"], &world);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let summary: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(summary["classes"].as_array().unwrap().len(), 3);

    // same id with a different config is refused
    let out = vlmprobe(&["--offline", "--set", "kl.target_kl=20", "validate"], &world);
    assert!(!out.status.success());

    let out = vlmprobe(&["--set", "kl.no_such_key", "validate"], &world);
    assert!(!out.status.success());
}

#[test]
fn generate_then_audit_sample() {
    let dir = tempfile::tempdir().unwrap();
    assert!(vlmprobe(&["init-toy", "w"], dir.path()).status.success());
    let world = dir.path().join("w");
    let out = vlmprobe(&["--offline", "run", "--stages", "generate,judge"], &world);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let out = vlmprobe(&["--offline", "agreement", "--sample", "10", "--audit-out", "audit.csv"], &world);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let sheet = std::fs::read_to_string(world.join("audit.csv")).unwrap();
    assert_eq!(sheet.lines().count(), 11);

    // reports need evaluated experiments
    let out = vlmprobe(&["--offline", "report"], &world);
    assert!(!out.status.success());
}
