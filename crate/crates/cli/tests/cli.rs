//! End-to-end checks of the `rhfl` binary.

use std::path::PathBuf;
use std::process::Command;

fn rhfl() -> Command {
    Command::new(env!("CARGO_BIN_EXE_rhfl"))
}

fn temp_dir(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join("rhfl_cli_tests").join(name);
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

const TINY_CONFIG: &str = "\
[federation]
clients = 2
rounds = 2
pretrain_epochs = 2
seeds = 3

[data]
classes = 4
feature_dim = 6
train_per_client = 60
test_per_class = 10
public_size = 40
public_classes = 8
save_datasets = true
";

#[test]
fn print_config_echoes_defaults() {
    let out = rhfl().args(["run", "--print-config"]).output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("zeta = 10"), "{text}");
    assert!(text.contains("lambda = 0.4"), "{text}");
    assert!(text.contains("gamma = 0.9"), "{text}");
    assert!(text.contains("eta = 1.4"), "{text}");
    assert!(text.contains("tau = 4"), "{text}");
    assert!(text.contains("learning_rate = 0.001"), "{text}");
}

#[test]
fn run_and_audit_round_trip() {
    let dir = temp_dir("run_audit");
    let cfg_path = dir.join("tiny.cfg");
    std::fs::write(&cfg_path, TINY_CONFIG).unwrap();
    let out_dir = dir.join("out");

    let out = rhfl()
        .args(["run", cfg_path.to_str().unwrap(), "--out", out_dir.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    assert!(out_dir.join("summary.json").exists());
    assert!(out_dir.join("g000_s3/metrics.csv").exists());

    let audit = rhfl()
        .args(["audit", out_dir.join("g000_s3").to_str().unwrap()])
        .output()
        .unwrap();
    assert!(audit.status.success(), "stderr: {}", String::from_utf8_lossy(&audit.stderr));
    let text = String::from_utf8(audit.stdout).unwrap();
    assert_eq!(text.matches(" ok").count(), 2, "{text}");
}

#[test]
fn seeds_override_multiplies_runs() {
    let dir = temp_dir("seeds");
    let cfg_path = dir.join("tiny.cfg");
    std::fs::write(&cfg_path, TINY_CONFIG).unwrap();
    let out_dir = dir.join("out");
    let out = rhfl()
        .args([
            "run",
            cfg_path.to_str().unwrap(),
            "--out",
            out_dir.to_str().unwrap(),
            "--seeds",
            "5,6",
        ])
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(out_dir.join("g000_s5").exists());
    assert!(out_dir.join("g000_s6").exists());
}

#[test]
fn invalid_config_exits_with_usage_code() {
    let dir = temp_dir("invalid");
    let cfg_path = dir.join("bad.cfg");
    std::fs::write(&cfg_path, "[noise]\nkind = pairflip\nmu = 0.9\n").unwrap();
    let out = rhfl().args(["run", cfg_path.to_str().unwrap()]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("pairflip"));
}

#[test]
fn plots_flag_writes_curves() {
    let dir = temp_dir("plots");
    let cfg_path = dir.join("tiny.cfg");
    std::fs::write(&cfg_path, TINY_CONFIG).unwrap();
    let out_dir = dir.join("out");
    let out = rhfl()
        .args([
            "run",
            cfg_path.to_str().unwrap(),
            "--out",
            out_dir.to_str().unwrap(),
            "--plots",
        ])
        .output()
        .unwrap();
    assert!(out.status.success());
    for k in 0..2 {
        assert!(out_dir.join(format!("g000_s3/curves/client{k}_loss.csv")).exists());
        assert!(out_dir
            .join(format!("g000_s3/curves/client{k}_accuracy.csv"))
            .exists());
    }
}
