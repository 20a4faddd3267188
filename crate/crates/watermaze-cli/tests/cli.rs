//! Command-line behavior: exit codes, error messages, and the smoke config.

use std::fs;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_watermaze"))
}

#[test]
fn help_is_available_on_all_commands() {
    for args in [
        vec!["--help"],
        vec!["train", "--help"],
        vec!["eval", "--help"],
        vec!["curves", "--help"],
    ] {
        let out = bin().args(&args).output().unwrap();
        assert!(out.status.success(), "{args:?}");
        assert!(!out.stdout.is_empty());
    }
}

#[test]
fn unknown_config_key_fails_with_the_key_name() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "episodes = 3\nmystery_knob = 1\n").unwrap();
    let out = bin()
        .args(["train", "--config", cfg.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("mystery_knob"), "stderr: {stderr}");
}

#[test]
fn invalid_config_value_reports_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "gamma = 1.5\n").unwrap();
    let out = bin()
        .args(["train", "--config", cfg.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("gamma"), "stderr: {stderr}");
}

#[test]
fn eval_on_missing_checkpoint_fails() {
    let out = bin()
        .args(["eval", "--checkpoint", "/nonexistent.ckpt", "--episodes", "1"])
        .output()
        .unwrap();
    assert!(!out.status.success());
}

#[test]
fn curves_on_empty_directory_fails() {
    let dir = tempfile::tempdir().unwrap();
    let out_file = dir.path().join("curves.csv");
    let out = bin()
        .args([
            "curves",
            "--in",
            dir.path().to_str().unwrap(),
            "--alpha",
            "0.05",
            "--out",
            out_file.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(!out.status.success());
}

#[test]
fn train_eval_curves_pipeline_via_binary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.cfg");
    fs::write(
        &cfg,
        "episodes = 4\nseq_len = 3\nruns = 1\nmax_steps = 40\nembed_dim = 16\n\
         num_layers = 1\nnum_heads = 2\nffn_dim = 32\nbatch_size = 8\n\
         warmup_transitions = 40\nseed = 3\n",
    )
    .unwrap();
    let out_dir = dir.path().join("out");

    let status = bin()
        .args([
            "train",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            out_dir.to_str().unwrap(),
        ])
        .status()
        .unwrap();
    assert!(status.success());

    // Platform for run 0 from the manifest.
    let manifest = fs::read_to_string(out_dir.join("manifest.csv")).unwrap();
    let line = manifest.lines().nth(1).unwrap();
    let parts: Vec<&str> = line.split(',').collect();
    let platform = format!("{},{}", parts[5], parts[6]);

    let report = dir.path().join("report.txt");
    let out = bin()
        .args([
            "eval",
            "--checkpoint",
            out_dir.join("model_seq3_run0.ckpt").to_str().unwrap(),
            "--episodes",
            "3",
            "--platform",
            &platform,
            "--report",
            report.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("oscillation_rate = "));
    assert!(report.exists());

    let curves = dir.path().join("curves.csv");
    let status = bin()
        .args([
            "curves",
            "--in",
            out_dir.to_str().unwrap(),
            "--alpha",
            "0.5",
            "--out",
            curves.to_str().unwrap(),
        ])
        .status()
        .unwrap();
    assert!(status.success());
    assert!(curves.exists());
}
