use std::path::Path;
use std::process::{Command, Output};

use clap::Parser;
use serde_json::Value;
use spaceedit_cli::commands::{apply_override, resolve_config, Cli};
use spaceedit_cli::{RunConfig, WORKSPACE_ENV};

fn spaceedit(ws: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_spaceedit"))
        .arg("--workspace")
        .arg(ws)
        .args(args)
        .env_remove(WORKSPACE_ENV)
        .output()
        .unwrap()
}

#[test]
fn overrides_parse_json_and_fall_back_to_strings() {
    let cfg = RunConfig::default();
    let cfg = apply_override(&cfg, "train.total_images=800").unwrap();
    assert_eq!(cfg.train.total_images, 800);
    let cfg = apply_override(&cfg, "serve.addr=0.0.0.0:9000").unwrap();
    assert_eq!(cfg.serve.addr, "0.0.0.0:9000");
    let cfg = apply_override(&cfg, "inversion.optimize_noise=false").unwrap();
    assert!(!cfg.inversion.optimize_noise);
}

#[test]
fn bad_overrides_are_rejected() {
    let cfg = RunConfig::default();
    assert!(apply_override(&cfg, "train.total_images").is_err());
    assert!(apply_override(&cfg, "train.no_such_key=1").is_err());
    assert!(apply_override(&cfg, "train.total_images=lots").is_err());
}

#[test]
fn command_line_beats_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let mut file_cfg = RunConfig::default();
    file_cfg.workspace = dir.path().join("from-file");
    file_cfg.train.total_images = 100;
    file_cfg.seed = 3;
    let path = dir.path().join("run.json");
    std::fs::write(&path, serde_json::to_string(&file_cfg).unwrap()).unwrap();

    let argv = |extra: &[&str]| {
        let mut v = vec!["spaceedit", "--config", path.to_str().unwrap()];
        v.extend_from_slice(extra);
        v.extend_from_slice(&["synth", "--n", "20"]);
        Cli::try_parse_from(v).unwrap()
    };
    let from_file = resolve_config(&argv(&[])).unwrap();
    assert_eq!(from_file.train.total_images, 100);
    assert_eq!(from_file.seed, 3);

    let cli = argv(&["--set", "train.total_images=200", "--set", "seed=9", "--seed", "4", "--workspace", "elsewhere"]);
    let cfg = resolve_config(&cli).unwrap();
    assert_eq!(cfg.train.total_images, 200);
    assert_eq!(cfg.seed, 4);
    assert_eq!(cfg.train.seed, 4);
    assert_eq!(cfg.index_inversion.seed, 4);
    assert_eq!(cfg.workspace, Path::new("elsewhere"));
}

#[test]
fn inconsistent_configs_fail_validation() {
    let cli = Cli::try_parse_from(["spaceedit", "--set", "dataset.resolution=16", "synth"]).unwrap();
    assert!(resolve_config(&cli).is_err());
    let cli = Cli::try_parse_from(["spaceedit", "--set", "device=\"cuda\"", "synth"]).unwrap();
    assert!(resolve_config(&cli).is_err());
}

#[test]
fn exit_codes_separate_config_from_success() {
    let dir = tempfile::tempdir().unwrap();
    let ws = dir.path();
    assert_eq!(spaceedit(ws, &["--help"]).status.code(), Some(0));
    assert_eq!(spaceedit(ws, &["frobnicate"]).status.code(), Some(2));
    assert_eq!(spaceedit(ws, &["--set", "nope=1", "synth"]).status.code(), Some(2));
    assert_eq!(spaceedit(ws, &["synth", "--n", "3"]).status.code(), Some(2));
    assert_eq!(
        spaceedit(ws, &["retrieve", "--pair-id", "pair-00000"]).status.code(),
        Some(2)
    );

    let out = spaceedit(ws, &["--set", "dataset.resolution=8", "--set", "generator.resolution=8", "synth", "--n", "20"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let report: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["pairs"], 20);
    for d in ["datasets", "checkpoints", "indexes", "sessions", "reports"] {
        assert!(ws.join(d).is_dir());
    }
}
