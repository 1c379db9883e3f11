mod common;

use common::{tiny_config, tiny_pairs, tiny_train};
use spaceedit::generator::GeneratorBundle;
use spaceedit::training::{train, StepLog, TrainOutput};

#[test]
fn training_is_deterministic() {
    let pairs = tiny_pairs(40);
    let a = train(
        &pairs,
        &tiny_config(),
        &tiny_train(24),
        None,
        &TrainOutput::default(),
    )
    .unwrap();
    let b = train(
        &pairs,
        &tiny_config(),
        &tiny_train(24),
        None,
        &TrainOutput::default(),
    )
    .unwrap();
    assert_eq!(a.checkpoint_hash(), b.checkpoint_hash());
    assert_eq!(a.meta.steps, 6);
    assert!(a.is_trained());
    assert_ne!(
        a.generator_hash(),
        GeneratorBundle::new(tiny_config())
            .unwrap()
            .generator_hash()
    );
}

#[test]
fn resuming_matches_an_uninterrupted_run() {
    let pairs = tiny_pairs(40);
    let dir = tempfile::tempdir().unwrap();
    let out = TrainOutput {
        checkpoint_dir: Some(dir.path().to_path_buf()),
        log_path: Some(dir.path().join("log.jsonl")),
    };
    train(&pairs, &tiny_config(), &tiny_train(16), None, &out).unwrap();
    let half = GeneratorBundle::load(dir.path().join("latest.ckpt")).unwrap();
    assert_eq!(half.meta.steps, 4);
    let resumed = train(&pairs, &tiny_config(), &tiny_train(32), Some(half), &out).unwrap();
    let straight = train(
        &pairs,
        &tiny_config(),
        &tiny_train(32),
        None,
        &TrainOutput::default(),
    )
    .unwrap();
    assert_eq!(resumed.generator_hash(), straight.generator_hash());

    let log: Vec<StepLog> = std::fs::read_to_string(dir.path().join("log.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(
        log.iter().map(|e| e.step).collect::<Vec<_>>(),
        (0..8).collect::<Vec<_>>()
    );
    assert!(log
        .iter()
        .all(|e| e.loss_d.is_finite() && e.loss_g.is_finite()));
    assert!(log.iter().any(|e| e.r1.is_some()));
}

#[test]
fn resume_rejects_a_different_architecture() {
    let pairs = tiny_pairs(40);
    let other = GeneratorBundle::new(spaceedit::generator::GeneratorConfig {
        base_channels: 2,
        ..tiny_config()
    })
    .unwrap();
    assert!(train(
        &pairs,
        &tiny_config(),
        &tiny_train(8),
        Some(other),
        &TrainOutput::default()
    )
    .is_err());
}

#[test]
fn wrong_resolution_data_is_rejected() {
    let pairs = spaceedit::editops::synthesize_dataset(
        spaceedit::editops::BaseSource::Procedural,
        20,
        1,
        16,
    )
    .unwrap();
    assert!(train(
        &pairs,
        &tiny_config(),
        &tiny_train(8),
        None,
        &TrainOutput::default()
    )
    .is_err());
}
