mod common;

use std::fs;

use kdvlp::corpus::{generate_synthetic, SyntheticSceneSpec};
use kdvlp::params::Group;
use kdvlp::trainer::build_param_groups;
use kdvlp::{load_checkpoint, save_checkpoint, train, Checkpoint, Error, Model, TrainConfig, TrainOptions};

fn run(corpus: &kdvlp::Corpus, config: &TrainConfig, options: TrainOptions) -> kdvlp::TrainOutcome {
    train(corpus, config, options).unwrap()
}

#[test]
fn zero_steps_return_the_initial_model() {
    let corpus = common::tiny_corpus(6, 1);
    let config = TrainConfig { total_steps: 0, ..common::tiny_config() };
    let out = run(&corpus, &config, TrainOptions::default());
    assert!(out.log.is_empty());
    assert_eq!(out.checkpoint.step, 0);
    assert_eq!(out.checkpoint.params, common::model_for(&corpus, &config).store);
}

#[test]
fn same_seed_gives_identical_logs_and_checkpoints() {
    let corpus = common::tiny_corpus(12, 2);
    let config = common::tiny_config();
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        run(&corpus, &config, TrainOptions { out_dir: Some(d.path().into()), ..Default::default() });
    }
    for f in ["metrics.jsonl", "final.ckpt"] {
        let a = fs::read(dirs[0].path().join(f)).unwrap();
        assert_eq!(a, fs::read(dirs[1].path().join(f)).unwrap(), "{f}");
    }
    let other = TrainConfig { seed: 1, ..config };
    let c = run(&corpus, &other, TrainOptions::default());
    assert_ne!(c.checkpoint.params, load_checkpoint(&dirs[0].path().join("final.ckpt")).unwrap().params);
}

#[test]
fn resume_equals_uninterrupted_training() {
    let corpus = common::tiny_corpus(12, 3);
    let config = TrainConfig { total_steps: 20, decay_steps: vec![12], ..common::tiny_config() };
    let full = run(&corpus, &config, TrainOptions::default());

    let dir = tempfile::tempdir().unwrap();
    let first = run(&corpus, &config, TrainOptions { stop_at: Some(10), ..Default::default() });
    assert_eq!(first.checkpoint.step, 10);
    let path = dir.path().join("mid.ckpt");
    save_checkpoint(&first.checkpoint, &path).unwrap();
    let resumed = run(&corpus, &config, TrainOptions { resume: Some(load_checkpoint(&path).unwrap()), ..Default::default() });

    assert_eq!(resumed.checkpoint.params, full.checkpoint.params);
    assert_eq!(resumed.checkpoint.optimizer, full.checkpoint.optimizer);
    assert_eq!(resumed.checkpoint.rng, full.checkpoint.rng);
    let joined: Vec<_> = first.log.iter().chain(&resumed.log).cloned().collect();
    assert_eq!(joined, full.log);
}

#[test]
fn accumulation_matches_full_batch() {
    let corpus = common::tiny_corpus(16, 4);
    let base = TrainConfig { total_steps: 3, task_weights: [0.0, 1.0, 0.0, 0.0], ..common::tiny_config() };
    let full = run(&corpus, &TrainConfig { batch_size: 4, grad_accum_steps: 1, ..base.clone() }, TrainOptions::default());
    let split = run(&corpus, &TrainConfig { batch_size: 2, grad_accum_steps: 2, ..base }, TrainOptions::default());
    for ((_, a), (_, b)) in full.checkpoint.params.iter().zip(split.checkpoint.params.iter()) {
        assert!(a.value.max_abs_diff(&b.value) < 1e-9, "{}", a.name);
    }
    for (a, b) in full.log.iter().zip(&split.log) {
        assert!((a.loss - b.loss).abs() < 1e-9);
    }
}

#[test]
fn zero_backbone_rate_freezes_the_backbone() {
    let corpus = common::tiny_corpus(8, 5);
    let config = TrainConfig { total_steps: 10, lr_backbone: 0.0, ..common::tiny_config() };
    let initial = common::model_for(&corpus, &config).store;
    let out = run(&corpus, &config, TrainOptions::default());
    let mut moved = 0;
    for ((_, before), (_, after)) in initial.iter().zip(out.checkpoint.params.iter()) {
        if before.group == Some(Group::Backbone) {
            assert_eq!(before.value, after.value, "{}", before.name);
        } else if before.value != after.value {
            moved += 1;
        }
    }
    assert!(moved > 0);
}

#[test]
fn itm_loss_descends_on_a_small_corpus() {
    let corpus = generate_synthetic(&SyntheticSceneSpec::default(), 64, 6).unwrap();
    let config = TrainConfig {
        total_steps: 200,
        decay_steps: vec![],
        task_weights: [0.0, 0.0, 0.0, 1.0],
        ..TrainConfig::default()
    };
    let out = run(&corpus, &config, TrainOptions::default());
    let losses: Vec<f64> = out.log.iter().map(|r| r.loss).collect();
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    let (first, last) = (mean(&losses[..20]), mean(&losses[180..]));
    assert!(last < first, "first {first} last {last}");
}

#[test]
fn checkpoint_bytes_roundtrip() {
    let corpus = common::tiny_corpus(6, 7);
    let out = run(&corpus, &TrainConfig { total_steps: 3, ..common::tiny_config() }, TrainOptions::default());
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
    save_checkpoint(&out.checkpoint, &a).unwrap();
    save_checkpoint(&load_checkpoint(&a).unwrap(), &b).unwrap();
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert_eq!(Checkpoint::from_bytes(&out.checkpoint.to_bytes()).unwrap().params, out.checkpoint.params);
}

#[test]
fn corrupt_checkpoint_is_rejected() {
    let corpus = common::tiny_corpus(4, 8);
    let out = run(&corpus, &TrainConfig { total_steps: 1, ..common::tiny_config() }, TrainOptions::default());
    let bytes = out.checkpoint.to_bytes();
    let mut flipped = bytes.clone();
    let mid = flipped.len() / 2;
    flipped[mid] ^= 0x40;
    assert!(matches!(Checkpoint::from_bytes(&flipped), Err(Error::Checkpoint(_))));
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    assert!(Checkpoint::from_bytes(b"not a checkpoint").is_err());
}

#[test]
fn loading_into_a_different_width_is_a_dimension_error() {
    let corpus = common::tiny_corpus(4, 9);
    let config = TrainConfig { total_steps: 0, ..common::tiny_config() };
    let ckpt = run(&corpus, &config, TrainOptions::default()).checkpoint;
    let wider = TrainConfig { d_model: 32, d_word: 32, ..config.clone() };
    let mut model = Model::new(&wider, ckpt.dims).unwrap();
    assert!(matches!(model.load_params(&ckpt.params), Err(Error::Shape(_))));
    assert!(!ckpt.check_config(&wider));
    assert!(ckpt.check_config(&config));
    let resumed = train(&corpus, &TrainConfig { total_steps: 2, ..wider }, TrainOptions { resume: Some(ckpt), ..Default::default() });
    assert!(matches!(resumed, Err(Error::Shape(_))));
}

#[test]
fn parameter_groups_partition_the_model() {
    let corpus = common::tiny_corpus(2, 10);
    let model = common::model_for(&corpus, &common::tiny_config());
    let groups = build_param_groups(&model.store).unwrap();
    assert_eq!(groups.backbone.len() + groups.transformer.len(), model.store.len());
    assert!(groups.backbone.iter().all(|id| !groups.transformer.contains(id)));
    let id = |n: &str| model.store.find(n).unwrap();
    assert_eq!(groups.group_of(id("backbone.conv0.weight")), Some(Group::Backbone));
    assert_eq!(groups.group_of(id("heads.mrc.hidden.weight")), Some(Group::Transformer));
}

#[test]
fn periodic_checkpoints_and_logs_are_written() {
    let corpus = common::tiny_corpus(6, 11);
    let config = TrainConfig { total_steps: 12, checkpoint_every: 5, ..common::tiny_config() };
    let dir = tempfile::tempdir().unwrap();
    let out = run(&corpus, &config, TrainOptions { out_dir: Some(dir.path().into()), ..Default::default() });
    for f in ["step-000005.ckpt", "step-000010.ckpt", "final.ckpt", "timing.jsonl"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let mid = load_checkpoint(&dir.path().join("step-000010.ckpt")).unwrap();
    assert_eq!(mid.step, 10);
    let lines = fs::read_to_string(dir.path().join("metrics.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 12);
    assert_eq!(out.log.len(), 12);
}
