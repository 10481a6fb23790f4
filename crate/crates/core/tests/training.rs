mod common;

use common::*;
use dehaze_core::data::ClipPair;
use dehaze_core::losses::{FeatureExtractor, LossWeights};
use dehaze_core::pipeline::{build_model, DehazeModel, Mode, ParamGroup};
use dehaze_core::trainer::{fit, load_training_checkpoint, train_step, AdamState, Resume, TrainConfig, LATEST, LOSS_LOG};
use std::path::Path;

fn extractor() -> FeatureExtractor<f32> {
    FeatureExtractor::surrogate(&["relu1_2".into(), "relu2_2".into()], 0, 16).unwrap()
}

fn config(dir: &Path, max_steps: usize) -> TrainConfig {
    TrainConfig {
        lr: 1e-3,
        patch: 16,
        batch_size: 2,
        epochs: 100,
        seed: 5,
        loss: LossWeights {
            layer_weights: vec![1.0, 1.0],
            ..Default::default()
        },
        eval_every: 0,
        checkpoint_dir: dir.to_path_buf(),
        scale_ratios: vec![0.8],
        max_steps: Some(max_steps),
        ..Default::default()
    }
}

fn clips() -> Vec<ClipPair> {
    vec![hazy_clip("a", 1, 4, 20), hazy_clip("b", 2, 3, 20)]
}

fn fingerprints(m: &DehazeModel<f32>) -> Vec<u64> {
    ParamGroup::ALL.iter().map(|&g| m.params(g).fingerprint()).collect()
}

#[test]
fn same_seed_same_first_loss() {
    let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let run = |dir: &Path| {
        let mut m = build_model::<f32>(&tiny_config(), 1).unwrap();
        fit(&mut m, &clips(), &[], &config(dir, 2), &extractor(), None).unwrap().trace
    };
    let (a, b) = (run(d1.path()), run(d2.path()));
    assert_eq!(a, b);
    assert_eq!(a.len(), 2);
}

#[test]
fn zero_learning_rate_keeps_parameters() {
    let mut m = build_model::<f32>(&tiny_config(), 2).unwrap();
    let before = fingerprints(&m);
    let mut adam = AdamState::new(&m);
    let batch = [clips()[0].sample(1).unwrap()];
    let c = config(Path::new("unused"), 1);
    let cropped: Vec<_> = batch.iter().map(|p| dehaze_core::data::random_crop_pair(p, 16, 0).unwrap()).collect();
    train_step(&mut m, &mut adam, &cropped, &c, &extractor(), 0.0).unwrap();
    assert_eq!(fingerprints(&m), before);
}

#[test]
fn overfits_a_repeated_batch() {
    let mut m = build_model::<f32>(&tiny_config(), 3).unwrap();
    let mut adam = AdamState::new(&m);
    let c = config(Path::new("unused"), 1);
    let clip = clips().remove(0);
    let batch: Vec<_> = (0..2).map(|t| dehaze_core::data::random_crop_pair(&clip.sample(t).unwrap(), 16, t as u64).unwrap()).collect();
    let fx = extractor();
    let first = train_step(&mut m, &mut adam, &batch, &c, &fx, 1e-3).unwrap();
    assert!(first.grad_norms.iter().all(|&n| n > 0.0));
    let mut last = first.loss;
    for _ in 0..200 {
        last = train_step(&mut m, &mut adam, &batch, &c, &fx, 1e-3).unwrap().loss;
    }
    assert!(last < first.loss, "loss {} → {last}", first.loss);
}

#[test]
fn resume_reproduces_uninterrupted_run() {
    let (full_dir, split_dir) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let fx = extractor();
    let mut full = build_model::<f32>(&tiny_config(), 4).unwrap();
    let full_trace = fit(&mut full, &clips(), &[], &config(full_dir.path(), 10), &fx, None).unwrap().trace;

    let mut first = build_model::<f32>(&tiny_config(), 4).unwrap();
    let part = fit(&mut first, &clips(), &[], &config(split_dir.path(), 5), &fx, None).unwrap();
    assert_eq!(part.state.step, 5);
    let (mut resumed, adam, state) = load_training_checkpoint::<f32>(&split_dir.path().join(LATEST)).unwrap();
    assert_eq!(fingerprints(&resumed), fingerprints(&first));
    let rest = fit(&mut resumed, &clips(), &[], &config(split_dir.path(), 10), &fx, Some(Resume { adam, state })).unwrap();

    assert_eq!(rest.trace, full_trace);
    assert_eq!(fingerprints(&resumed), fingerprints(&full));
    let log = std::fs::read_to_string(split_dir.path().join(LOSS_LOG)).unwrap();
    assert_eq!(log.lines().next().unwrap(), "step,epoch,lr,total,l1_o2,l1_o3,perc_o2,perc_o3");
    assert_eq!(log.lines().count(), 11);
}

#[test]
fn stage2_only_leaves_refiner_untouched() {
    let dir = tempfile::tempdir().unwrap();
    let mut m = build_model::<f32>(&tiny_config(), 5).unwrap();
    let before = fingerprints(&m);
    let c = TrainConfig {
        mode: Mode::Stage2Only,
        ..config(dir.path(), 3)
    };
    let out = fit(&mut m, &clips(), &[], &c, &extractor(), None).unwrap();
    let after = fingerprints(&m);
    assert_eq!(after[2], before[2]);
    assert_ne!(after[0], before[0]);
    assert_ne!(after[1], before[1]);
    assert!(out.trace.iter().all(|r| r.l1_o3.is_none() && r.perc_o3.is_none()));
}

#[test]
fn zero_epochs_writes_initial_state_only() {
    let dir = tempfile::tempdir().unwrap();
    let mut m = build_model::<f32>(&tiny_config(), 6).unwrap();
    let before = fingerprints(&m);
    let c = TrainConfig {
        epochs: 0,
        ..config(dir.path(), 3)
    };
    let out = fit(&mut m, &clips(), &[], &c, &extractor(), None).unwrap();
    assert!(out.trace.is_empty());
    assert_eq!(fingerprints(&m), before);
    let (saved, _, state) = load_training_checkpoint::<f32>(&dir.path().join(LATEST)).unwrap();
    assert_eq!(state.step, 0);
    assert_eq!(fingerprints(&saved), before);
}

#[test]
fn validation_writes_best_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let mut m = build_model::<f32>(&tiny_config(), 7).unwrap();
    let c = TrainConfig {
        epochs: 2,
        eval_every: 1,
        max_steps: None,
        ..config(dir.path(), 0)
    };
    let val = vec![hazy_clip("v", 9, 3, 20)];
    let out = fit(&mut m, &clips(), &val, &c, &extractor(), None).unwrap();
    assert_eq!(out.evals.len(), 2);
    assert!(dir.path().join("best.safetensors").exists());
    assert!(out.state.best_eval.is_some());
}

#[test]
fn non_finite_loss_aborts() {
    let mut m = build_model::<f32>(&tiny_config(), 8).unwrap();
    let params = m.params_mut(ParamGroup::SharedFusion);
    let i = params.index_of("out.bias").unwrap();
    params.tensor_mut(i).data_mut()[0] = f32::NAN;
    let mut adam = AdamState::new(&m);
    let clip = clips().remove(0);
    let batch = vec![dehaze_core::data::random_crop_pair(&clip.sample(0).unwrap(), 16, 0).unwrap()];
    let err = train_step(&mut m, &mut adam, &batch, &config(Path::new("unused"), 1), &extractor(), 1e-3).unwrap_err();
    assert_eq!(err.category(), "non-finite");
}
