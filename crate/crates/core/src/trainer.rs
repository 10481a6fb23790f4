//! Adam training with a step learning-rate drop, deterministic patch
//! sampling, periodic validation and resumable checkpoints.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::checkpoint;
use crate::data::{multi_scale_expand_clips, random_crop_pair, ClipPair, SamplePair};
use crate::error::{Error, Result};
use crate::frame::Frame;
use crate::losses::{total_loss_var, FeatureExtractor, LossTerms, LossWeights};
use crate::metrics::{evaluate_clip, EvalReport, FrameScore};
use crate::pipeline::{dehaze_sequence_with, unit_tensors, DehazeModel, Mode, ParamGroup};
use crate::tensor::{Real, Tensor};

pub const LOSS_LOG: &str = "loss_log.csv";
pub const LATEST: &str = "latest.safetensors";
pub const BEST: &str = "best.safetensors";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub lr_drop_epoch: usize,
    pub lr_drop_factor: f64,
    pub patch: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub mode: Mode,
    pub loss: LossWeights,
    /// Validate every this many epochs; 0 disables validation.
    pub eval_every: usize,
    pub checkpoint_dir: PathBuf,
    pub scale_ratios: Vec<f64>,
    pub flip_augment: bool,
    pub adam: AdamConfig,
    /// Stops after this many optimizer steps in total, if set.
    pub max_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            lr_drop_epoch: 200,
            lr_drop_factor: 0.1,
            patch: 512,
            batch_size: 4,
            epochs: 300,
            seed: 0,
            mode: Mode::Full,
            loss: LossWeights::default(),
            eval_every: 1,
            checkpoint_dir: PathBuf::from("checkpoints"),
            scale_ratios: vec![0.75, 0.5],
            flip_augment: false,
            adam: AdamConfig::default(),
            max_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, downsampling_factor: usize) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("lr {} must be > 0", self.lr)));
        }
        if !(self.lr_drop_factor > 0.0 && self.lr_drop_factor <= 1.0) {
            return Err(Error::Config(format!("lr_drop_factor {} not in (0, 1]", self.lr_drop_factor)));
        }
        if self.patch == 0 || !self.patch.is_multiple_of(downsampling_factor) {
            return Err(Error::Config(format!(
                "patch {} must be a positive multiple of {downsampling_factor}",
                self.patch
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be ≥ 1".into()));
        }
        let a = &self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || a.eps.is_nan() || a.eps <= 0.0 {
            return Err(Error::Config("adam betas must lie in [0, 1) and eps be > 0".into()));
        }
        self.loss.validate()
    }
}

/// Learning rate for a 0-based epoch index: the drop applies from
/// `lr_drop_epoch` on.
pub fn lr_schedule(epoch: usize, config: &TrainConfig) -> f64 {
    if epoch < config.lr_drop_epoch {
        config.lr
    } else {
        config.lr * config.lr_drop_factor
    }
}

/// First and second moments for every parameter of the three sets.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub m: Vec<Vec<Tensor<T>>>,
    pub v: Vec<Vec<Tensor<T>>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(model: &DehazeModel<T>) -> Self {
        let zeros = || {
            ParamGroup::ALL
                .iter()
                .map(|&g| model.params(g).iter().map(|(_, t)| Tensor::zeros(t.shape())).collect())
                .collect()
        };
        Self { step: 0, m: zeros(), v: zeros() }
    }
}

/// One Adam step with bias correction on a single array.
pub fn adam_update<T: Real>(param: &mut [T], grad: &[T], m: &mut [T], v: &mut [T], step: u64, lr: f64, cfg: &AdamConfig) {
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = 1.0 - b1.powi(step as i32);
    let c2 = 1.0 - b2.powi(step as i32);
    for i in 0..param.len() {
        let g = grad[i].as_f64();
        let mi = b1 * m[i].as_f64() + (1.0 - b1) * g;
        let vi = b2 * v[i].as_f64() + (1.0 - b2) * g * g;
        m[i] = T::lit(mi);
        v[i] = T::lit(vi);
        let update = lr * (mi / c1) / ((vi / c2).sqrt() + cfg.eps);
        param[i] = T::lit(param[i].as_f64() - update);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub loss: f64,
    pub terms: LossTerms,
    /// L2 norm of the gradient per parameter set, in [`ParamGroup::ALL`] order.
    pub grad_norms: [f64; 3],
}

/// Forward, loss, backward and one Adam update on a batch of equally sized
/// samples.
pub fn train_step<T: Real>(
    model: &mut DehazeModel<T>,
    adam: &mut AdamState<T>,
    batch: &[SamplePair],
    config: &TrainConfig,
    fx: &FeatureExtractor<T>,
    lr: f64,
) -> Result<StepReport> {
    if batch.is_empty() {
        return Err(Error::Value("empty batch".into()));
    }
    let factor = model.downsampling_factor();
    let (h, w) = batch[0].target.dims();
    if h % factor != 0 || w % factor != 0 {
        return Err(Error::Dimension(format!("{h}×{w} patches are not divisible by {factor}")));
    }
    let units: Vec<_> = batch.iter().map(|p| &p.input).collect();
    let targets: Vec<Tensor<T>> = batch.iter().map(|p| p.target.to_tensor()).collect();
    let target = Tensor::stack(&targets.iter().collect::<Vec<_>>())?;

    let mut g = Graph::new();
    let frames = unit_tensors::<T>(&units)?.map(|t| g.constant(t));
    let stages = model.forward(&mut g, &frames, config.mode)?;
    let (loss, terms) = total_loss_var(&mut g, &stages, &target, &config.loss, fx)?;
    let value = loss.value().item().as_f64();
    if !value.is_finite() {
        return Err(Error::NonFinite {
            step: adam.step,
            detail: format!("loss {value} ({terms:?})"),
        });
    }
    let grads = g.backward(&loss)?;
    let mut collected: Vec<Vec<Option<Tensor<T>>>> = Vec::with_capacity(3);
    let mut grad_norms = [0.0; 3];
    for (gi, &group) in ParamGroup::ALL.iter().enumerate() {
        let params = model.params(group);
        let per: Vec<Option<Tensor<T>>> = (0..params.len()).map(|i| grads.wrt_param(params.get(i)).cloned()).collect();
        grad_norms[gi] = per.iter().flatten().map(|t| t.l2_norm().powi(2)).sum::<f64>().sqrt();
        collected.push(per);
    }
    if let Some(bad) = collected.iter().flatten().flatten().find(|t| !t.all_finite()) {
        return Err(Error::NonFinite {
            step: adam.step,
            detail: format!("gradient of shape {:?} is not finite", bad.shape()),
        });
    }
    drop(grads);
    drop(stages);
    drop(frames);
    drop(loss);
    drop(g);

    adam.step += 1;
    for (gi, &group) in ParamGroup::ALL.iter().enumerate() {
        let params = model.params_mut(group);
        for (i, grad) in collected[gi].iter().enumerate() {
            let Some(grad) = grad else { continue };
            adam_update(
                params.tensor_mut(i).data_mut(),
                grad.data(),
                adam.m[gi][i].data_mut(),
                adam.v[gi][i].data_mut(),
                adam.step,
                lr,
                &config.adam,
            );
        }
    }
    Ok(StepReport { loss: value, terms, grad_norms })
}

/// Serializable progress; the moments travel as checkpoint tensors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub epoch: usize,
    pub step: usize,
    /// Batches of `epoch` already consumed.
    pub batch_in_epoch: usize,
    /// `(mean psnr, mean ssim)` of the best validation so far.
    pub best_eval: Option<(f64, f64)>,
    pub seed: u64,
    pub mode: Mode,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub total: f64,
    pub l1_o2: f64,
    pub l1_o3: Option<f64>,
    pub perc_o2: f64,
    pub perc_o3: Option<f64>,
}

pub struct FitOutcome {
    pub state: TrainState,
    pub trace: Vec<LogRow>,
    pub evals: Vec<(usize, EvalReport)>,
}

fn adam_tensor_names<T: Real>(model: &DehazeModel<T>, which: &str) -> Vec<Vec<String>> {
    ParamGroup::ALL
        .iter()
        .map(|&g| {
            model
                .params(g)
                .iter()
                .map(|(n, _)| format!("adam.{which}.{}.{n}", g.name()))
                .collect()
        })
        .collect()
}

pub fn save_training_checkpoint<T: Real>(path: &Path, model: &DehazeModel<T>, adam: &AdamState<T>, state: &TrainState) -> Result<()> {
    let mut extra = Vec::new();
    for (which, moments) in [("m", &adam.m), ("v", &adam.v)] {
        for (names, tensors) in adam_tensor_names(model, which).into_iter().zip(moments) {
            extra.extend(names.into_iter().zip(tensors.iter()));
        }
    }
    let state_json = serde_json::to_string(state)?;
    checkpoint::save(path, model, Some(&state_json), &extra)
}

/// Model, optimizer moments and progress from a training checkpoint.
pub fn load_training_checkpoint<T: Real>(path: &Path) -> Result<(DehazeModel<T>, AdamState<T>, TrainState)> {
    let mut loaded = checkpoint::load::<T>(path, None)?;
    let state: TrainState = match &loaded.train_state {
        Some(s) => serde_json::from_str(s)?,
        None => return Err(Error::Format(format!("{} has no training state", path.display()))),
    };
    let mut adam = AdamState::new(&loaded.model);
    adam.step = state.step as u64;
    for (which, moments) in [("m", &mut adam.m), ("v", &mut adam.v)] {
        for (names, tensors) in adam_tensor_names(&loaded.model, which).into_iter().zip(moments.iter_mut()) {
            for (name, t) in names.iter().zip(tensors.iter_mut()) {
                let stored = loaded
                    .extra
                    .remove(name)
                    .ok_or_else(|| Error::Version(format!("{}: missing optimizer tensor {name}", path.display())))?;
                *t = Tensor::from_vec(t.shape(), stored.into_vec())
                    .map_err(|_| Error::Version(format!("{}: optimizer tensor {name} has the wrong size", path.display())))?;
            }
        }
    }
    Ok((loaded.model, adam, state))
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed ^ a.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ b.wrapping_mul(0xc2b2_ae3d_27d4_eb4f);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn flip_h(f: &Frame) -> Frame {
    let w = f.width();
    Frame::from_fn(f.height(), w, |y, x, c| f.get(y, w - 1 - x, c)).expect("same dims")
}

/// Every `(clip, t)` window of the clips that can hold a patch.
fn sample_index(clips: &[ClipPair], patch: usize) -> Vec<(usize, usize)> {
    clips
        .iter()
        .enumerate()
        .filter(|(_, c)| {
            let (h, w) = c.hazy.dims();
            h >= patch && w >= patch
        })
        .flat_map(|(ci, c)| (0..c.len()).map(move |t| (ci, t)))
        .collect()
}

fn epoch_order(index_len: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..index_len).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(seed, 1, epoch as u64)));
    order
}

/// Validation: dehaze every val clip with the mode's output stage and score
/// it against the ground truth.
pub fn evaluate<T: Real>(model: &DehazeModel<T>, val: &[ClipPair], mode: Mode) -> Result<EvalReport> {
    let mut scores: Vec<FrameScore> = Vec::new();
    for clip in val {
        let pred = dehaze_sequence_with(model, &clip.hazy, mode)?;
        scores.extend(evaluate_clip(&pred, &clip.gt)?.per_frame);
    }
    Ok(EvalReport::from_scores(scores))
}

fn rewrite_log(path: &Path, keep_before: usize) -> Result<Vec<LogRow>> {
    let mut kept = Vec::new();
    if path.exists() {
        let mut r = csv::Reader::from_path(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        for row in r.deserialize::<LogRow>() {
            let row = row.map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
            if row.step < keep_before {
                kept.push(row);
            }
        }
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    if kept.is_empty() {
        w.write_record(["step", "epoch", "lr", "total", "l1_o2", "l1_o3", "perc_o2", "perc_o3"])
            .map_err(|e| Error::Format(e.to_string()))?;
    }
    for row in &kept {
        w.serialize(row).map_err(|e| Error::Format(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(kept)
}

/// A run to start or continue.
pub struct Resume<T> {
    pub adam: AdamState<T>,
    pub state: TrainState,
}

/// Trains `model` in place. Writes `latest` after every epoch and when the
/// run stops, `best` whenever validation improves, and appends one row per
/// step to the loss log.
pub fn fit<T: Real>(
    model: &mut DehazeModel<T>,
    train: &[ClipPair],
    val: &[ClipPair],
    config: &TrainConfig,
    fx: &FeatureExtractor<T>,
    resume: Option<Resume<T>>,
) -> Result<FitOutcome> {
    config.validate(model.downsampling_factor())?;
    if train.is_empty() {
        return Err(Error::Value("training set is empty".into()));
    }
    let dir = &config.checkpoint_dir;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (mut adam, mut state) = match resume {
        Some(r) => (r.adam, r.state),
        None => (
            AdamState::new(model),
            TrainState {
                epoch: 0,
                step: 0,
                batch_in_epoch: 0,
                best_eval: None,
                seed: config.seed,
                mode: config.mode,
            },
        ),
    };
    let log_path = dir.join(LOSS_LOG);
    let mut trace = rewrite_log(&log_path, state.step)?;
    let mut log = std::fs::OpenOptions::new()
        .append(true)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;

    let clips = multi_scale_expand_clips(train, &config.scale_ratios)?;
    let index = sample_index(&clips, config.patch);
    if index.is_empty() {
        return Err(Error::Dimension(format!("no training clip is at least {0}×{0}", config.patch)));
    }
    let batches_per_epoch = index.len().div_ceil(config.batch_size);
    let mut evals = Vec::new();
    let reached_max = |s: &TrainState| config.max_steps.is_some_and(|m| s.step >= m);

    'epochs: while state.epoch < config.epochs {
        let order = epoch_order(index.len(), config.seed, state.epoch);
        let lr = lr_schedule(state.epoch, config);
        while state.batch_in_epoch < batches_per_epoch {
            if reached_max(&state) {
                break 'epochs;
            }
            let b = state.batch_in_epoch;
            let positions = &order[b * config.batch_size..((b + 1) * config.batch_size).min(order.len())];
            let mut batch = Vec::with_capacity(positions.len());
            for (k, &pos) in positions.iter().enumerate() {
                let (ci, t) = index[pos];
                let sample_seed = mix(config.seed, 2 + state.epoch as u64, (b * config.batch_size + k) as u64);
                let mut pair = random_crop_pair(&clips[ci].sample(t)?, config.patch, sample_seed)?;
                if config.flip_augment && ChaCha8Rng::seed_from_u64(sample_seed ^ 0x5a5a).gen_bool(0.5) {
                    pair = SamplePair::new(pair.input.map(|f| Ok(flip_h(f)))?, flip_h(&pair.target))?;
                }
                batch.push(pair);
            }
            let report = train_step(model, &mut adam, &batch, config, fx, lr)?;
            let row = LogRow {
                step: state.step,
                epoch: state.epoch,
                lr,
                total: report.loss,
                l1_o2: report.terms.l1_o2,
                l1_o3: report.terms.l1_o3,
                perc_o2: report.terms.perc_o2,
                perc_o3: report.terms.perc_o3,
            };
            let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
            w.serialize(&row).map_err(|e| Error::Format(e.to_string()))?;
            let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
            log.write_all(&bytes).map_err(|e| Error::io(&log_path, e))?;
            trace.push(row);
            state.step += 1;
            state.batch_in_epoch += 1;
        }
        state.epoch += 1;
        state.batch_in_epoch = 0;
        if config.eval_every > 0 && !val.is_empty() && state.epoch % config.eval_every == 0 {
            let report = evaluate(model, val, config.mode)?;
            let better = match state.best_eval {
                None => true,
                Some((p, _)) => report.mean_psnr > p,
            };
            if better {
                state.best_eval = Some((report.mean_psnr, report.mean_ssim));
                save_training_checkpoint(&dir.join(BEST), model, &adam, &state)?;
            }
            evals.push((state.epoch, report));
        }
        save_training_checkpoint(&dir.join(LATEST), model, &adam, &state)?;
    }
    save_training_checkpoint(&dir.join(LATEST), model, &adam, &state)?;
    Ok(FitOutcome { state, trace, evals })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_boundary() {
        let c = TrainConfig::default();
        assert_eq!(lr_schedule(0, &c), 1e-4);
        assert_eq!(lr_schedule(199, &c), 1e-4);
        assert!((lr_schedule(200, &c) - 1e-5).abs() < 1e-20);
        let flat = TrainConfig { lr_drop_factor: 1.0, ..c };
        assert_eq!(lr_schedule(250, &flat), 1e-4);
    }

    /// Hand-written Adam on f(x, y) = x² + 3y² against the library update.
    #[test]
    fn adam_matches_reference() {
        let cfg = AdamConfig::default();
        let lr = 0.05;
        let mut p = [1.0f64, -2.0];
        let (mut m, mut v) = ([0.0f64; 2], [0.0f64; 2]);
        let (mut rp, mut rm, mut rv) = ([1.0f64, -2.0], [0.0f64; 2], [0.0f64; 2]);
        for t in 1..=50u64 {
            let grad = [2.0 * p[0], 6.0 * p[1]];
            adam_update(&mut p, &grad, &mut m, &mut v, t, lr, &cfg);

            let rg = [2.0 * rp[0], 6.0 * rp[1]];
            for i in 0..2 {
                rm[i] = 0.9 * rm[i] + 0.1 * rg[i];
                rv[i] = 0.999 * rv[i] + 0.001 * rg[i] * rg[i];
                let mh = rm[i] / (1.0 - 0.9f64.powi(t as i32));
                let vh = rv[i] / (1.0 - 0.999f64.powi(t as i32));
                rp[i] -= lr * mh / (vh.sqrt() + 1e-8);
            }
            for i in 0..2 {
                assert!((p[i] - rp[i]).abs() < 1e-10);
            }
        }
        assert!(p[0].abs() < 1.0 && p[1].abs() < 2.0);
    }

    #[test]
    fn zero_lr_leaves_params() {
        let mut p = [0.5f32, 0.25];
        let (mut m, mut v) = ([0.0f32; 2], [0.0f32; 2]);
        adam_update(&mut p, &[1.0, -1.0], &mut m, &mut v, 1, 0.0, &AdamConfig::default());
        assert_eq!(p, [0.5, 0.25]);
    }

    #[test]
    fn epoch_order_is_deterministic_permutation() {
        let a = epoch_order(20, 3, 1);
        assert_eq!(a, epoch_order(20, 3, 1));
        assert_ne!(a, epoch_order(20, 3, 2));
        let mut s = a.clone();
        s.sort();
        assert_eq!(s, (0..20).collect::<Vec<_>>());
    }

    #[test]
    fn validate_rejects_bad_patch() {
        let c = TrainConfig { patch: 66, ..Default::default() };
        assert!(c.validate(4).is_err());
        assert!(TrainConfig { patch: 64, ..c }.validate(4).is_ok());
    }
}
