//! Command-line front end: `synth`, `train`, `dehaze`, `eval`.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::checkpoint::{self, write_tensors};
use crate::config::RunConfig;
use crate::data::{clip_dirs, list_frames, load_dataset, load_sequence, save_sequence, synthetic, FrameSequence};
use crate::error::{Error, Result};
use crate::haze_model::{synthesize_sequence, HazeFieldSpec};
use crate::losses::FeatureExtractor;
use crate::metrics::{evaluate_clip, summary_json, write_csv, EvalReport};
use crate::pipeline::{build_model, dehaze_sequence_with, Mode};
use crate::tensor::Tensor;
use crate::trainer::{fit, load_training_checkpoint, Resume, LATEST};

/// Name of the per-clip haze sidecar written by `synth`.
pub const SIDECAR: &str = "haze.safetensors";
/// Resolved config persisted next to the checkpoints.
pub const RESOLVED_CONFIG: &str = "config.resolved.json";

#[derive(Debug, Parser)]
#[command(name = "dehaze", version, about = "Progressive alignment-free video dehazing")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Haze clean clips into a `<clip>/{hazy,gt}` dataset.
    Synth(SynthArgs),
    /// Train a model from a config file.
    Train(TrainArgs),
    /// Restore every frame of a clip directory.
    Dehaze(DehazeArgs),
    /// Score predictions against ground truth (CSV + JSON).
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Directory of clean clip directories.
    #[arg(long, conflicts_with = "procedural", required_unless_present = "procedural")]
    pub clean: Option<PathBuf>,
    /// Generate this many procedural clean clips instead of reading `--clean`.
    #[arg(long)]
    pub procedural: Option<usize>,
    #[arg(long, default_value_t = 20)]
    pub frames: usize,
    /// Procedural frame height and width.
    #[arg(long, default_value_t = 96)]
    pub size: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub base_transmission: Option<f64>,
    #[arg(long)]
    pub spatial_smoothness: Option<f64>,
    #[arg(long)]
    pub temporal_drift: Option<f64>,
    #[arg(long)]
    pub spatial_variation: Option<f64>,
    #[arg(long)]
    pub airlight: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub mode: Option<Mode>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Continue from a training checkpoint (default: `latest` in the
    /// checkpoint directory).
    #[arg(long)]
    pub resume: Option<Option<PathBuf>>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub max_steps: Option<usize>,
}

#[derive(Debug, Args)]
pub struct DehazeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Run only the two fusion stages.
    #[arg(long, default_value_t = Mode::Full)]
    pub mode: Mode,
    pub input: PathBuf,
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Predicted frames: a clip directory or a directory of clips.
    pub pred: PathBuf,
    /// Ground truth with the same structure.
    pub gt: PathBuf,
    /// Output path stem; `.csv` and `.json` are written next to it.
    #[arg(long)]
    pub report: PathBuf,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => cmd_synth(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Dehaze(a) => cmd_dehaze(&a),
        Command::Eval(a) => cmd_eval(&a),
    }
}

fn haze_spec(a: &SynthArgs) -> HazeFieldSpec {
    let d = HazeFieldSpec::default();
    HazeFieldSpec {
        base_transmission: a.base_transmission.unwrap_or(d.base_transmission),
        spatial_smoothness: a.spatial_smoothness.unwrap_or(d.spatial_smoothness),
        temporal_drift: a.temporal_drift.unwrap_or(d.temporal_drift),
        spatial_variation: a.spatial_variation.unwrap_or(d.spatial_variation),
        airlight_value: a.airlight.unwrap_or(d.airlight_value),
        seed: a.seed,
    }
}

fn dir_name(p: &Path) -> String {
    p.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string()
}

pub fn cmd_synth(a: &SynthArgs) -> Result<()> {
    let base = haze_spec(a);
    base.validate()?;
    let clean: Vec<FrameSequence> = match (&a.clean, a.procedural) {
        (Some(dir), _) => {
            let clips = clip_dirs(dir)?;
            if clips.is_empty() {
                return Err(Error::NotFound(dir.clone()));
            }
            clips.iter().map(|d| load_sequence(d)).collect::<Result<_>>()?
        }
        (None, Some(n)) => (0..n)
            .map(|i| synthetic::clean_clip(&format!("clip{i:03}"), a.seed.wrapping_add(i as u64), a.frames, a.size, a.size))
            .collect::<Result<_>>()?,
        (None, None) => return Err(Error::Value("synth needs --clean or --procedural".into())),
    };
    for (i, seq) in clean.iter().enumerate() {
        let spec = HazeFieldSpec {
            seed: a.seed.wrapping_add(i as u64),
            ..base.clone()
        };
        let (hazy, params) = synthesize_sequence(seq, &spec)?;
        let root = a.out.join(&seq.clip_id);
        save_sequence(&hazy, &root.join("hazy"))?;
        save_sequence(seq, &root.join("gt"))?;
        let (h, w) = seq.dims();
        let data: Vec<f64> = params.iter().flat_map(|p| p.transmission().iter().copied()).collect();
        let t = Tensor::from_vec([params.len(), 1, h, w], data)?;
        let mut meta = HashMap::new();
        meta.insert("spec".to_string(), serde_json::to_string(&spec)?);
        meta.insert("frames".to_string(), serde_json::to_string(seq.names())?);
        write_tensors(&root.join(SIDECAR), &[("transmission".to_string(), &t)], meta)?;
        eprintln!("synth: {} ({} frames)", seq.clip_id, seq.len());
    }
    Ok(())
}

pub fn cmd_train(a: &TrainArgs) -> Result<()> {
    let mut config = RunConfig::load(&a.config)?;
    if let Some(m) = a.mode {
        config.train.mode = m;
    }
    if let Some(s) = a.seed {
        config.train.seed = s;
    }
    if let Some(e) = a.epochs {
        config.train.epochs = e;
    }
    if a.max_steps.is_some() {
        config.train.max_steps = a.max_steps;
    }
    config.validate()?;
    let train = load_dataset(&config.data.train_dir)?;
    let val = match &config.data.val_dir {
        Some(d) => load_dataset(d)?,
        None => Vec::new(),
    };
    let dir = &config.train.checkpoint_dir;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let resolved = dir.join(RESOLVED_CONFIG);
    std::fs::write(&resolved, config.to_json()?).map_err(|e| Error::io(&resolved, e))?;

    let fx = FeatureExtractor::<f32>::new(&config.extractor)?;
    let (mut model, resume) = match &a.resume {
        Some(p) => {
            let path = p.clone().unwrap_or_else(|| dir.join(LATEST));
            let (model, adam, state) = load_training_checkpoint::<f32>(&path)?;
            if model.config() != config.model {
                return Err(Error::Version(format!(
                    "{}: model config differs from {}",
                    path.display(),
                    a.config.display()
                )));
            }
            (model, Some(Resume { adam, state }))
        }
        None => (build_model::<f32>(&config.model, config.train.seed)?, None),
    };
    let outcome = fit(&mut model, &train, &val, &config.train, &fx, resume)?;
    let last = outcome.trace.last().map(|r| r.total);
    eprintln!(
        "train: {} steps, {} epochs, last loss {}",
        outcome.state.step,
        outcome.state.epoch,
        last.map_or("-".to_string(), |v| format!("{v:.5}"))
    );
    Ok(())
}

pub fn cmd_dehaze(a: &DehazeArgs) -> Result<()> {
    let loaded = checkpoint::load::<f32>(&a.checkpoint, None)?;
    let seq = load_sequence(&a.input)?;
    let out = dehaze_sequence_with(&loaded.model, &seq, a.mode)?;
    save_sequence(&out, &a.output)?;
    eprintln!("dehaze: {} frames → {}", out.len(), a.output.display());
    Ok(())
}

/// A clip directory, or its `sub` directory when frames live there.
fn frames_dir(dir: &Path, sub: &str) -> Result<PathBuf> {
    if !list_frames(dir)?.is_empty() {
        return Ok(dir.to_path_buf());
    }
    let nested = dir.join(sub);
    if nested.is_dir() {
        return Ok(nested);
    }
    Err(Error::NotFound(dir.to_path_buf()))
}

fn has_frames(dir: &Path) -> bool {
    list_frames(dir).is_ok_and(|f| !f.is_empty())
}

/// `(clip, pred dir, gt dir)` triples. A bare clip directory counts as one
/// clip; dataset roots contribute every clip directory of `gt`.
fn eval_pairs(pred: &Path, gt: &Path) -> Result<Vec<(String, PathBuf, PathBuf)>> {
    if has_frames(gt) || gt.join("gt").is_dir() {
        return Ok(vec![(dir_name(gt), frames_dir(pred, "hazy")?, frames_dir(gt, "gt")?)]);
    }
    let mut out = Vec::new();
    for g in clip_dirs(gt)? {
        let clip = dir_name(&g);
        let p = pred.join(&clip);
        if !p.is_dir() {
            return Err(Error::NotFound(p));
        }
        out.push((clip, frames_dir(&p, "hazy")?, frames_dir(&g, "gt")?));
    }
    if out.is_empty() {
        return Err(Error::NotFound(gt.to_path_buf()));
    }
    Ok(out)
}

pub fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let mut reports: Vec<(String, EvalReport)> = Vec::new();
    for (clip, p, g) in eval_pairs(&a.pred, &a.gt)? {
        let pred = load_sequence(&p)?;
        let mut gt = load_sequence(&g)?;
        gt.clip_id = clip.clone();
        reports.push((clip, evaluate_clip(&pred, &gt)?));
    }
    if let Some(parent) = a.report.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let csv_path = a.report.with_extension("csv");
    let json_path = a.report.with_extension("json");
    write_csv(&csv_path, &reports)?;
    let summary = summary_json(&reports);
    std::fs::write(&json_path, serde_json::to_string_pretty(&summary)?).map_err(|e| Error::io(&json_path, e))?;
    eprintln!(
        "eval: {} clips, mean psnr {}, mean ssim {}",
        reports.len(),
        summary["mean_psnr"],
        summary["mean_ssim"]
    );
    Ok(())
}

/// One-line failure message: `error[<category>]: <message>`.
pub fn error_line(e: &Error) -> String {
    let msg = e.to_string().replace('\n', " ");
    format!("error[{}]: {msg}", e.category())
}
