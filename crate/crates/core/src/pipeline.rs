//! The progressive three-stage model.
//!
//! Stage 1 runs one shared fusion network over the overlapping triplets
//! `(t−2, t−1, t)`, `(t−1, t, t+1)`, `(t, t+1, t+2)`; stage 2 fuses the three
//! stage-1 outputs into a preliminary result; stage 3 refines it against the
//! reference frame. Each fusion input carries the dark-channel haze map of
//! its middle frame.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::data::{window, FrameSequence, TimeUnit, UNIT_LEN};
use crate::error::{Error, Result};
use crate::frame::Frame;
use crate::fusion_net::{build_fusion, FusionConfig, FusionNet};
use crate::haze_model::HAZE_WINDOW;
use crate::nn::ParamSet;
use crate::refine_net::{build_refine, RefineConfig, RefineNet};
use crate::tensor::{Real, Tensor};

/// Which stage the model runs to.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Full,
    /// Ablation: stop after the second fusion stage.
    Stage2Only,
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Mode::Full),
            "stage2_only" => Ok(Mode::Stage2Only),
            other => Err(Error::Value(format!("unknown mode {other:?} (expected full or stage2_only)"))),
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Full => "full",
            Mode::Stage2Only => "stage2_only",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub fusion: FusionConfig,
    pub refine: RefineConfig,
    pub haze_window: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            fusion: FusionConfig::default(),
            refine: RefineConfig::default(),
            haze_window: HAZE_WINDOW,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.fusion.validate()?;
        self.refine.validate()?;
        if self.haze_window == 0 || self.haze_window.is_multiple_of(2) {
            return Err(Error::Value(format!("haze_window {} must be odd and positive", self.haze_window)));
        }
        Ok(())
    }

    pub fn downsampling_factor(&self) -> usize {
        self.fusion.downsampling_factor().max(self.refine.downsampling_factor())
    }
}

/// Per-stage outputs: `o1` for `t−1, t, t+1`, preliminary `o2`, final `o3`.
#[derive(Clone, Debug, PartialEq)]
pub struct StageOutputs<V> {
    pub o1: [V; 3],
    pub o2: V,
    pub o3: V,
}

/// Graph-level stage outputs; `o3` is absent when running [`Mode::Stage2Only`].
#[derive(Clone, Debug)]
pub struct StageVars<T> {
    pub o1: [Var<T>; 3],
    pub o2: Var<T>,
    pub o3: Option<Var<T>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    SharedFusion,
    Stage2Fusion,
    Refiner,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 3] = [ParamGroup::SharedFusion, ParamGroup::Stage2Fusion, ParamGroup::Refiner];

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::SharedFusion => "shared_fusion",
            ParamGroup::Stage2Fusion => "stage2_fusion",
            ParamGroup::Refiner => "refiner",
        }
    }
}

#[derive(Clone, Debug)]
pub struct DehazeModel<T> {
    shared_fusion: FusionNet<T>,
    stage2_fusion: FusionNet<T>,
    refiner: RefineNet<T>,
    haze_window: usize,
}

fn sub_seed(seed: u64, k: u64) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(k.wrapping_mul(0xbf58_476d_1ce4_e5b9)) ^ k
}

pub fn build_model<T: Real>(config: &ModelConfig, seed: u64) -> Result<DehazeModel<T>> {
    config.validate()?;
    Ok(DehazeModel {
        shared_fusion: build_fusion(&config.fusion, sub_seed(seed, 1))?,
        stage2_fusion: build_fusion(&config.fusion, sub_seed(seed, 2))?,
        refiner: build_refine(&config.refine, sub_seed(seed, 3))?,
        haze_window: config.haze_window,
    })
}

impl<T: Real> DehazeModel<T> {
    pub fn config(&self) -> ModelConfig {
        ModelConfig {
            fusion: self.shared_fusion.config().clone(),
            refine: self.refiner.config().clone(),
            haze_window: self.haze_window,
        }
    }

    pub fn haze_window(&self) -> usize {
        self.haze_window
    }

    pub fn shared_fusion(&self) -> &FusionNet<T> {
        &self.shared_fusion
    }

    pub fn stage2_fusion(&self) -> &FusionNet<T> {
        &self.stage2_fusion
    }

    pub fn refiner(&self) -> &RefineNet<T> {
        &self.refiner
    }

    pub fn params(&self, group: ParamGroup) -> &ParamSet<T> {
        match group {
            ParamGroup::SharedFusion => self.shared_fusion.params(),
            ParamGroup::Stage2Fusion => self.stage2_fusion.params(),
            ParamGroup::Refiner => self.refiner.params(),
        }
    }

    pub fn params_mut(&mut self, group: ParamGroup) -> &mut ParamSet<T> {
        match group {
            ParamGroup::SharedFusion => self.shared_fusion.params_mut(),
            ParamGroup::Stage2Fusion => self.stage2_fusion.params_mut(),
            ParamGroup::Refiner => self.refiner.params_mut(),
        }
    }

    pub fn parameter_count(&self) -> usize {
        ParamGroup::ALL.iter().map(|&g| self.params(g).count()).sum()
    }

    pub fn zero_all(&mut self) {
        for g in ParamGroup::ALL {
            self.params_mut(g).zero_all();
        }
    }

    pub fn downsampling_factor(&self) -> usize {
        self.config().downsampling_factor()
    }

    /// Runs the stages on batched unit tensors (`frames[k]` is `[n, 3, h, w]`
    /// for time offset `k − 2`). Outputs are not clamped.
    pub fn forward(&self, g: &mut Graph<T>, frames: &[Var<T>; UNIT_LEN], mode: Mode) -> Result<StageVars<T>> {
        let window = self.haze_window;
        let fuse = |g: &mut Graph<T>, net: &FusionNet<T>, a: &Var<T>, b: &Var<T>, c: &Var<T>| -> Result<Var<T>> {
            let haze = g.dark_channel(b, window);
            net.forward(g, [a, b, c], &haze)
        };
        let [f0, f1, f2, f3, f4] = frames;
        let o1 = [
            fuse(g, &self.shared_fusion, f0, f1, f2)?,
            fuse(g, &self.shared_fusion, f1, f2, f3)?,
            fuse(g, &self.shared_fusion, f2, f3, f4)?,
        ];
        let o2 = fuse(g, &self.stage2_fusion, &o1[0], &o1[1], &o1[2])?;
        let o3 = match mode {
            Mode::Full => Some(self.refiner.forward(g, &o2, f2)?),
            Mode::Stage2Only => None,
        };
        Ok(StageVars { o1, o2, o3 })
    }
}

/// Stacks the five positions of several units into batched tensors.
pub fn unit_tensors<T: Real>(units: &[&TimeUnit]) -> Result<[Tensor<T>; UNIT_LEN]> {
    let per_position = |k: usize| -> Result<Tensor<T>> {
        let parts: Vec<Tensor<T>> = units.iter().map(|u| u.frames()[k].to_tensor()).collect();
        Tensor::stack(&parts.iter().collect::<Vec<_>>())
    };
    Ok([per_position(0)?, per_position(1)?, per_position(2)?, per_position(3)?, per_position(4)?])
}

fn run_inference<T: Real>(model: &DehazeModel<T>, unit: &TimeUnit, mode: Mode) -> Result<StageVars<T>> {
    let mut g = Graph::inference();
    let tensors = unit_tensors::<T>(&[unit])?;
    let frames = tensors.map(|t| g.input(t));
    model.forward(&mut g, &frames, mode)
}

/// All stage outputs for one time unit, clamped into `[0, 1]`.
pub fn model_forward<T: Real>(model: &DehazeModel<T>, unit: &TimeUnit) -> Result<StageOutputs<Frame>> {
    let out = run_inference(model, unit, Mode::Full)?;
    let frame = |v: &Var<T>| Frame::from_tensor(v.value(), 0);
    Ok(StageOutputs {
        o1: [frame(&out.o1[0])?, frame(&out.o1[1])?, frame(&out.o1[2])?],
        o2: frame(&out.o2)?,
        o3: frame(out.o3.as_ref().expect("full mode"))?,
    })
}

/// The preliminary (stage-2) result only; the refiner is not evaluated.
pub fn model_forward_stage2<T: Real>(model: &DehazeModel<T>, unit: &TimeUnit) -> Result<Frame> {
    let out = run_inference(model, unit, Mode::Stage2Only)?;
    Frame::from_tensor(out.o2.value(), 0)
}

/// Restores every frame of a clip through its sliding window. Frames whose
/// size is not a multiple of the model's downsampling factor are
/// reflect-padded and cropped back afterwards.
pub fn dehaze_sequence<T: Real>(model: &DehazeModel<T>, seq: &FrameSequence) -> Result<FrameSequence> {
    dehaze_sequence_with(model, seq, Mode::Full)
}

pub fn dehaze_sequence_with<T: Real>(model: &DehazeModel<T>, seq: &FrameSequence, mode: Mode) -> Result<FrameSequence> {
    let (h, w) = seq.dims();
    let factor = model.downsampling_factor();
    let (ph, pw) = (h.div_ceil(factor) * factor, w.div_ceil(factor) * factor);
    let padded = if (ph, pw) == (h, w) {
        seq.clone()
    } else {
        seq.map_frames(|f| Ok(f.pad_reflect(ph - h, pw - w)))?
    };
    let mut out = Vec::with_capacity(seq.len());
    for t in 0..seq.len() {
        let unit = window(&padded, t)?;
        let stages = run_inference(model, &unit, mode)?;
        let result = match mode {
            Mode::Full => stages.o3.expect("full mode"),
            Mode::Stage2Only => stages.o2,
        };
        let frame = Frame::from_tensor(result.value(), 0)?;
        out.push(if (ph, pw) == (h, w) { frame } else { frame.crop(0, 0, h, w)? });
    }
    FrameSequence::with_names(seq.clip_id.clone(), out, seq.names().to_vec())
}
