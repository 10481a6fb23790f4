//! Training objective: Smooth-L1 pixel loss plus a VGG-19 feature loss,
//! applied to the preliminary and final outputs.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::checkpoint::{read_file, values_from_view};
use crate::error::{Error, Result};
use crate::frame::Frame;
use crate::nn::{Conv, Init, ParamSet};
use crate::pipeline::{StageOutputs, StageVars};
use crate::tensor::{Real, Tensor};

/// ImageNet channel statistics the extractor expects.
pub const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub layer_weights: Vec<f64>,
    /// `(o2, o3)`
    pub stage_weights: [f64; 2],
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 10.0,
            beta: 1.0,
            layer_weights: vec![1.0; 3],
            stage_weights: [1.0, 1.0],
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let finite = |v: f64| v.is_finite() && v >= 0.0;
        if !finite(self.alpha) || !finite(self.beta) {
            return Err(Error::Config(format!("alpha {} and beta {} must be finite and ≥ 0", self.alpha, self.beta)));
        }
        if self.layer_weights.is_empty() {
            return Err(Error::Config("layer_weights must not be empty".into()));
        }
        if !self.layer_weights.iter().chain(&self.stage_weights).all(|&v| v.is_finite()) {
            return Err(Error::Config("layer and stage weights must be finite".into()));
        }
        Ok(())
    }

    /// Weighted sum of already-evaluated terms. Missing o3 terms count as zero.
    pub fn combine(&self, terms: &LossTerms) -> f64 {
        let [w2, w3] = self.stage_weights;
        let stage = |l1: f64, perc: f64| self.alpha * l1 + self.beta * perc;
        w2 * stage(terms.l1_o2, terms.perc_o2) + w3 * stage(terms.l1_o3.unwrap_or(0.0), terms.perc_o3.unwrap_or(0.0))
    }
}

/// The four loss terms; the o3 terms are absent when the refiner is skipped.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub l1_o2: f64,
    pub l1_o3: Option<f64>,
    pub perc_o2: f64,
    pub perc_o3: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExtractorConfig {
    /// Tapped activations, e.g. `relu2_2`.
    pub layers: Vec<String>,
    /// Pretrained weights in safetensors form with torchvision
    /// `features.{i}.weight` / `features.{i}.bias` names. Without a file a
    /// seeded random surrogate is built.
    pub weights: Option<PathBuf>,
    pub surrogate_seed: u64,
    /// Divides every surrogate channel count; 1 keeps the VGG-19 widths.
    pub surrogate_width_divisor: usize,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        Self {
            layers: vec!["relu1_2".into(), "relu2_2".into(), "relu3_4".into()],
            weights: None,
            surrogate_seed: 0,
            surrogate_width_divisor: 1,
        }
    }
}

/// VGG-19 `features` topology: channel count per conv, 0 for max-pool.
const VGG19: [usize; 21] = [64, 64, 0, 128, 128, 0, 256, 256, 256, 256, 0, 512, 512, 512, 512, 0, 512, 512, 512, 512, 0];

#[derive(Clone, Debug)]
enum Step {
    Conv { conv: Conv, tap: Option<usize> },
    Pool,
}

/// Frozen convolutional feature pyramid.
#[derive(Clone, Debug)]
pub struct FeatureExtractor<T> {
    params: ParamSet<T>,
    steps: Vec<Step>,
    layers: Vec<String>,
    pretrained: bool,
}

/// `(name, torch module index)` of every conv in order.
fn vgg_conv_names() -> Vec<(String, usize)> {
    let (mut block, mut within, mut index) = (1, 0, 0);
    let mut out = Vec::new();
    for &c in &VGG19 {
        if c == 0 {
            block += 1;
            within = 0;
            index += 1;
        } else {
            within += 1;
            out.push((format!("relu{block}_{within}"), index));
            index += 2;
        }
    }
    out
}

impl<T: Real> FeatureExtractor<T> {
    pub fn new(config: &ExtractorConfig) -> Result<Self> {
        match &config.weights {
            Some(path) => Self::pretrained(&config.layers, path),
            None => Self::surrogate(&config.layers, config.surrogate_seed, config.surrogate_width_divisor),
        }
    }

    /// Seeded random weights with the VGG-19 layout, channel counts divided by
    /// `width_divisor`.
    pub fn surrogate(layers: &[String], seed: u64, width_divisor: usize) -> Result<Self> {
        if width_divisor == 0 {
            return Err(Error::Config("surrogate_width_divisor must be ≥ 1".into()));
        }
        Self::build(layers, &mut Init::new(seed), width_divisor)
    }

    pub fn pretrained(layers: &[String], path: &Path) -> Result<Self> {
        let mut fx = Self::build(layers, &mut Init::new(0), 1)?;
        fx.pretrained = true;
        let bytes = read_file(path)?;
        let st = safetensors::SafeTensors::deserialize(&bytes)?;
        for i in 0..fx.params.len() {
            let name = fx.params.name(i).to_string();
            let view = st
                .tensor(&name)
                .map_err(|_| Error::Format(format!("{}: missing tensor {name}", path.display())))?;
            let values = values_from_view::<T>(&name, &view)?;
            let shape = fx.params.get(i).shape();
            let t = Tensor::from_vec(shape, values)
                .map_err(|_| Error::Format(format!("{}: tensor {name} has shape {:?}, expected {shape:?}", path.display(), view.shape())))?;
            fx.params.set(i, t)?;
        }
        Ok(fx)
    }

    fn build(layers: &[String], init: &mut Init, divisor: usize) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("extractor needs at least one layer".into()));
        }
        let names = vgg_conv_names();
        let mut taps = Vec::with_capacity(layers.len());
        for l in layers {
            let pos = names
                .iter()
                .position(|(n, _)| n == l)
                .ok_or_else(|| Error::Config(format!("unknown extractor layer {l:?} (expected reluB_K of VGG-19)")))?;
            if taps.contains(&pos) {
                return Err(Error::Config(format!("extractor layer {l:?} listed twice")));
            }
            taps.push(pos);
        }
        let deepest = *taps.iter().max().expect("nonempty");
        let mut params = ParamSet::new();
        let mut steps = Vec::new();
        let (mut cin, mut conv_i) = (3, 0);
        for &c in &VGG19 {
            if conv_i > deepest {
                break;
            }
            if c == 0 {
                steps.push(Step::Pool);
                continue;
            }
            let cout = (c / divisor).max(1);
            let name = format!("features.{}", names[conv_i].1);
            let conv = Conv::new(&mut params, init, &name, cin, cout, 3, 1, 2f64.sqrt());
            let tap = taps.iter().position(|&t| t == conv_i);
            steps.push(Step::Conv { conv, tap });
            cin = cout;
            conv_i += 1;
        }
        Ok(Self {
            params,
            steps,
            layers: layers.to_vec(),
            pretrained: false,
        })
    }

    pub fn layers(&self) -> &[String] {
        &self.layers
    }

    pub fn is_pretrained(&self) -> bool {
        self.pretrained
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    /// Tapped activations in configured layer order. `x` is an RGB batch in
    /// `[0, 1]`.
    pub fn features(&self, g: &mut Graph<T>, x: &Var<T>) -> Result<Vec<Var<T>>> {
        let scale: Vec<f64> = IMAGENET_STD.iter().map(|s| 1.0 / s).collect();
        let shift: Vec<f64> = IMAGENET_MEAN.iter().zip(&IMAGENET_STD).map(|(m, s)| -m / s).collect();
        let mut h = g.affine_channels(x, &scale, &shift)?;
        let mut out: Vec<Option<Var<T>>> = vec![None; self.layers.len()];
        for step in &self.steps {
            h = match step {
                Step::Conv { conv, tap } => {
                    let y = conv.forward_frozen(g, &self.params, &h)?;
                    let y = g.relu(&y);
                    if let Some(t) = tap {
                        out[*t] = Some(y.clone());
                    }
                    y
                }
                Step::Pool => g.max_pool2(&h),
            };
        }
        Ok(out.into_iter().map(|v| v.expect("every tap reached")).collect())
    }

    /// Features of a batch that needs no gradient.
    pub fn features_constant(&self, x: &Tensor<T>) -> Result<Vec<Arc<Tensor<T>>>> {
        let mut g = Graph::inference();
        let x = g.input(x.clone());
        Ok(self.features(&mut g, &x)?.into_iter().map(|v| Arc::new(v.into_tensor())).collect())
    }
}

fn pixel_norm(shape: [usize; 4]) -> f64 {
    (shape[0] * shape[2] * shape[3]) as f64
}

/// Sum over channels of the Smooth-L1 penalty, averaged over pixels.
pub fn smooth_l1_var<T: Real>(g: &mut Graph<T>, pred: &Var<T>, target: &Var<T>) -> Result<Var<T>> {
    g.smooth_l1(pred, target, pixel_norm(pred.shape()))
}

/// `(1/N) Σ λ_i ‖Φ_i(pred) − Φ_i(target)‖₁` against precomputed target features.
pub fn perceptual_var<T: Real>(
    g: &mut Graph<T>,
    fx: &FeatureExtractor<T>,
    pred: &Var<T>,
    target_features: &[Arc<Tensor<T>>],
    layer_weights: &[f64],
) -> Result<Var<T>> {
    if layer_weights.len() != fx.layers().len() {
        return Err(Error::Value(format!(
            "{} layer weights for {} extractor layers",
            layer_weights.len(),
            fx.layers().len()
        )));
    }
    let norm = pixel_norm(pred.shape());
    let feats = fx.features(g, pred)?;
    let mut terms = Vec::with_capacity(feats.len());
    for (f, t) in feats.iter().zip(target_features) {
        let t = g.constant_shared(t);
        terms.push(g.l1(f, &t, norm)?);
    }
    let weighted: Vec<(f64, &Var<T>)> = layer_weights.iter().copied().zip(terms.iter()).collect();
    g.weighted_sum(&weighted)
}

/// Total objective over the recorded stage outputs, with its breakdown.
pub fn total_loss_var<T: Real>(
    g: &mut Graph<T>,
    stages: &StageVars<T>,
    target: &Tensor<T>,
    weights: &LossWeights,
    fx: &FeatureExtractor<T>,
) -> Result<(Var<T>, LossTerms)> {
    let target_features = fx.features_constant(target)?;
    let target = g.constant(target.clone());
    let l1_o2 = smooth_l1_var(g, &stages.o2, &target)?;
    let perc_o2 = perceptual_var(g, fx, &stages.o2, &target_features, &weights.layer_weights)?;
    let [w2, w3] = weights.stage_weights;
    let mut coefs = vec![(w2 * weights.alpha, l1_o2.clone()), (w2 * weights.beta, perc_o2.clone())];
    let mut terms = LossTerms {
        l1_o2: l1_o2.value().item().as_f64(),
        perc_o2: perc_o2.value().item().as_f64(),
        ..Default::default()
    };
    if let Some(o3) = &stages.o3 {
        let l1_o3 = smooth_l1_var(g, o3, &target)?;
        let perc_o3 = perceptual_var(g, fx, o3, &target_features, &weights.layer_weights)?;
        terms.l1_o3 = Some(l1_o3.value().item().as_f64());
        terms.perc_o3 = Some(perc_o3.value().item().as_f64());
        coefs.push((w3 * weights.alpha, l1_o3));
        coefs.push((w3 * weights.beta, perc_o3));
    }
    let refs: Vec<(f64, &Var<T>)> = coefs.iter().map(|(c, v)| (*c, v)).collect();
    Ok((g.weighted_sum(&refs)?, terms))
}

fn check_same(a: &Frame, b: &Frame) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Dimension(format!("frames {:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

pub fn smooth_l1(pred: &Frame, target: &Frame) -> Result<f64> {
    check_same(pred, target)?;
    let mut g = Graph::<f64>::inference();
    let p = g.input(pred.to_tensor());
    let t = g.input(target.to_tensor());
    Ok(smooth_l1_var(&mut g, &p, &t)?.value().item())
}

pub fn perceptual_loss<T: Real>(pred: &Frame, target: &Frame, fx: &FeatureExtractor<T>, layer_weights: &[f64]) -> Result<f64> {
    check_same(pred, target)?;
    let target_features = fx.features_constant(&target.to_tensor())?;
    let mut g = Graph::inference();
    let p = g.input(pred.to_tensor());
    Ok(perceptual_var(&mut g, fx, &p, &target_features, layer_weights)?.value().item().as_f64())
}

pub fn total_loss<T: Real>(
    outputs: &StageOutputs<Frame>,
    target: &Frame,
    weights: &LossWeights,
    fx: &FeatureExtractor<T>,
) -> Result<(f64, LossTerms)> {
    check_same(&outputs.o2, target)?;
    check_same(&outputs.o3, target)?;
    let terms = LossTerms {
        l1_o2: smooth_l1(&outputs.o2, target)?,
        l1_o3: Some(smooth_l1(&outputs.o3, target)?),
        perc_o2: perceptual_loss(&outputs.o2, target, fx, &weights.layer_weights)?,
        perc_o3: Some(perceptual_loss(&outputs.o3, target, fx, &weights.layer_weights)?),
    };
    Ok((weights.combine(&terms), terms))
}
