//! Atmospheric scattering model `I = J·t + A·(1 − t)`: synthesis, the
//! algebraic inverse used as a test oracle, dark-channel haze maps and
//! temporally coherent synthetic transmission fields.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::FrameSequence;
use crate::error::{Error, Result};
use crate::frame::Frame;
use crate::kernels;
use crate::tensor::Tensor;

/// Smallest transmission [`invert_hazy`] accepts by default.
pub const T_FLOOR: f64 = 0.1;

/// Default dark-channel window.
pub const HAZE_WINDOW: usize = 15;

#[derive(Clone, Debug, PartialEq)]
pub enum Airlight {
    Uniform(f64),
    /// `H×W×3`, same layout as [`Frame`].
    Map(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct HazeParams {
    height: usize,
    width: usize,
    transmission: Vec<f64>,
    airlight: Airlight,
}

impl HazeParams {
    pub fn new(height: usize, width: usize, transmission: Vec<f64>, airlight: Airlight) -> Result<Self> {
        if transmission.len() != height * width {
            return Err(Error::Dimension(format!(
                "transmission has {} values for a {height}×{width} frame",
                transmission.len()
            )));
        }
        if let Some(t) = transmission.iter().find(|t| !(0.0..=1.0).contains(*t)) {
            return Err(Error::Domain(format!("transmission {t} outside [0, 1]")));
        }
        match &airlight {
            Airlight::Uniform(a) if !(0.0..=1.0).contains(a) => {
                return Err(Error::Domain(format!("airlight {a} outside [0, 1]")));
            }
            Airlight::Map(m) if m.len() != height * width * 3 => {
                return Err(Error::Dimension(format!(
                    "airlight map has {} values for a {height}×{width}×3 frame",
                    m.len()
                )));
            }
            Airlight::Map(m) => {
                if let Some(a) = m.iter().find(|a| !(0.0..=1.0).contains(*a)) {
                    return Err(Error::Domain(format!("airlight {a} outside [0, 1]")));
                }
            }
            _ => {}
        }
        Ok(Self {
            height,
            width,
            transmission,
            airlight,
        })
    }

    pub fn uniform(height: usize, width: usize, t: f64, airlight: f64) -> Result<Self> {
        Self::new(height, width, vec![t; height * width], Airlight::Uniform(airlight))
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn transmission(&self) -> &[f64] {
        &self.transmission
    }

    pub fn airlight(&self) -> &Airlight {
        &self.airlight
    }

    #[inline]
    fn airlight_at(&self, i: usize) -> f64 {
        match &self.airlight {
            Airlight::Uniform(a) => *a,
            Airlight::Map(m) => m[i],
        }
    }

    fn check(&self, frame: &Frame) -> Result<()> {
        if frame.dims() != self.dims() {
            return Err(Error::Dimension(format!(
                "haze parameters are {}×{}, frame is {}×{}",
                self.height,
                self.width,
                frame.height(),
                frame.width()
            )));
        }
        Ok(())
    }
}

/// Applies the scattering model per pixel and channel, clamping into `[0, 1]`.
pub fn synthesize_hazy(clear: &Frame, params: &HazeParams) -> Result<Frame> {
    params.check(clear)?;
    let data = clear
        .data()
        .iter()
        .enumerate()
        .map(|(i, &j)| {
            let t = params.transmission[i / 3];
            j * t + params.airlight_at(i) * (1.0 - t)
        })
        .collect();
    Frame::clamped(clear.height(), clear.width(), data)
}

/// Recovers `J = (I − A(1 − t)) / t`. Refuses transmissions below `t_floor`.
pub fn invert_hazy(hazy: &Frame, params: &HazeParams, t_floor: f64) -> Result<Frame> {
    params.check(hazy)?;
    if let Some((i, t)) = params.transmission.iter().enumerate().find(|(_, t)| **t < t_floor) {
        return Err(Error::Domain(format!(
            "transmission {t} at pixel {i} is below the inversion floor {t_floor}"
        )));
    }
    let data = hazy
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let t = params.transmission[i / 3];
            (v - params.airlight_at(i) * (1.0 - t)) / t
        })
        .collect();
    Frame::clamped(hazy.height(), hazy.width(), data)
}

/// Single-channel `H×W` map.
#[derive(Clone, Debug, PartialEq)]
pub struct HazeMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl HazeMap {
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }
}

/// Dark-channel statistic: the minimum over a `window × window`
/// neighbourhood (replicate padding) of the per-pixel channel minimum.
pub fn estimate_haze_map(frame: &Frame, window: usize) -> Result<HazeMap> {
    if window == 0 || window.is_multiple_of(2) {
        return Err(Error::Value(format!("haze window must be odd and positive, got {window}")));
    }
    let t: Tensor<f64> = frame.to_tensor();
    let (map, _) = kernels::dark_channel(&t, window);
    Ok(HazeMap {
        height: frame.height(),
        width: frame.width(),
        data: map.into_vec(),
    })
}

/// Parameters of a synthetic, temporally drifting haze field.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HazeFieldSpec {
    /// Mean transmission of the first frame.
    pub base_transmission: f64,
    /// Correlation length of the spatial noise, in pixels.
    pub spatial_smoothness: f64,
    /// Largest per-pixel change of `t` between consecutive frames.
    pub temporal_drift: f64,
    /// Peak deviation of `t` from its mean within a frame.
    pub spatial_variation: f64,
    pub airlight_value: f64,
    pub seed: u64,
}

impl Default for HazeFieldSpec {
    fn default() -> Self {
        Self {
            base_transmission: 0.5,
            spatial_smoothness: 24.0,
            temporal_drift: 0.02,
            spatial_variation: 0.15,
            airlight_value: 0.8,
            seed: 0,
        }
    }
}

impl HazeFieldSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_transmission > 0.0 && self.base_transmission <= 1.0) {
            return Err(Error::Value(format!("base_transmission {} not in (0, 1]", self.base_transmission)));
        }
        if self.temporal_drift.is_nan() || self.temporal_drift < 0.0 {
            return Err(Error::Value(format!("temporal_drift {} is negative", self.temporal_drift)));
        }
        if self.spatial_variation.is_nan() || self.spatial_variation < 0.0 {
            return Err(Error::Value(format!("spatial_variation {} is negative", self.spatial_variation)));
        }
        if self.spatial_smoothness.is_nan() || self.spatial_smoothness < 1.0 {
            return Err(Error::Value(format!("spatial_smoothness {} below one pixel", self.spatial_smoothness)));
        }
        if !(0.0..=1.0).contains(&self.airlight_value) {
            return Err(Error::Value(format!("airlight_value {} outside [0, 1]", self.airlight_value)));
        }
        Ok(())
    }
}

/// Smooth value noise in `[-1, 1]`: uniform lattice values every `cell`
/// pixels, blended with smoothstep weights.
pub(crate) fn value_noise(rng: &mut ChaCha8Rng, h: usize, w: usize, cell: f64) -> Vec<f64> {
    let gh = (h as f64 / cell).ceil() as usize + 2;
    let gw = (w as f64 / cell).ceil() as usize + 2;
    let lattice: Vec<f64> = (0..gh * gw).map(|_| rng.gen_range(-1.0..=1.0)).collect();
    let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        let fy = y as f64 / cell;
        let (iy, ty) = (fy.floor() as usize, smooth(fy.fract()));
        for x in 0..w {
            let fx = x as f64 / cell;
            let (ix, tx) = (fx.floor() as usize, smooth(fx.fract()));
            let v = |r: usize, c: usize| lattice[r * gw + c];
            let top = v(iy, ix) * (1.0 - tx) + v(iy, ix + 1) * tx;
            let bottom = v(iy + 1, ix) * (1.0 - tx) + v(iy + 1, ix + 1) * tx;
            out.push(top * (1.0 - ty) + bottom * ty);
        }
    }
    out
}

/// Generates `n_frames` haze parameter sets whose transmission maps are
/// spatially smooth, start around `base_transmission` and change by at most
/// `temporal_drift` per pixel between consecutive frames.
pub fn generate_haze_sequence(spec: &HazeFieldSpec, n_frames: usize, h: usize, w: usize) -> Result<Vec<HazeParams>> {
    spec.validate()?;
    if n_frames == 0 || h == 0 || w == 0 {
        return Err(Error::Value(format!("cannot generate {n_frames} frames of {h}×{w}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let base = value_noise(&mut rng, h, w, spec.spatial_smoothness);
    let mean = base.iter().sum::<f64>() / base.len() as f64;
    let anchor: Vec<f64> = base
        .iter()
        .map(|n| (spec.base_transmission + spec.spatial_variation * (n - mean)).clamp(0.0, 1.0))
        .collect();

    let airlight = Airlight::Uniform(spec.airlight_value);
    let mut current = anchor.clone();
    let mut out = Vec::with_capacity(n_frames);
    out.push(HazeParams::new(h, w, current.clone(), airlight.clone())?);
    for _ in 1..n_frames {
        if spec.temporal_drift > 0.0 {
            let step = value_noise(&mut rng, h, w, spec.spatial_smoothness);
            for ((t, s), a) in current.iter_mut().zip(&step).zip(&anchor) {
                // Mean reversion keeps long clips near the anchor field.
                let pull = 0.1 * (a - *t) / spec.temporal_drift;
                *t = (*t + spec.temporal_drift * (s + pull).clamp(-1.0, 1.0)).clamp(0.0, 1.0);
            }
        }
        out.push(HazeParams::new(h, w, current.clone(), airlight.clone())?);
    }
    Ok(out)
}

/// Hazes every frame of a clean clip with a generated field sequence.
pub fn synthesize_sequence(clean: &FrameSequence, spec: &HazeFieldSpec) -> Result<(FrameSequence, Vec<HazeParams>)> {
    let (h, w) = clean.dims();
    let params = generate_haze_sequence(spec, clean.len(), h, w)?;
    let mut frames = Vec::with_capacity(clean.len());
    for (f, p) in clean.frames().iter().zip(&params) {
        frames.push(synthesize_hazy(f, p)?);
    }
    let hazy = FrameSequence::with_names(clean.clip_id.clone(), frames, clean.names().to_vec())?;
    Ok((hazy, params))
}
