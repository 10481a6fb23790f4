//! U-Net fusion network: three frames plus a haze map in, one aligned and
//! partially dehazed frame out, added onto the middle frame.
//!
//! Encoder: large-kernel fuse conv, then per level a stride-2 conv followed
//! by channel attention. Decoder: per level a conv + depth-to-space (×2),
//! merged into the matching encoder feature by summation; every merge also
//! receives the deepest encoder feature, projected 1×1 and upsampled.
//!
//! Input plane order is fixed: `[frame_a (RGB), frame_b (RGB), frame_c (RGB), haze_map]`.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::frame::Frame;
use crate::haze_model::HazeMap;
use crate::nn::{check_divisible, ChannelAttention, Conv, Init, LayerKind, ParamSet};
use crate::tensor::{Real, Tensor};

pub const PLANE_ORDER: &str = "frame_a.rgb,frame_b.rgb,frame_c.rgb,haze_map";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionConfig {
    pub base_channels: usize,
    pub depth: usize,
    pub first_kernel: usize,
    pub attention_enabled: bool,
    pub in_frames: usize,
    pub extra_planes: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            base_channels: 32,
            depth: 2,
            first_kernel: 7,
            attention_enabled: true,
            in_frames: 3,
            extra_planes: 1,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.base_channels == 0 {
            problems.push("base_channels must be ≥ 1".to_string());
        }
        if self.depth == 0 {
            problems.push("depth must be ≥ 1".to_string());
        }
        if self.first_kernel.is_multiple_of(2) {
            problems.push(format!("first_kernel {} must be odd", self.first_kernel));
        }
        if self.in_frames != 3 {
            problems.push(format!("in_frames must be 3, got {}", self.in_frames));
        }
        if self.extra_planes != 1 {
            problems.push(format!("extra_planes must be 1 (the haze map), got {}", self.extra_planes));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Value(format!("fusion config: {}", problems.join("; "))))
        }
    }

    /// Spatial size must be a multiple of this.
    pub fn downsampling_factor(&self) -> usize {
        1 << self.depth
    }

    fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    fn input_planes(&self) -> usize {
        self.in_frames * Frame::CHANNELS + self.extra_planes
    }
}

#[derive(Clone, Debug)]
struct DownLevel {
    conv: Conv,
    attention: Option<ChannelAttention>,
}

#[derive(Clone, Debug)]
struct UpLevel {
    conv: Conv,
    /// Projects the deepest encoder feature onto this merge's channels.
    skip_proj: Conv,
    skip_factor: usize,
}

#[derive(Clone, Debug)]
pub struct FusionNet<T> {
    config: FusionConfig,
    params: ParamSet<T>,
    fuse: Conv,
    down: Vec<DownLevel>,
    /// Ordered deepest first.
    up: Vec<UpLevel>,
    out: Conv,
}

/// Deterministically initialized fusion network.
pub fn build_fusion<T: Real>(config: &FusionConfig, seed: u64) -> Result<FusionNet<T>> {
    config.validate()?;
    let mut params = ParamSet::new();
    let mut init = Init::new(seed);
    let relu_gain = 2f64.sqrt();
    let c = config.base_channels;
    let fuse = Conv::new(&mut params, &mut init, "fuse", config.input_planes(), c, config.first_kernel, 1, relu_gain);
    let mut down = Vec::with_capacity(config.depth);
    for l in 1..=config.depth {
        let (cin, cout) = (config.channels(l - 1), config.channels(l));
        let conv = Conv::new(&mut params, &mut init, &format!("down{l}"), cin, cout, 3, 2, relu_gain);
        let attention = config
            .attention_enabled
            .then(|| ChannelAttention::new(&mut params, &mut init, &format!("down{l}.attention"), cout));
        down.push(DownLevel { conv, attention });
    }
    let deepest = config.channels(config.depth);
    let mut up = Vec::with_capacity(config.depth);
    for l in (1..=config.depth).rev() {
        let (cin, merge) = (config.channels(l), config.channels(l - 1));
        let conv = Conv::new(&mut params, &mut init, &format!("up{l}"), cin, merge * 4, 3, 1, relu_gain);
        let skip_proj = Conv::new(&mut params, &mut init, &format!("up{l}.multiscale"), deepest, merge, 1, 1, 1.0);
        // Summation merges need equal channel counts on every branch.
        assert_eq!(conv.cout / 4, merge, "decoder/encoder channel mismatch at level {l}");
        assert_eq!(skip_proj.cout, merge, "multi-scale skip channel mismatch at level {l}");
        up.push(UpLevel {
            conv,
            skip_proj,
            skip_factor: 1 << (config.depth - l + 1),
        });
    }
    let out = Conv::new(&mut params, &mut init, "out", c, Frame::CHANNELS, 3, 1, 0.1);
    Ok(FusionNet {
        config: config.clone(),
        params,
        fuse,
        down,
        up,
        out,
    })
}

impl<T: Real> FusionNet<T> {
    pub fn config(&self) -> &FusionConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.count()
    }

    /// Layers of the decoder path in execution order.
    pub fn decoder_layers(&self) -> Vec<LayerKind> {
        let mut layers = Vec::new();
        for level in &self.up {
            layers.push(level.conv.kind());
            layers.push(LayerKind::DepthToSpace { factor: 2 });
            layers.push(level.skip_proj.kind());
            layers.push(LayerKind::NearestUpsample {
                factor: level.skip_factor,
            });
        }
        layers.push(self.out.kind());
        layers
    }

    /// `middle + net(concat(frames, haze))`. Frames are `[n, 3, h, w]`, the
    /// haze map `[n, 1, h, w]`. The result is not clamped.
    pub fn forward(&self, g: &mut Graph<T>, frames: [&Var<T>; 3], haze: &Var<T>) -> Result<Var<T>> {
        let shape = frames[0].shape();
        if shape[1] != Frame::CHANNELS || frames.iter().any(|f| f.shape() != shape) {
            return Err(Error::Dimension(format!(
                "fusion frames must share an RGB shape, got {:?}",
                frames.map(|f| f.shape())
            )));
        }
        if haze.shape() != [shape[0], 1, shape[2], shape[3]] {
            return Err(Error::Dimension(format!("haze map {:?} for frames {:?}", haze.shape(), shape)));
        }
        check_divisible(shape, self.config.downsampling_factor(), "fusion")?;

        let x = g.concat(&[frames[0], frames[1], frames[2], haze])?;
        let x = self.fuse.forward(g, &self.params, &x)?;
        let mut skips = vec![g.relu(&x)];
        for level in &self.down {
            let prev = skips.last().expect("non-empty");
            let y = level.conv.forward(g, &self.params, prev)?;
            let mut y = g.relu(&y);
            if let Some(att) = &level.attention {
                y = att.forward(g, &self.params, &y)?;
            }
            skips.push(y);
        }
        let deepest = skips.pop().expect("depth ≥ 1");
        let mut x = deepest.clone();
        for level in &self.up {
            let y = level.conv.forward(g, &self.params, &x)?;
            let y = g.relu(&y);
            let y = g.pixel_shuffle(&y, 2)?;
            let skip = skips.pop().expect("one skip per level");
            let y = g.add(&y, &skip)?;
            let ms = level.skip_proj.forward(g, &self.params, &deepest)?;
            let ms = g.upsample_nearest(&ms, level.skip_factor);
            x = g.add(&y, &ms)?;
        }
        let residual = self.out.forward(g, &self.params, &x)?;
        g.add(frames[1], &residual)
    }
}

/// Frame-level convenience wrapper: runs one fusion pass without recording
/// gradients and clamps the output into `[0, 1]`.
pub fn fusion_forward<T: Real>(net: &FusionNet<T>, frames: [&Frame; 3], haze_map: &HazeMap) -> Result<Frame> {
    let dims = frames[1].dims();
    if frames.iter().any(|f| f.dims() != dims) || (haze_map.height, haze_map.width) != dims {
        return Err(Error::Dimension("fusion inputs differ in size".into()));
    }
    let mut g = Graph::inference();
    let vars = frames.map(|f| g.input(f.to_tensor::<T>()));
    let haze = Tensor::from_vec(
        [1, 1, dims.0, dims.1],
        haze_map.data.iter().map(|&v| T::lit(v)).collect(),
    )?;
    let haze = g.input(haze);
    let out = net.forward(&mut g, [&vars[0], &vars[1], &vars[2]], &haze)?;
    Frame::from_tensor(out.value(), 0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::haze_model::estimate_haze_map;

    fn small() -> FusionConfig {
        FusionConfig {
            base_channels: 4,
            depth: 2,
            first_kernel: 5,
            ..Default::default()
        }
    }

    fn frames(h: usize, w: usize) -> Vec<Frame> {
        (0..3)
            .map(|k| Frame::from_fn(h, w, |y, x, c| 0.5 + 0.4 * ((y * 3 + x * 5 + c + k) as f64 * 0.37).sin()).unwrap())
            .collect()
    }

    #[test]
    fn zero_parameters_return_middle_frame() {
        let mut net = build_fusion::<f64>(&small(), 1).unwrap();
        net.params_mut().zero_all();
        let f = frames(16, 16);
        let haze = estimate_haze_map(&f[1], 3).unwrap();
        let out = fusion_forward(&net, [&f[0], &f[1], &f[2]], &haze).unwrap();
        assert_eq!(out, f[1]);
    }

    #[test]
    fn output_shape_matches_input() {
        let net = build_fusion::<f32>(&FusionConfig::default(), 1).unwrap();
        let f = frames(64, 64);
        let haze = estimate_haze_map(&f[1], 15).unwrap();
        let out = fusion_forward(&net, [&f[0], &f[1], &f[2]], &haze).unwrap();
        assert_eq!(out.dims(), (64, 64));
    }

    #[test]
    fn indivisible_or_mismatched_inputs_rejected() {
        let net = build_fusion::<f32>(&small(), 1).unwrap();
        let f = frames(18, 16);
        let haze = estimate_haze_map(&f[1], 3).unwrap();
        assert!(matches!(
            fusion_forward(&net, [&f[0], &f[1], &f[2]], &haze),
            Err(Error::Dimension(_))
        ));
        let g = frames(16, 16);
        let haze = estimate_haze_map(&g[1], 3).unwrap();
        assert!(matches!(
            fusion_forward(&net, [&g[0], &f[1], &g[2]], &haze),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn invalid_configs_rejected() {
        for bad in [
            FusionConfig { first_kernel: 4, ..small() },
            FusionConfig { depth: 0, ..small() },
            FusionConfig { base_channels: 0, ..small() },
        ] {
            assert!(matches!(build_fusion::<f32>(&bad, 0), Err(Error::Value(_))));
        }
    }

    #[test]
    fn build_is_deterministic() {
        let a = build_fusion::<f32>(&small(), 9).unwrap();
        let b = build_fusion::<f32>(&small(), 9).unwrap();
        assert_eq!(a.params().fingerprint(), b.params().fingerprint());
        assert_eq!(a.parameter_count(), b.parameter_count());
        let c = build_fusion::<f32>(&small(), 10).unwrap();
        assert_ne!(a.params().fingerprint(), c.params().fingerprint());
    }

    #[test]
    fn attention_accounts_for_parameter_difference() {
        let cfg = FusionConfig::default();
        let on = build_fusion::<f32>(&cfg, 0).unwrap();
        let off = build_fusion::<f32>(&FusionConfig { attention_enabled: false, ..cfg.clone() }, 0).unwrap();
        let expected: usize = (1..=cfg.depth)
            .map(|l| ChannelAttention::count_for(cfg.base_channels << l))
            .sum();
        assert_eq!(on.parameter_count() - off.parameter_count(), expected);
    }

    #[test]
    fn decoder_upsamples_only_by_depth_to_space() {
        let net = build_fusion::<f32>(&FusionConfig::default(), 0).unwrap();
        let layers = net.decoder_layers();
        assert_eq!(layers.iter().filter(|l| matches!(l, LayerKind::DepthToSpace { factor: 2 })).count(), 2);
        for l in &layers {
            if let LayerKind::Conv { stride, .. } = l {
                assert_eq!(*stride, 1, "strided stage in decoder");
            }
        }
    }
}
