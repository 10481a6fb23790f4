//! Residual U-Net that refines the preliminary result given the reference
//! frame. Output is `preliminary + net(concat(preliminary, reference))`.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::frame::Frame;
use crate::nn::{check_divisible, ChannelAttention, Conv, Init, ParamSet};
use crate::tensor::Real;

/// Init gain of residual-branch convolutions; small so a deep stack of
/// blocks starts close to the identity.
const BRANCH_GAIN: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RefineConfig {
    pub base_channels: usize,
    pub depth: usize,
    pub blocks_per_level: usize,
    pub branch_kernels: Vec<usize>,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            base_channels: 32,
            depth: 2,
            blocks_per_level: 2,
            branch_kernels: vec![3, 5],
        }
    }
}

impl RefineConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.base_channels == 0 {
            problems.push("base_channels must be ≥ 1".to_string());
        }
        if self.depth == 0 {
            problems.push("depth must be ≥ 1".to_string());
        }
        if self.blocks_per_level == 0 {
            problems.push("blocks_per_level must be ≥ 1".to_string());
        }
        if self.branch_kernels.is_empty() {
            problems.push("branch_kernels must be non-empty".to_string());
        }
        if let Some(k) = self.branch_kernels.iter().find(|k| *k % 2 == 0) {
            problems.push(format!("branch kernel {k} must be odd"));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Value(format!("refine config: {}", problems.join("; "))))
        }
    }

    pub fn downsampling_factor(&self) -> usize {
        1 << self.depth
    }

    fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Channel widths of every residual block, in build order.
    pub fn block_channels(&self) -> Vec<usize> {
        let mut out = Vec::new();
        for l in 0..=self.depth {
            out.extend(std::iter::repeat_n(self.channels(l), self.blocks_per_level));
        }
        for l in (0..self.depth).rev() {
            out.extend(std::iter::repeat_n(self.channels(l), self.blocks_per_level));
        }
        out
    }
}

/// Parallel convolution branches (one per kernel size) summed, rectified,
/// gated by channel attention and added back onto the block input.
#[derive(Clone, Debug)]
pub struct ResBlock {
    branches: Vec<Conv>,
    attention: ChannelAttention,
    name: String,
}

impl ResBlock {
    fn new<T: Real>(params: &mut ParamSet<T>, init: &mut Init, name: &str, channels: usize, kernels: &[usize]) -> Self {
        let branches = kernels
            .iter()
            .map(|&k| Conv::new(params, init, &format!("{name}.branch{k}"), channels, channels, k, 1, BRANCH_GAIN))
            .collect();
        let attention = ChannelAttention::new(params, init, &format!("{name}.attention"), channels);
        Self {
            branches,
            attention,
            name: name.to_string(),
        }
    }

    /// Parameter-name prefix of the branch convolutions.
    pub fn branch_prefix(&self) -> String {
        format!("{}.branch", self.name)
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, params: &ParamSet<T>, x: &Var<T>) -> Result<Var<T>> {
        let mut sum = self.branches[0].forward(g, params, x)?;
        for b in &self.branches[1..] {
            let y = b.forward(g, params, x)?;
            sum = g.add(&sum, &y)?;
        }
        let y = g.relu(&sum);
        let y = self.attention.forward(g, params, &y)?;
        g.add(x, &y)
    }
}

#[derive(Clone, Debug)]
struct Level {
    down: Option<Conv>,
    blocks: Vec<ResBlock>,
}

#[derive(Clone, Debug)]
struct UpLevel {
    conv: Conv,
    blocks: Vec<ResBlock>,
}

#[derive(Clone, Debug)]
pub struct RefineNet<T> {
    config: RefineConfig,
    params: ParamSet<T>,
    head: Conv,
    encoder: Vec<Level>,
    /// Ordered deepest first.
    decoder: Vec<UpLevel>,
    out: Conv,
}

pub fn build_refine<T: Real>(config: &RefineConfig, seed: u64) -> Result<RefineNet<T>> {
    config.validate()?;
    let mut params = ParamSet::new();
    let mut init = Init::new(seed);
    let relu_gain = 2f64.sqrt();
    let c = config.base_channels;
    let blocks = |params: &mut ParamSet<T>, init: &mut Init, prefix: &str, ch: usize| -> Vec<ResBlock> {
        (0..config.blocks_per_level)
            .map(|b| ResBlock::new(params, init, &format!("{prefix}.block{b}"), ch, &config.branch_kernels))
            .collect()
    };
    let head = Conv::new(&mut params, &mut init, "head", 2 * Frame::CHANNELS, c, 3, 1, relu_gain);
    let mut encoder = Vec::with_capacity(config.depth + 1);
    for l in 0..=config.depth {
        let down = (l > 0).then(|| {
            Conv::new(&mut params, &mut init, &format!("enc{l}.down"), config.channels(l - 1), config.channels(l), 3, 2, relu_gain)
        });
        let blocks = blocks(&mut params, &mut init, &format!("enc{l}"), config.channels(l));
        encoder.push(Level { down, blocks });
    }
    let mut decoder = Vec::with_capacity(config.depth);
    for l in (1..=config.depth).rev() {
        let merge = config.channels(l - 1);
        let conv = Conv::new(&mut params, &mut init, &format!("dec{l}.up"), config.channels(l), merge * 4, 3, 1, relu_gain);
        assert_eq!(conv.cout / 4, merge, "decoder/encoder channel mismatch at level {l}");
        let blocks = blocks(&mut params, &mut init, &format!("dec{l}"), merge);
        decoder.push(UpLevel { conv, blocks });
    }
    let out = Conv::new(&mut params, &mut init, "out", c, Frame::CHANNELS, 3, 1, 0.1);
    Ok(RefineNet {
        config: config.clone(),
        params,
        head,
        encoder,
        decoder,
        out,
    })
}

impl<T: Real> RefineNet<T> {
    pub fn config(&self) -> &RefineConfig {
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

    pub fn blocks(&self) -> impl Iterator<Item = &ResBlock> {
        self.encoder
            .iter()
            .flat_map(|l| l.blocks.iter())
            .chain(self.decoder.iter().flat_map(|l| l.blocks.iter()))
    }

    fn run_blocks(&self, g: &mut Graph<T>, blocks: &[ResBlock], mut x: Var<T>) -> Result<Var<T>> {
        for b in blocks {
            x = b.forward(g, &self.params, &x)?;
        }
        Ok(x)
    }

    /// `preliminary + net(concat(preliminary, reference))`, unclamped.
    pub fn forward(&self, g: &mut Graph<T>, preliminary: &Var<T>, reference: &Var<T>) -> Result<Var<T>> {
        let shape = preliminary.shape();
        if shape[1] != Frame::CHANNELS || reference.shape() != shape {
            return Err(Error::Dimension(format!(
                "refine inputs {:?} and {:?} must be equal RGB shapes",
                shape,
                reference.shape()
            )));
        }
        check_divisible(shape, self.config.downsampling_factor(), "refine")?;

        let x = g.concat(&[preliminary, reference])?;
        let x = self.head.forward(g, &self.params, &x)?;
        let mut x = g.relu(&x);
        let mut skips = Vec::with_capacity(self.encoder.len());
        for level in &self.encoder {
            if let Some(down) = &level.down {
                let y = down.forward(g, &self.params, &x)?;
                x = g.relu(&y);
            }
            x = self.run_blocks(g, &level.blocks, x)?;
            skips.push(x.clone());
        }
        skips.pop();
        for level in &self.decoder {
            let y = level.conv.forward(g, &self.params, &x)?;
            let y = g.relu(&y);
            let y = g.pixel_shuffle(&y, 2)?;
            let skip = skips.pop().expect("one skip per level");
            let y = g.add(&y, &skip)?;
            x = self.run_blocks(g, &level.blocks, y)?;
        }
        let residual = self.out.forward(g, &self.params, &x)?;
        g.add(preliminary, &residual)
    }
}

/// Frame-level wrapper: one refinement pass, clamped into `[0, 1]`.
pub fn refine_forward<T: Real>(net: &RefineNet<T>, preliminary: &Frame, reference: &Frame) -> Result<Frame> {
    if preliminary.dims() != reference.dims() {
        return Err(Error::Dimension(format!(
            "preliminary {:?} vs reference {:?}",
            preliminary.dims(),
            reference.dims()
        )));
    }
    let mut g = Graph::inference();
    let p = g.input(preliminary.to_tensor::<T>());
    let r = g.input(reference.to_tensor::<T>());
    let out = net.forward(&mut g, &p, &r)?;
    Frame::from_tensor(out.value(), 0)
}
