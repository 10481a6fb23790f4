#![allow(dead_code)]

use dehaze_core::data::{synthetic, ClipPair, TimeUnit, UNIT_LEN};
use dehaze_core::frame::Frame;
use dehaze_core::fusion_net::FusionConfig;
use dehaze_core::haze_model::{synthesize_sequence, HazeFieldSpec};
use dehaze_core::pipeline::ModelConfig;
use dehaze_core::refine_net::RefineConfig;
use dehaze_core::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        fusion: FusionConfig {
            base_channels: 4,
            first_kernel: 3,
            ..Default::default()
        },
        refine: RefineConfig {
            base_channels: 4,
            blocks_per_level: 1,
            ..Default::default()
        },
        haze_window: 3,
    }
}

pub fn random_frame(h: usize, w: usize, seed: u64) -> Frame {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Frame::new(h, w, (0..h * w * 3).map(|_| rng.gen_range(0.05..0.95)).collect()).unwrap()
}

pub fn random_unit(h: usize, w: usize, seed: u64) -> TimeUnit {
    let frames: [Frame; UNIT_LEN] = std::array::from_fn(|k| random_frame(h, w, seed * 10 + k as u64));
    TimeUnit::new(frames, 2).unwrap()
}

pub fn random_tensor(shape: [usize; 4], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len = shape.iter().product();
    Tensor::from_vec(shape, (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

pub fn hazy_clip(id: &str, seed: u64, frames: usize, size: usize) -> ClipPair {
    let clean = synthetic::clean_clip(id, seed, frames, size, size).unwrap();
    let spec = HazeFieldSpec {
        seed: seed + 1000,
        ..Default::default()
    };
    let (hazy, _) = synthesize_sequence(&clean, &spec).unwrap();
    ClipPair::new(hazy, clean).unwrap()
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    let d = (a - b).abs();
    if d == 0.0 {
        0.0
    } else {
        d / a.abs().max(b.abs())
    }
}

/// Central difference of `f` at flat index `i` of `x`.
pub fn central_diff(x: &Tensor<f64>, i: usize, step: f64, mut f: impl FnMut(&Tensor<f64>) -> f64) -> f64 {
    let mut plus = x.clone();
    plus.data_mut()[i] += step;
    let mut minus = x.clone();
    minus.data_mut()[i] -= step;
    (f(&plus) - f(&minus)) / (2.0 * step)
}

/// Probe positions spread over a tensor.
pub fn probes(len: usize, count: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| rng.gen_range(0..len)).collect()
}
