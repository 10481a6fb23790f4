//! Named parameter storage and the layers shared by the fusion and
//! refinement networks.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Squeeze ratio of the channel-attention bottleneck.
pub const ATTENTION_REDUCTION: usize = 4;

/// An ordered collection of named trainable arrays.
#[derive(Clone, Debug, Default)]
pub struct ParamSet<T> {
    entries: Vec<(String, Arc<Tensor<T>>)>,
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new() }
    }

    fn push(&mut self, name: String, t: Tensor<T>) -> usize {
        debug_assert!(self.index_of(&name).is_none(), "duplicate parameter {name}");
        self.entries.push((name, Arc::new(t)));
        self.entries.len() - 1
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, i: usize) -> &Arc<Tensor<T>> {
        &self.entries[i].1
    }

    pub fn name(&self, i: usize) -> &str {
        &self.entries[i].0
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|(n, _)| n == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Arc<Tensor<T>>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    /// Total number of scalars.
    pub fn count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    /// Mutable access; clones the array if a graph still holds it.
    pub fn tensor_mut(&mut self, i: usize) -> &mut Tensor<T> {
        Arc::make_mut(&mut self.entries[i].1)
    }

    pub fn set(&mut self, i: usize, t: Tensor<T>) -> Result<()> {
        let current = self.entries[i].1.shape();
        if t.shape() != current {
            return Err(Error::Dimension(format!(
                "parameter {} is {current:?}, got {:?}",
                self.entries[i].0,
                t.shape()
            )));
        }
        self.entries[i].1 = Arc::new(t);
        Ok(())
    }

    pub fn zero_all(&mut self) {
        for i in 0..self.len() {
            self.tensor_mut(i).data_mut().iter_mut().for_each(|v| *v = T::zero());
        }
    }

    /// Zeroes every parameter whose name starts with `prefix`.
    pub fn zero_prefix(&mut self, prefix: &str) {
        for i in 0..self.len() {
            if self.entries[i].0.starts_with(prefix) {
                self.tensor_mut(i).data_mut().iter_mut().for_each(|v| *v = T::zero());
            }
        }
    }

    /// Hash of names, shapes and exact bit patterns.
    pub fn fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for (name, t) in &self.entries {
            name.hash(&mut h);
            t.shape().hash(&mut h);
            for v in t.data() {
                v.as_f64().to_bits().hash(&mut h);
            }
        }
        h.finish()
    }
}

/// Seeded uniform initializer.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Uniform on `±gain·√(3 / fan_in)`, i.e. variance `gain² / fan_in`.
    fn uniform<T: Real>(&mut self, shape: [usize; 4], fan_in: usize, gain: f64) -> Tensor<T> {
        let bound = gain * (3.0 / fan_in as f64).sqrt();
        let len = shape.iter().product();
        let data = (0..len).map(|_| T::lit(self.rng.gen_range(-bound..=bound))).collect();
        Tensor::from_vec(shape, data).expect("init shape")
    }
}

/// Structural description of a layer, for inspection and tests.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Conv { kernel: usize, stride: usize },
    DepthToSpace { factor: usize },
    NearestUpsample { factor: usize },
    ChannelAttention,
}

#[derive(Clone, Debug)]
pub struct Conv {
    weight: usize,
    bias: usize,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl Conv {
    /// `same`-padded convolution (`pad = kernel / 2`).
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        params: &mut ParamSet<T>,
        init: &mut Init,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        gain: f64,
    ) -> Self {
        let fan_in = cin * kernel * kernel;
        let weight = params.push(format!("{name}.weight"), init.uniform([cout, cin, kernel, kernel], fan_in, gain));
        let bias = params.push(format!("{name}.bias"), Tensor::zeros([cout, 1, 1, 1]));
        Self {
            weight,
            bias,
            cin,
            cout,
            kernel,
            stride,
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, params: &ParamSet<T>, x: &Var<T>) -> Result<Var<T>> {
        let w = g.param(params.get(self.weight));
        let b = g.param(params.get(self.bias));
        g.conv2d(x, &w, Some(&b), self.stride, self.kernel / 2)
    }

    /// Forward pass that treats the weights as constants.
    pub fn forward_frozen<T: Real>(&self, g: &mut Graph<T>, params: &ParamSet<T>, x: &Var<T>) -> Result<Var<T>> {
        let w = g.constant_shared(params.get(self.weight));
        let b = g.constant_shared(params.get(self.bias));
        g.conv2d(x, &w, Some(&b), self.stride, self.kernel / 2)
    }

    pub fn weight_index(&self) -> usize {
        self.weight
    }

    pub fn bias_index(&self) -> usize {
        self.bias
    }

    pub fn param_count(&self) -> usize {
        self.cout * self.cin * self.kernel * self.kernel + self.cout
    }

    pub fn kind(&self) -> LayerKind {
        LayerKind::Conv {
            kernel: self.kernel,
            stride: self.stride,
        }
    }
}

/// Global average pool → bottleneck → sigmoid gate → per-channel rescale.
#[derive(Clone, Debug)]
pub struct ChannelAttention {
    squeeze: Conv,
    excite: Conv,
}

impl ChannelAttention {
    pub fn hidden(channels: usize) -> usize {
        (channels / ATTENTION_REDUCTION).max(1)
    }

    pub fn new<T: Real>(params: &mut ParamSet<T>, init: &mut Init, name: &str, channels: usize) -> Self {
        let hidden = Self::hidden(channels);
        Self {
            squeeze: Conv::new(params, init, &format!("{name}.squeeze"), channels, hidden, 1, 1, 2f64.sqrt()),
            excite: Conv::new(params, init, &format!("{name}.excite"), hidden, channels, 1, 1, 1.0),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, params: &ParamSet<T>, x: &Var<T>) -> Result<Var<T>> {
        let pooled = g.global_avg_pool(x);
        let s = self.squeeze.forward(g, params, &pooled)?;
        let s = g.relu(&s);
        let e = self.excite.forward(g, params, &s)?;
        let gate = g.sigmoid(&e);
        g.scale_channels(x, &gate)
    }

    pub fn param_count(&self) -> usize {
        self.squeeze.param_count() + self.excite.param_count()
    }

    /// Parameter count for `channels` without building the layer.
    pub fn count_for(channels: usize) -> usize {
        let h = Self::hidden(channels);
        channels * h + h + h * channels + channels
    }
}

/// Rejects inputs whose spatial size is not a multiple of `factor`.
pub fn check_divisible(shape: [usize; 4], factor: usize, what: &str) -> Result<()> {
    if !shape[2].is_multiple_of(factor) || !shape[3].is_multiple_of(factor) {
        return Err(Error::Dimension(format!(
            "{what} input {}×{} is not divisible by {factor}",
            shape[2], shape[3]
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_seeded() {
        let mut a = ParamSet::<f32>::new();
        let mut b = ParamSet::<f32>::new();
        Conv::new(&mut a, &mut Init::new(3), "c", 4, 8, 3, 1, 1.0);
        Conv::new(&mut b, &mut Init::new(3), "c", 4, 8, 3, 1, 1.0);
        assert_eq!(a.fingerprint(), b.fingerprint());
        let mut c = ParamSet::<f32>::new();
        Conv::new(&mut c, &mut Init::new(4), "c", 4, 8, 3, 1, 1.0);
        assert_ne!(a.fingerprint(), c.fingerprint());
    }

    #[test]
    fn attention_counts_agree() {
        let mut p = ParamSet::<f64>::new();
        let ca = ChannelAttention::new(&mut p, &mut Init::new(0), "ca", 32);
        assert_eq!(ca.param_count(), p.count());
        assert_eq!(ChannelAttention::count_for(32), p.count());
        assert_eq!(ChannelAttention::count_for(32), 32 * 8 + 8 + 8 * 32 + 32);
    }

    #[test]
    fn attention_on_zero_features_is_zero() {
        let mut p = ParamSet::<f64>::new();
        let ca = ChannelAttention::new(&mut p, &mut Init::new(0), "ca", 8);
        let mut g = Graph::inference();
        let x = g.input(Tensor::zeros([1, 8, 4, 4]));
        let y = ca.forward(&mut g, &p, &x).unwrap();
        assert!(y.value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn set_checks_shape() {
        let mut p = ParamSet::<f32>::new();
        Conv::new(&mut p, &mut Init::new(0), "c", 1, 1, 3, 1, 1.0);
        assert!(p.set(0, Tensor::zeros([1, 1, 1, 1])).is_err());
        assert!(p.set(0, Tensor::zeros([1, 1, 3, 3])).is_ok());
    }
}
