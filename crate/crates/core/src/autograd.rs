//! A small reverse-mode tape over [`Tensor`] operations.
//!
//! A [`Graph`] either records (training, gradient checks) or does not
//! (inference). In non-recording mode every op returns a detached [`Var`]
//! whose value is dropped as soon as the caller lets go of it, so inference
//! memory stays proportional to the live activations.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::tensor::{Real, Tensor};

static GRAPH_IDS: AtomicU64 = AtomicU64::new(1);

/// A value produced by (or fed into) a [`Graph`].
#[derive(Clone, Debug)]
pub struct Var<T> {
    node: Option<(u64, usize)>,
    value: Arc<Tensor<T>>,
}

impl<T: Real> Var<T> {
    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn shape(&self) -> [usize; 4] {
        self.value.shape()
    }

    pub fn into_tensor(self) -> Tensor<T> {
        Arc::try_unwrap(self.value).unwrap_or_else(|arc| (*arc).clone())
    }
}

enum Op {
    Leaf,
    Conv2d {
        x: usize,
        w: usize,
        b: Option<usize>,
        geom: ConvGeom,
    },
    Relu(usize),
    Sigmoid(usize),
    Add(usize, usize),
    /// `x[n,c,:,:] * gate[n,c,0,0]`
    ScaleChannels { x: usize, gate: usize },
    GlobalAvgPool(usize),
    PixelShuffle(usize, usize),
    UpsampleNearest(usize, usize),
    Concat(Vec<usize>),
    /// Gathers one input element per output element.
    Select { x: usize, index: Vec<u32> },
    /// `x * scale[c] + shift[c]`; constants carry no gradient.
    AffineChannels { x: usize, scale: Vec<f64> },
    SmoothL1 { a: usize, b: usize, norm: f64 },
    L1 { a: usize, b: usize, norm: f64 },
    WeightedSum(Vec<(f64, usize)>),
}

struct Node<T> {
    value: Arc<Tensor<T>>,
    op: Op,
    /// Whether any trainable leaf or input lies upstream.
    needs: bool,
}

impl Op {
    fn inputs(&self) -> Vec<usize> {
        match self {
            Op::Leaf => Vec::new(),
            Op::Conv2d { x, w, b, .. } => [Some(*x), Some(*w), *b].into_iter().flatten().collect(),
            Op::Relu(x) | Op::Sigmoid(x) | Op::GlobalAvgPool(x) | Op::PixelShuffle(x, _) | Op::UpsampleNearest(x, _) => vec![*x],
            Op::Add(a, b) | Op::SmoothL1 { a, b, .. } | Op::L1 { a, b, .. } => vec![*a, *b],
            Op::ScaleChannels { x, gate } => vec![*x, *gate],
            Op::Concat(parts) => parts.clone(),
            Op::Select { x, .. } | Op::AffineChannels { x, .. } => vec![*x],
            Op::WeightedSum(terms) => terms.iter().map(|(_, v)| *v).collect(),
        }
    }
}

pub struct Graph<T> {
    id: u64,
    record: bool,
    nodes: Vec<Node<T>>,
    params: HashMap<*const Tensor<T>, usize>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    /// A recording graph.
    pub fn new() -> Self {
        Self {
            id: GRAPH_IDS.fetch_add(1, Ordering::Relaxed),
            record: true,
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    /// A graph that records nothing; `backward` is unavailable.
    pub fn inference() -> Self {
        Self {
            record: false,
            ..Self::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op) -> Var<T> {
        let needs = op.inputs().iter().any(|&i| self.nodes[i].needs);
        self.push_leaf_or_op(value, op, needs)
    }

    fn push_leaf_or_op(&mut self, value: Tensor<T>, op: Op, needs: bool) -> Var<T> {
        let value = Arc::new(value);
        if !self.record {
            return Var { node: None, value };
        }
        self.nodes.push(Node {
            value: value.clone(),
            op,
            needs,
        });
        Var {
            node: Some((self.id, self.nodes.len() - 1)),
            value,
        }
    }

    /// Node index of `v`, registering foreign or detached values as constants.
    fn idx(&mut self, v: &Var<T>) -> usize {
        match v.node {
            Some((gid, i)) if gid == self.id => i,
            _ => {
                self.nodes.push(Node {
                    value: v.value.clone(),
                    op: Op::Leaf,
                    needs: false,
                });
                self.nodes.len() - 1
            }
        }
    }

    /// A leaf whose gradient can be queried with [`Gradients::wrt`].
    pub fn input(&mut self, t: Tensor<T>) -> Var<T> {
        self.push_leaf_or_op(t, Op::Leaf, true)
    }

    /// A leaf that receives no gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var<T> {
        self.push_leaf_or_op(t, Op::Leaf, false)
    }

    /// Like [`Graph::constant`] but shares the storage of `t`.
    pub fn constant_shared(&mut self, t: &Arc<Tensor<T>>) -> Var<T> {
        let v = Var { node: None, value: t.clone() };
        if !self.record {
            return v;
        }
        let i = self.idx(&v);
        Var { node: Some((self.id, i)), value: t.clone() }
    }

    /// A trainable parameter. Repeated use of the same `Arc` maps to one leaf,
    /// so shared weights accumulate gradient from every use.
    pub fn param(&mut self, p: &Arc<Tensor<T>>) -> Var<T> {
        if !self.record {
            return Var {
                node: None,
                value: p.clone(),
            };
        }
        let key = Arc::as_ptr(p);
        let i = match self.params.get(&key) {
            Some(&i) => i,
            None => {
                self.nodes.push(Node {
                    value: p.clone(),
                    op: Op::Leaf,
                    needs: true,
                });
                let i = self.nodes.len() - 1;
                self.params.insert(key, i);
                i
            }
        };
        Var {
            node: Some((self.id, i)),
            value: p.clone(),
        }
    }

    pub fn conv2d(&mut self, x: &Var<T>, w: &Var<T>, b: Option<&Var<T>>, stride: usize, pad: usize) -> Result<Var<T>> {
        let geom = ConvGeom::new(x.shape(), w.shape(), stride, pad).ok_or_else(|| {
            Error::Dimension(format!(
                "conv2d input {:?} incompatible with weight {:?} (stride {stride}, pad {pad})",
                x.shape(),
                w.shape()
            ))
        })?;
        if let Some(b) = b {
            if b.value.len() != geom.cout {
                return Err(Error::Dimension(format!("bias has {} entries for {} outputs", b.value.len(), geom.cout)));
            }
        }
        let y = kernels::conv2d(&x.value, &w.value, b.map(|b| &*b.value), &geom);
        let op = if self.record {
            Op::Conv2d {
                x: self.idx(x),
                w: self.idx(w),
                b: b.map(|b| self.idx(b)),
                geom,
            }
        } else {
            Op::Leaf
        };
        Ok(self.push(y, op))
    }

    pub fn relu(&mut self, x: &Var<T>) -> Var<T> {
        let y = x.value.map(|v| v.max(T::zero()));
        let op = if self.record { Op::Relu(self.idx(x)) } else { Op::Leaf };
        self.push(y, op)
    }

    pub fn sigmoid(&mut self, x: &Var<T>) -> Var<T> {
        let y = x.value.map(|v| T::one() / (T::one() + (-v).exp()));
        let op = if self.record { Op::Sigmoid(self.idx(x)) } else { Op::Leaf };
        self.push(y, op)
    }

    pub fn add(&mut self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        if a.shape() != b.shape() {
            return Err(Error::Dimension(format!("add {:?} + {:?}", a.shape(), b.shape())));
        }
        let mut y = (*a.value).clone();
        y.add_assign(&b.value);
        let op = if self.record {
            Op::Add(self.idx(a), self.idx(b))
        } else {
            Op::Leaf
        };
        Ok(self.push(y, op))
    }

    pub fn scale_channels(&mut self, x: &Var<T>, gate: &Var<T>) -> Result<Var<T>> {
        let [n, c, h, w] = x.shape();
        if gate.shape() != [n, c, 1, 1] {
            return Err(Error::Dimension(format!("gate {:?} for features {:?}", gate.shape(), x.shape())));
        }
        let mut y = (*x.value).clone();
        for (plane, &g) in y.data_mut().chunks_mut(h * w).zip(gate.value.data()) {
            for v in plane {
                *v = *v * g;
            }
        }
        let op = if self.record {
            Op::ScaleChannels {
                x: self.idx(x),
                gate: self.idx(gate),
            }
        } else {
            Op::Leaf
        };
        Ok(self.push(y, op))
    }

    pub fn global_avg_pool(&mut self, x: &Var<T>) -> Var<T> {
        let [n, c, h, w] = x.shape();
        let inv = T::lit(1.0 / (h * w) as f64);
        let data = x.value.data().chunks(h * w).map(|p| p.iter().copied().sum::<T>() * inv).collect();
        let y = Tensor::from_vec([n, c, 1, 1], data).expect("pool shape");
        let op = if self.record { Op::GlobalAvgPool(self.idx(x)) } else { Op::Leaf };
        self.push(y, op)
    }

    pub fn pixel_shuffle(&mut self, x: &Var<T>, r: usize) -> Result<Var<T>> {
        if !x.shape()[1].is_multiple_of(r * r) {
            return Err(Error::Dimension(format!("{} channels not divisible by {}", x.shape()[1], r * r)));
        }
        let y = kernels::pixel_shuffle(&x.value, r);
        let op = if self.record { Op::PixelShuffle(self.idx(x), r) } else { Op::Leaf };
        Ok(self.push(y, op))
    }

    pub fn upsample_nearest(&mut self, x: &Var<T>, f: usize) -> Var<T> {
        if f == 1 {
            return x.clone();
        }
        let y = kernels::upsample_nearest(&x.value, f);
        let op = if self.record {
            Op::UpsampleNearest(self.idx(x), f)
        } else {
            Op::Leaf
        };
        self.push(y, op)
    }

    /// Concatenates along the channel axis.
    pub fn concat(&mut self, parts: &[&Var<T>]) -> Result<Var<T>> {
        let first = parts.first().ok_or_else(|| Error::Value("concat of nothing".into()))?;
        let [n, _, h, w] = first.shape();
        if let Some(bad) = parts.iter().find(|p| {
            let s = p.shape();
            s[0] != n || s[2] != h || s[3] != w
        }) {
            return Err(Error::Dimension(format!("concat {:?} with {:?}", first.shape(), bad.shape())));
        }
        let c: usize = parts.iter().map(|p| p.shape()[1]).sum();
        let mut data = Vec::with_capacity(n * c * h * w);
        for s in 0..n {
            for p in parts {
                let len = p.value.sample_len();
                data.extend_from_slice(&p.value.data()[s * len..(s + 1) * len]);
            }
        }
        let y = Tensor::from_vec([n, c, h, w], data)?;
        let op = if self.record {
            Op::Concat(parts.iter().map(|p| self.idx(p)).collect())
        } else {
            Op::Leaf
        };
        Ok(self.push(y, op))
    }

    pub fn max_pool2(&mut self, x: &Var<T>) -> Var<T> {
        let (y, index) = kernels::max_pool2(&x.value);
        let op = if self.record {
            Op::Select { x: self.idx(x), index }
        } else {
            Op::Leaf
        };
        self.push(y, op)
    }

    /// Dark-channel haze statistic (see [`kernels::dark_channel`]); the
    /// gradient flows to the selected minimum.
    pub fn dark_channel(&mut self, x: &Var<T>, window: usize) -> Var<T> {
        let (y, index) = kernels::dark_channel(&x.value, window);
        let op = if self.record {
            Op::Select { x: self.idx(x), index }
        } else {
            Op::Leaf
        };
        self.push(y, op)
    }

    pub fn affine_channels(&mut self, x: &Var<T>, scale: &[f64], shift: &[f64]) -> Result<Var<T>> {
        let [_, c, h, w] = x.shape();
        if scale.len() != c || shift.len() != c {
            return Err(Error::Dimension(format!("affine over {c} channels given {}/{}", scale.len(), shift.len())));
        }
        let mut y = (*x.value).clone();
        for (pi, plane) in y.data_mut().chunks_mut(h * w).enumerate() {
            let (s, b) = (T::lit(scale[pi % c]), T::lit(shift[pi % c]));
            for v in plane {
                *v = *v * s + b;
            }
        }
        let op = if self.record {
            Op::AffineChannels {
                x: self.idx(x),
                scale: scale.to_vec(),
            }
        } else {
            Op::Leaf
        };
        Ok(self.push(y, op))
    }

    /// `Σ φ(a − b) / norm` with `φ` the Smooth-L1 kernel
    /// (`0.5 z²` for `|z| < 1`, `|z| − 0.5` otherwise).
    pub fn smooth_l1(&mut self, a: &Var<T>, b: &Var<T>, norm: f64) -> Result<Var<T>> {
        if a.shape() != b.shape() {
            return Err(Error::Dimension(format!("smooth_l1 {:?} vs {:?}", a.shape(), b.shape())));
        }
        let half = T::lit(0.5);
        let sum: T = a
            .value
            .data()
            .iter()
            .zip(b.value.data())
            .map(|(&p, &q)| {
                let z = (p - q).abs();
                if z < T::one() {
                    half * z * z
                } else {
                    z - half
                }
            })
            .sum();
        let y = Tensor::scalar(sum / T::lit(norm));
        let op = if self.record {
            Op::SmoothL1 {
                a: self.idx(a),
                b: self.idx(b),
                norm,
            }
        } else {
            Op::Leaf
        };
        Ok(self.push(y, op))
    }

    /// `Σ |a − b| / norm`.
    pub fn l1(&mut self, a: &Var<T>, b: &Var<T>, norm: f64) -> Result<Var<T>> {
        if a.shape() != b.shape() {
            return Err(Error::Dimension(format!("l1 {:?} vs {:?}", a.shape(), b.shape())));
        }
        let sum: T = a.value.data().iter().zip(b.value.data()).map(|(&p, &q)| (p - q).abs()).sum();
        let y = Tensor::scalar(sum / T::lit(norm));
        let op = if self.record {
            Op::L1 {
                a: self.idx(a),
                b: self.idx(b),
                norm,
            }
        } else {
            Op::Leaf
        };
        Ok(self.push(y, op))
    }

    /// `Σ coef_k · s_k` over scalar vars.
    pub fn weighted_sum(&mut self, terms: &[(f64, &Var<T>)]) -> Result<Var<T>> {
        if let Some((_, bad)) = terms.iter().find(|(_, v)| v.value.len() != 1) {
            return Err(Error::Dimension(format!("weighted_sum over non-scalar {:?}", bad.shape())));
        }
        let total: T = terms.iter().map(|(c, v)| T::lit(*c) * v.value.item()).sum();
        let op = if self.record {
            Op::WeightedSum(terms.iter().map(|(c, v)| (*c, self.idx(v))).collect())
        } else {
            Op::Leaf
        };
        Ok(self.push(Tensor::scalar(total), op))
    }

    /// Reverse pass from a scalar.
    pub fn backward(&self, loss: &Var<T>) -> Result<Gradients<T>> {
        let root = match loss.node {
            Some((gid, i)) if self.record && gid == self.id => i,
            _ => return Err(Error::Value("backward on a value this graph did not record".into())),
        };
        if loss.value.len() != 1 {
            return Err(Error::Dimension(format!("backward needs a scalar, got {:?}", loss.shape())));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root] = Some(Tensor::scalar(T::one()));

        fn acc<T: Real>(grads: &mut [Option<Tensor<T>>], i: usize, g: Tensor<T>) {
            match &mut grads[i] {
                Some(existing) => existing.add_assign(&g),
                slot => *slot = Some(g),
            }
        }

        for i in (0..=root).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs {
                continue;
            }
            match &node.op {
                Op::Leaf => {}
                Op::Conv2d { x, w, b, geom } => {
                    let xv = &self.nodes[*x].value;
                    let wv = &self.nodes[*w].value;
                    let (need_dx, need_dw) = (self.nodes[*x].needs, self.nodes[*w].needs);
                    let (dx, dw, db) = kernels::conv2d_backward(xv, wv, &g, geom, need_dx, need_dw);
                    if let Some(dx) = dx {
                        acc(&mut grads, *x, dx);
                    }
                    if need_dw {
                        acc(&mut grads, *w, dw);
                    }
                    if let Some(b) = b.filter(|&b| self.nodes[b].needs) {
                        let shape = self.nodes[b].value.shape();
                        acc(&mut grads, b, Tensor::from_vec(shape, db.into_vec())?);
                    }
                }
                Op::Relu(x) => {
                    let mut d = g.clone();
                    for (dv, &y) in d.data_mut().iter_mut().zip(node.value.data()) {
                        if y <= T::zero() {
                            *dv = T::zero();
                        }
                    }
                    acc(&mut grads, *x, d);
                }
                Op::Sigmoid(x) => {
                    let mut d = g.clone();
                    for (dv, &y) in d.data_mut().iter_mut().zip(node.value.data()) {
                        *dv = *dv * y * (T::one() - y);
                    }
                    acc(&mut grads, *x, d);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g.clone());
                }
                Op::ScaleChannels { x, gate } => {
                    let xv = &self.nodes[*x].value;
                    let gv = &self.nodes[*gate].value;
                    let plane = xv.height() * xv.width();
                    let mut dx = g.clone();
                    let mut dgate = Tensor::zeros(gv.shape());
                    for (pi, (dplane, xplane)) in dx.data_mut().chunks_mut(plane).zip(xv.data().chunks(plane)).enumerate() {
                        let gate_v = gv.data()[pi];
                        let mut s = T::zero();
                        for (dv, &xval) in dplane.iter_mut().zip(xplane) {
                            s += *dv * xval;
                            *dv = *dv * gate_v;
                        }
                        dgate.data_mut()[pi] = s;
                    }
                    acc(&mut grads, *x, dx);
                    acc(&mut grads, *gate, dgate);
                }
                Op::GlobalAvgPool(x) => {
                    let shape = self.nodes[*x].value.shape();
                    let plane = shape[2] * shape[3];
                    let inv = T::lit(1.0 / plane as f64);
                    let data = g.data().iter().flat_map(|&v| std::iter::repeat_n(v * inv, plane)).collect();
                    acc(&mut grads, *x, Tensor::from_vec(shape, data)?);
                }
                Op::PixelShuffle(x, r) => acc(&mut grads, *x, kernels::pixel_unshuffle(&g, *r)),
                Op::UpsampleNearest(x, f) => acc(&mut grads, *x, kernels::sum_pool(&g, *f)),
                Op::Concat(parts) => {
                    let [n, _, h, w] = g.shape();
                    let mut offset = 0;
                    let total = g.sample_len();
                    for &p in parts {
                        let shape = self.nodes[p].value.shape();
                        let len = shape[1] * h * w;
                        let mut data = Vec::with_capacity(n * len);
                        for s in 0..n {
                            data.extend_from_slice(&g.data()[s * total + offset..s * total + offset + len]);
                        }
                        offset += len;
                        acc(&mut grads, p, Tensor::from_vec(shape, data)?);
                    }
                }
                Op::Select { x, index } => {
                    let mut dx = Tensor::zeros(self.nodes[*x].value.shape());
                    for (&gv, &ix) in g.data().iter().zip(index) {
                        dx.data_mut()[ix as usize] += gv;
                    }
                    acc(&mut grads, *x, dx);
                }
                Op::AffineChannels { x, scale } => {
                    let [_, c, h, w] = g.shape();
                    let mut d = g.clone();
                    for (pi, plane) in d.data_mut().chunks_mut(h * w).enumerate() {
                        let s = T::lit(scale[pi % c]);
                        for v in plane {
                            *v = *v * s;
                        }
                    }
                    acc(&mut grads, *x, d);
                }
                Op::SmoothL1 { a, b, norm } => {
                    let scale = g.item() / T::lit(*norm);
                    let av = &self.nodes[*a].value;
                    let bv = &self.nodes[*b].value;
                    let da: Vec<T> = av
                        .data()
                        .iter()
                        .zip(bv.data())
                        .map(|(&p, &q)| {
                            let z = p - q;
                            let d = if z.abs() < T::one() { z } else { z.signum() };
                            d * scale
                        })
                        .collect();
                    let db: Vec<T> = da.iter().map(|&v| -v).collect();
                    acc(&mut grads, *a, Tensor::from_vec(av.shape(), da)?);
                    acc(&mut grads, *b, Tensor::from_vec(bv.shape(), db)?);
                }
                Op::L1 { a, b, norm } => {
                    let scale = g.item() / T::lit(*norm);
                    let av = &self.nodes[*a].value;
                    let bv = &self.nodes[*b].value;
                    let da: Vec<T> = av
                        .data()
                        .iter()
                        .zip(bv.data())
                        .map(|(&p, &q)| {
                            let z = p - q;
                            if z == T::zero() {
                                T::zero()
                            } else {
                                z.signum() * scale
                            }
                        })
                        .collect();
                    let db: Vec<T> = da.iter().map(|&v| -v).collect();
                    acc(&mut grads, *a, Tensor::from_vec(av.shape(), da)?);
                    acc(&mut grads, *b, Tensor::from_vec(bv.shape(), db)?);
                }
                Op::WeightedSum(terms) => {
                    for (c, v) in terms {
                        acc(&mut grads, *v, Tensor::scalar(g.item() * T::lit(*c)));
                    }
                }
            }
            grads[i] = Some(g);
        }
        Ok(Gradients {
            graph_id: self.id,
            grads,
            params: self.params.clone(),
        })
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients<T> {
    graph_id: u64,
    grads: Vec<Option<Tensor<T>>>,
    params: HashMap<*const Tensor<T>, usize>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of the loss with respect to a recorded value; `None` if the
    /// value does not influence the loss.
    pub fn wrt(&self, v: &Var<T>) -> Option<&Tensor<T>> {
        match v.node {
            Some((gid, i)) if gid == self.graph_id => self.grads.get(i).and_then(|g| g.as_ref()),
            _ => None,
        }
    }

    /// Gradient with respect to a parameter, `None` if it was not used.
    pub fn wrt_param(&self, p: &Arc<Tensor<T>>) -> Option<&Tensor<T>> {
        self.params
            .get(&Arc::as_ptr(p))
            .and_then(|&i| self.grads[i].as_ref())
    }
}
