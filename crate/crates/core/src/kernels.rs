//! Forward and backward kernels over [`Tensor`]s. The autograd graph calls
//! into these; nothing here tracks history.

use crate::tensor::{Real, Tensor};

/// Upper bound on the im2col scratch buffer, in elements.
const COL_BUDGET: usize = 1 << 21;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub cin: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub h: usize,
    pub w: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(x: [usize; 4], wshape: [usize; 4], stride: usize, pad: usize) -> Option<Self> {
        let [_, cin, h, w] = x;
        let [cout, wcin, kh, kw] = wshape;
        if wcin != cin || stride == 0 || h + 2 * pad < kh || w + 2 * pad < kw {
            return None;
        }
        Some(Self {
            cin,
            cout,
            kh,
            kw,
            stride,
            pad,
            h,
            w,
            ho: (h + 2 * pad - kh) / stride + 1,
            wo: (w + 2 * pad - kw) / stride + 1,
        })
    }

    fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn rows_per_chunk(&self) -> usize {
        (COL_BUDGET / (self.k() * self.wo).max(1)).clamp(1, self.ho)
    }
}

/// Unrolls output rows `[oy0, oy1)` of one sample into a `K × P` matrix.
fn im2col<T: Real>(x: &[T], g: &ConvGeom, oy0: usize, oy1: usize, cols: &mut [T]) {
    let p = (oy1 - oy0) * g.wo;
    let mut row = 0;
    for ci in 0..g.cin {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let dst = &mut cols[row * p..(row + 1) * p];
                for (r, oy) in (oy0..oy1).enumerate() {
                    let out = &mut dst[r * g.wo..(r + 1) * g.wo];
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        out.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, o) in out.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *o = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
                row += 1;
            }
        }
    }
}

/// Scatter-adds a `K × P` column matrix back onto the input sample.
fn col2im<T: Real>(cols: &[T], g: &ConvGeom, oy0: usize, oy1: usize, dx: &mut [T]) {
    let p = (oy1 - oy0) * g.wo;
    let mut row = 0;
    for ci in 0..g.cin {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let src = &cols[row * p..(row + 1) * p];
                for (r, oy) in (oy0..oy1).enumerate() {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, &v) in src[r * g.wo..(r + 1) * g.wo].iter().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            dst[ix as usize] += v;
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Zero-padded 2-D cross-correlation, weights `[cout, cin, kh, kw]`.
pub fn conv2d<T: Real>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>, g: &ConvGeom) -> Tensor<T> {
    let n = x.batch();
    let mut out = Tensor::zeros([n, g.cout, g.ho, g.wo]);
    let k = g.k();
    let p_all = g.ho * g.wo;
    let in_len = x.sample_len();
    let out_len = g.cout * p_all;
    let chunk = g.rows_per_chunk();
    let mut cols = vec![T::zero(); if g.is_pointwise() { 0 } else { k * chunk * g.wo }];
    for s in 0..n {
        let xs = &x.data()[s * in_len..(s + 1) * in_len];
        let os = &mut out.data_mut()[s * out_len..(s + 1) * out_len];
        if let Some(b) = b {
            for (co, plane) in os.chunks_mut(p_all).enumerate() {
                plane.fill(b.data()[co]);
            }
        }
        if g.is_pointwise() {
            T::gemm(false, false, g.cout, p_all, k, w.data(), xs, T::one(), os, p_all);
            continue;
        }
        let mut oy0 = 0;
        while oy0 < g.ho {
            let oy1 = (oy0 + chunk).min(g.ho);
            let p = (oy1 - oy0) * g.wo;
            im2col(xs, g, oy0, oy1, &mut cols[..k * p]);
            T::gemm(false, false, g.cout, p, k, w.data(), &cols[..k * p], T::one(), &mut os[oy0 * g.wo..], p_all);
            oy0 = oy1;
        }
    }
    out
}

/// Gradients of [`conv2d`] with respect to input, weight and bias.
pub fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    gout: &Tensor<T>,
    g: &ConvGeom,
    need_dx: bool,
    need_dw: bool,
) -> (Option<Tensor<T>>, Tensor<T>, Tensor<T>) {
    let n = x.batch();
    let k = g.k();
    let p_all = g.ho * g.wo;
    let in_len = x.sample_len();
    let out_len = g.cout * p_all;
    let mut dw = Tensor::zeros(w.shape());
    let mut db = Tensor::zeros([g.cout, 1, 1, 1]);
    let mut dx = need_dx.then(|| Tensor::zeros(x.shape()));
    let chunk = g.rows_per_chunk();
    let scratch = if g.is_pointwise() { 0 } else { k * chunk * g.wo };
    let mut cols = vec![T::zero(); scratch];
    let mut dcols = vec![T::zero(); if need_dx { scratch } else { 0 }];
    for s in 0..n {
        let xs = &x.data()[s * in_len..(s + 1) * in_len];
        let gs = &gout.data()[s * out_len..(s + 1) * out_len];
        for (co, plane) in gs.chunks(p_all).enumerate() {
            db.data_mut()[co] += plane.iter().copied().sum::<T>();
        }
        if g.is_pointwise() {
            // dW += gout · xᵀ ; dx = Wᵀ · gout
            if need_dw {
                T::gemm(false, true, g.cout, k, p_all, gs, xs, T::one(), dw.data_mut(), k);
            }
            if let Some(dx) = dx.as_mut() {
                let dxs = &mut dx.data_mut()[s * in_len..(s + 1) * in_len];
                T::gemm(true, false, k, p_all, g.cout, w.data(), gs, T::zero(), dxs, p_all);
            }
            continue;
        }
        let mut oy0 = 0;
        while oy0 < g.ho {
            let oy1 = (oy0 + chunk).min(g.ho);
            let p = (oy1 - oy0) * g.wo;
            // Gradient rows for this chunk are strided by p_all; pack them.
            let gchunk: Vec<T> = gs
                .chunks(p_all)
                .flat_map(|plane| plane[oy0 * g.wo..oy1 * g.wo].iter().copied())
                .collect();
            if need_dw {
                im2col(xs, g, oy0, oy1, &mut cols[..k * p]);
                T::gemm(false, true, g.cout, k, p, &gchunk, &cols[..k * p], T::one(), dw.data_mut(), k);
            }
            if let Some(dx) = dx.as_mut() {
                T::gemm(true, false, k, p, g.cout, w.data(), &gchunk, T::zero(), &mut dcols[..k * p], p);
                let dxs = &mut dx.data_mut()[s * in_len..(s + 1) * in_len];
                col2im(&dcols[..k * p], g, oy0, oy1, dxs);
            }
            oy0 = oy1;
        }
    }
    (dx, dw, db)
}

/// Depth-to-space: `[n, c·r², h, w] → [n, c, h·r, w·r]`.
pub fn pixel_shuffle<T: Real>(x: &Tensor<T>, r: usize) -> Tensor<T> {
    let [n, cr, h, w] = x.shape();
    let c = cr / (r * r);
    let mut out = Tensor::zeros([n, c, h * r, w * r]);
    let (ow, plane) = (w * r, h * r * w * r);
    let od = out.data_mut();
    for s in 0..n {
        for ci in 0..c {
            for i in 0..r {
                for j in 0..r {
                    let src_c = ci * r * r + i * r + j;
                    for y in 0..h {
                        for xx in 0..w {
                            od[(s * c + ci) * plane + (y * r + i) * ow + xx * r + j] = x.at(s, src_c, y, xx);
                        }
                    }
                }
            }
        }
    }
    out
}

/// Inverse of [`pixel_shuffle`]; also its backward pass.
pub fn pixel_unshuffle<T: Real>(x: &Tensor<T>, r: usize) -> Tensor<T> {
    let [n, c, hr, wr] = x.shape();
    let (h, w) = (hr / r, wr / r);
    let mut out = Tensor::zeros([n, c * r * r, h, w]);
    for s in 0..n {
        for ci in 0..c {
            for i in 0..r {
                for j in 0..r {
                    let dst_c = ci * r * r + i * r + j;
                    for y in 0..h {
                        for xx in 0..w {
                            let o = out.offset(s, dst_c, y, xx);
                            out.data_mut()[o] = x.at(s, ci, y * r + i, xx * r + j);
                        }
                    }
                }
            }
        }
    }
    out
}

pub fn upsample_nearest<T: Real>(x: &Tensor<T>, f: usize) -> Tensor<T> {
    let [n, c, h, w] = x.shape();
    let (oh, ow) = (h * f, w * f);
    let mut data = Vec::with_capacity(n * c * oh * ow);
    for plane in x.data().chunks(h * w) {
        for y in 0..oh {
            let row = &plane[(y / f) * w..(y / f + 1) * w];
            for xx in 0..ow {
                data.push(row[xx / f]);
            }
        }
    }
    Tensor::from_vec([n, c, oh, ow], data).expect("shape by construction")
}

/// Sums each `f×f` block; the adjoint of [`upsample_nearest`].
pub fn sum_pool<T: Real>(x: &Tensor<T>, f: usize) -> Tensor<T> {
    let [n, c, h, w] = x.shape();
    let (oh, ow) = (h / f, w / f);
    let mut out = Tensor::zeros([n, c, oh, ow]);
    let od = out.data_mut();
    for (pi, plane) in x.data().chunks(h * w).enumerate() {
        for y in 0..h {
            for xx in 0..w {
                od[pi * oh * ow + (y / f) * ow + xx / f] += plane[y * w + xx];
            }
        }
    }
    out
}

/// 2×2 stride-2 max pooling; returns flat argmax indices for the backward pass.
pub fn max_pool2<T: Real>(x: &Tensor<T>) -> (Tensor<T>, Vec<u32>) {
    let [n, c, h, w] = x.shape();
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros([n, c, oh, ow]);
    let mut arg = Vec::with_capacity(n * c * oh * ow);
    let xd = x.data();
    let od = out.data_mut();
    let mut o = 0;
    for pi in 0..n * c {
        let base = pi * h * w;
        for y in 0..oh {
            for xx in 0..ow {
                let mut best = base + 2 * y * w + 2 * xx;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * y + dy) * w + 2 * xx + dx;
                    if xd[idx] > xd[best] {
                        best = idx;
                    }
                }
                od[o] = xd[best];
                arg.push(best as u32);
                o += 1;
            }
        }
    }
    (out, arg)
}

/// Dark-channel statistic: per-pixel minimum over channels, then a
/// `window × window` minimum filter with replicate padding. Returns
/// `[n, 1, h, w]` plus the flat index of the selected input element.
pub fn dark_channel<T: Real>(x: &Tensor<T>, window: usize) -> (Tensor<T>, Vec<u32>) {
    let [n, c, h, w] = x.shape();
    let r = window / 2;
    let plane = h * w;
    let mut out = Tensor::zeros([n, 1, h, w]);
    let mut arg = vec![0u32; n * plane];
    let mut cmin = vec![T::zero(); plane];
    let mut carg = vec![0usize; plane];
    let mut rmin = vec![T::zero(); plane];
    let mut rarg = vec![0usize; plane];
    let xd = x.data();
    for s in 0..n {
        let base = s * c * plane;
        for i in 0..plane {
            let mut best = base + i;
            for ch in 1..c {
                let idx = base + ch * plane + i;
                if xd[idx] < xd[best] {
                    best = idx;
                }
            }
            cmin[i] = xd[best];
            carg[i] = best;
        }
        // Replicate padding never introduces new values, so the window can
        // simply be clipped to the frame.
        for y in 0..h {
            for xx in 0..w {
                let (lo, hi) = (xx.saturating_sub(r), (xx + r).min(w - 1));
                let mut best = y * w + lo;
                for k in lo + 1..=hi {
                    if cmin[y * w + k] < cmin[best] {
                        best = y * w + k;
                    }
                }
                rmin[y * w + xx] = cmin[best];
                rarg[y * w + xx] = carg[best];
            }
        }
        let od = out.data_mut();
        for y in 0..h {
            let (lo, hi) = (y.saturating_sub(r), (y + r).min(h - 1));
            for xx in 0..w {
                let mut best = lo * w + xx;
                for k in lo + 1..=hi {
                    if rmin[k * w + xx] < rmin[best] {
                        best = k * w + xx;
                    }
                }
                od[s * plane + y * w + xx] = rmin[best];
                arg[s * plane + y * w + xx] = rarg[best] as u32;
            }
        }
    }
    (out, arg)
}
