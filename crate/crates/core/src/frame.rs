//! RGB frames with values in `[0, 1]`, stored row-major as `H×W×3`.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Frame {
    pub const CHANNELS: usize = 3;

    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Dimension(format!("frame must be non-empty, got {height}×{width}")));
        }
        if data.len() != height * width * 3 {
            return Err(Error::Dimension(format!(
                "{height}×{width}×3 frame needs {} values, got {}",
                height * width * 3,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Domain(format!("frame value {v} outside [0, 1]")));
        }
        Ok(Self { height, width, data })
    }

    /// Builds a frame from arbitrary reals, clamping into `[0, 1]`
    /// (non-finite values become 0).
    pub fn clamped(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        let data = data
            .into_iter()
            .map(|v| if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.0 })
            .collect();
        Self::new(height, width, data)
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Result<Self> {
        Self::new(height, width, vec![value; height * width * 3])
    }

    /// `f(y, x, channel)`, clamped into range.
    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize, usize) -> f64) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width * 3);
        for y in 0..height {
            for x in 0..width {
                for c in 0..3 {
                    data.push(f(y, x, c));
                }
            }
        }
        Self::clamped(height, width, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * 3 + c]
    }

    pub fn pixel_count(&self) -> usize {
        self.height * self.width
    }

    /// `[1, 3, H, W]` tensor.
    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        let plane = self.pixel_count();
        let mut data = vec![T::zero(); plane * 3];
        for (i, px) in self.data.chunks_exact(3).enumerate() {
            for c in 0..3 {
                data[c * plane + i] = T::lit(px[c]);
            }
        }
        Tensor::from_vec([1, 3, self.height, self.width], data).expect("frame tensor shape")
    }

    /// Reads sample `n` of a 3-channel tensor, clamping into `[0, 1]`.
    pub fn from_tensor<T: Real>(t: &Tensor<T>, n: usize) -> Result<Self> {
        let [_, c, h, w] = t.shape();
        if c != 3 || n >= t.batch() {
            return Err(Error::Dimension(format!("cannot read frame {n} from tensor {:?}", t.shape())));
        }
        let plane = h * w;
        let base = n * 3 * plane;
        let mut data = Vec::with_capacity(plane * 3);
        for i in 0..plane {
            for ch in 0..3 {
                data.push(t.data()[base + ch * plane + i].as_f64());
            }
        }
        Self::clamped(h, w, data)
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 || top + height > self.height || left + width > self.width {
            return Err(Error::Dimension(format!(
                "crop {height}×{width} at ({top},{left}) outside {}×{} frame",
                self.height, self.width
            )));
        }
        let mut data = Vec::with_capacity(height * width * 3);
        for y in top..top + height {
            let start = (y * self.width + left) * 3;
            data.extend_from_slice(&self.data[start..start + width * 3]);
        }
        Ok(Self { height, width, data })
    }

    /// Extends the bottom and right edges by mirror reflection (edge pixel
    /// not repeated). Falls back to edge replication once the pad exceeds
    /// what a single reflection can supply.
    pub fn pad_reflect(&self, bottom: usize, right: usize) -> Self {
        let reflect = |i: usize, n: usize| -> usize {
            if i < n {
                i
            } else if n > 1 && i - n < n - 1 {
                2 * (n - 1) - i
            } else {
                n - 1
            }
        };
        let (h, w) = (self.height + bottom, self.width + right);
        let mut data = Vec::with_capacity(h * w * 3);
        for y in 0..h {
            let sy = reflect(y, self.height);
            for x in 0..w {
                let sx = reflect(x, self.width);
                let o = (sy * self.width + sx) * 3;
                data.extend_from_slice(&self.data[o..o + 3]);
            }
        }
        Self {
            height: h,
            width: w,
            data,
        }
    }

    /// Resamples with a triangle (bilinear) kernel whose support widens with
    /// the downscale factor, so reductions are anti-aliased.
    pub fn resize(&self, height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Dimension(format!("resize target {height}×{width} is empty")));
        }
        let rows = resample_weights(self.height, height);
        let cols = resample_weights(self.width, width);
        // Horizontal pass: H × width × 3.
        let mut tmp = vec![0.0; self.height * width * 3];
        for y in 0..self.height {
            for (x, taps) in cols.iter().enumerate() {
                for c in 0..3 {
                    tmp[(y * width + x) * 3 + c] = taps.iter().map(|&(sx, wt)| wt * self.get(y, sx, c)).sum();
                }
            }
        }
        let mut data = vec![0.0; height * width * 3];
        for (y, taps) in rows.iter().enumerate() {
            for x in 0..width {
                for c in 0..3 {
                    data[(y * width + x) * 3 + c] = taps.iter().map(|&(sy, wt)| wt * tmp[(sy * width + x) * 3 + c]).sum();
                }
            }
        }
        Self::clamped(height, width, data)
    }
}

/// Normalized triangle-filter taps mapping `dst` samples onto `src`.
fn resample_weights(src: usize, dst: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = src as f64 / dst as f64;
    let support = scale.max(1.0);
    (0..dst)
        .map(|i| {
            let center = (i as f64 + 0.5) * scale;
            let lo = ((center - support).floor().max(0.0)) as usize;
            let hi = ((center + support).ceil() as usize).min(src);
            let mut taps: Vec<(usize, f64)> = (lo..hi)
                .map(|j| {
                    let d = ((j as f64 + 0.5 - center) / support).abs();
                    (j, (1.0 - d).max(0.0))
                })
                .filter(|&(_, w)| w > 0.0)
                .collect();
            if taps.is_empty() {
                taps.push((((center.floor()) as usize).min(src - 1), 1.0));
            }
            let total: f64 = taps.iter().map(|t| t.1).sum();
            taps.iter_mut().for_each(|t| t.1 /= total);
            taps
        })
        .collect()
}
