//! PSNR and SSIM on RGB frames in `[0, 1]`.

use std::path::Path;

use serde::Serialize;
use serde_json::{json, Value};

use crate::data::FrameSequence;
use crate::error::{Error, Result};
use crate::frame::Frame;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

fn check_same(a: &Frame, b: &Frame) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Dimension(format!("frames {:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

pub fn mse(a: &Frame, b: &Frame) -> Result<f64> {
    check_same(a, b)?;
    let sum: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(sum / a.data().len() as f64)
}

/// `10·log10(1 / MSE)`; `+∞` for identical frames.
pub fn psnr(a: &Frame, b: &Frame) -> Result<f64> {
    let m = mse(a, b)?;
    Ok(if m == 0.0 { f64::INFINITY } else { -10.0 * m.log10() })
}

/// Normalized 1-D Gaussian taps.
pub fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let w: Vec<f64> = (0..size).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Valid-mode separable filtering of an `h × w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (ho, wo) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * wo];
    for y in 0..h {
        let src = &plane[y * w..(y + 1) * w];
        for x in 0..wo {
            rows[y * wo + x] = taps.iter().zip(&src[x..x + k]).map(|(t, v)| t * v).sum();
        }
    }
    let mut out = vec![0.0; ho * wo];
    for y in 0..ho {
        for x in 0..wo {
            out[y * wo + x] = taps.iter().enumerate().map(|(i, t)| t * rows[(y + i) * wo + x]).sum();
        }
    }
    out
}

/// Mean SSIM over all valid 11×11 Gaussian windows, per channel, then
/// averaged over channels.
pub fn ssim(a: &Frame, b: &Frame) -> Result<f64> {
    check_same(a, b)?;
    let (h, w) = a.dims();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Dimension(format!("ssim needs at least {SSIM_WINDOW}×{SSIM_WINDOW}, got {h}×{w}")));
    }
    let taps = gaussian_window(SSIM_WINDOW, SSIM_SIGMA);
    let channel = |f: &Frame, c: usize| -> Vec<f64> { f.data().iter().skip(c).step_by(3).copied().collect() };
    let mut total = 0.0;
    for c in 0..3 {
        let x = channel(a, c);
        let y = channel(b, c);
        let prod = |p: &[f64], q: &[f64]| -> Vec<f64> { p.iter().zip(q).map(|(u, v)| u * v).collect() };
        let mx = filter_valid(&x, h, w, &taps);
        let my = filter_valid(&y, h, w, &taps);
        let exx = filter_valid(&prod(&x, &x), h, w, &taps);
        let eyy = filter_valid(&prod(&y, &y), h, w, &taps);
        let exy = filter_valid(&prod(&x, &y), h, w, &taps);
        let n = mx.len();
        let mut sum = 0.0;
        for i in 0..n {
            let (ux, uy) = (mx[i], my[i]);
            let vx = exx[i] - ux * ux;
            let vy = eyy[i] - uy * uy;
            let cxy = exy[i] - ux * uy;
            sum += ((2.0 * ux * uy + SSIM_C1) * (2.0 * cxy + SSIM_C2)) / ((ux * ux + uy * uy + SSIM_C1) * (vx + vy + SSIM_C2));
        }
        total += sum / n as f64;
    }
    Ok(total / 3.0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrameScore {
    pub index: usize,
    pub name: String,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub per_frame: Vec<FrameScore>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
}

/// Mean PSNR: infinite entries are left out unless every entry is infinite.
pub fn mean_psnr(values: &[f64]) -> f64 {
    let finite: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
    if finite.is_empty() {
        if values.is_empty() {
            f64::NAN
        } else {
            f64::INFINITY
        }
    } else {
        finite.iter().sum::<f64>() / finite.len() as f64
    }
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

impl EvalReport {
    pub fn from_scores(per_frame: Vec<FrameScore>) -> Self {
        let p: Vec<f64> = per_frame.iter().map(|s| s.psnr).collect();
        let s: Vec<f64> = per_frame.iter().map(|s| s.ssim).collect();
        Self {
            mean_psnr: mean_psnr(&p),
            mean_ssim: mean(&s),
            per_frame,
        }
    }
}

pub fn evaluate_clip(pred: &FrameSequence, gt: &FrameSequence) -> Result<EvalReport> {
    if pred.len() != gt.len() {
        return Err(Error::Value(format!(
            "clip {}: {} predicted frames vs {} ground-truth frames",
            gt.clip_id,
            pred.len(),
            gt.len()
        )));
    }
    let mut scores = Vec::with_capacity(gt.len());
    for (i, (p, g)) in pred.frames().iter().zip(gt.frames()).enumerate() {
        scores.push(FrameScore {
            index: i,
            name: gt.names()[i].clone(),
            psnr: psnr(p, g)?,
            ssim: ssim(p, g)?,
        });
    }
    Ok(EvalReport::from_scores(scores))
}

fn fmt_num(v: f64) -> String {
    if v == f64::INFINITY {
        "inf".to_string()
    } else {
        format!("{v}")
    }
}

fn json_num(v: f64) -> Value {
    if v.is_finite() {
        json!(v)
    } else {
        json!(fmt_num(v))
    }
}

#[derive(Serialize)]
struct CsvRow<'a> {
    clip: &'a str,
    frame: &'a str,
    psnr: String,
    ssim: String,
}

/// One CSV row per frame (`clip,frame,psnr,ssim`); `+∞` is written as `inf`.
pub fn write_csv(path: &Path, reports: &[(String, EvalReport)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    for (clip, r) in reports {
        for s in &r.per_frame {
            w.serialize(CsvRow {
                clip,
                frame: &s.name,
                psnr: fmt_num(s.psnr),
                ssim: fmt_num(s.ssim),
            })
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Per-clip means plus the mean over every frame of every clip.
pub fn summary_json(reports: &[(String, EvalReport)]) -> Value {
    let all: Vec<FrameScore> = reports.iter().flat_map(|(_, r)| r.per_frame.clone()).collect();
    let overall = EvalReport::from_scores(all);
    let clips: Vec<Value> = reports
        .iter()
        .map(|(clip, r)| {
            json!({
                "clip": clip,
                "frames": r.per_frame.len(),
                "mean_psnr": json_num(r.mean_psnr),
                "mean_ssim": json_num(r.mean_ssim),
            })
        })
        .collect();
    json!({
        "frames": overall.per_frame.len(),
        "mean_psnr": json_num(overall.mean_psnr),
        "mean_ssim": json_num(overall.mean_ssim),
        "clips": clips,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_offset_gives_20_db() {
        let a = Frame::filled(4, 4, 0.2).unwrap();
        let b = Frame::filled(4, 4, 0.3).unwrap();
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
    }

    #[test]
    fn constant_frames_closed_form() {
        let a = Frame::filled(12, 12, 0.0).unwrap();
        let b = Frame::filled(12, 12, 1.0).unwrap();
        let expected = SSIM_C1 / (1.0 + SSIM_C1);
        assert!((ssim(&a, &b).unwrap() - expected).abs() < 1e-12);
        assert!(expected < 0.01);
    }

    #[test]
    fn too_small_for_window() {
        let a = Frame::filled(10, 20, 0.5).unwrap();
        assert_eq!(ssim(&a, &a).err().unwrap().category(), "dimension");
    }

    #[test]
    fn infinite_psnr_excluded_from_mean_unless_all() {
        assert_eq!(mean_psnr(&[f64::INFINITY, 30.0, 20.0]), 25.0);
        assert_eq!(mean_psnr(&[f64::INFINITY, f64::INFINITY]), f64::INFINITY);
    }

    #[test]
    fn infinity_serialized_as_string() {
        let r = EvalReport::from_scores(vec![FrameScore {
            index: 0,
            name: "0.png".into(),
            psnr: f64::INFINITY,
            ssim: 1.0,
        }]);
        let v = summary_json(&[("c".into(), r)]);
        assert_eq!(v["mean_psnr"], json!("inf"));
        assert_eq!(v["mean_ssim"], json!(1.0));
    }
}
