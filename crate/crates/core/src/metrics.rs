//! Band-averaged PSNR and SSIM and the mean spectral angle, for cubes on a
//! `[0, 1]` scale with peak 1.

use std::fmt::{self, Display};

use crate::error::{bail, Result};
use crate::hsidata::HsiCube;
use crate::kv::KvText;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

/// Mean over bands of `10 log10(1 / MSE_b)`. A band with zero error has
/// infinite PSNR, so identical cubes give `f64::INFINITY`.
pub fn mpsnr(pred: &HsiCube, gt: &HsiCube) -> Result<f64> {
    pred.expect_same_dims(gt)?;
    let total: f64 = (0..gt.bands())
        .map(|s| {
            let mse = pred.band(s).iter().zip(gt.band(s)).map(|(&p, &g)| (p as f64 - g as f64).powi(2)).sum::<f64>()
                / gt.band(s).len() as f64;
            -10.0 * mse.log10()
        })
        .sum();
    Ok(total / gt.bands() as f64)
}

/// Normalized 1-D Gaussian taps; the 2-D window is their outer product.
pub fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let raw: Vec<f64> = (0..size).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = raw.iter().sum();
    raw.iter().map(|v| v / total).collect()
}

/// Mean over bands of SSIM, each band averaged over all fully contained
/// windows.
pub fn mssim(pred: &HsiCube, gt: &HsiCube) -> Result<f64> {
    pred.expect_same_dims(gt)?;
    let [s, h, w] = gt.dims();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        bail!(Geometry, "SSIM needs bands of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}");
    }
    let taps = gaussian_taps(SSIM_WINDOW, SSIM_SIGMA);
    let total: f64 = (0..s).map(|b| ssim_band(pred.band(b), gt.band(b), h, w, &taps)).sum();
    Ok(total / s as f64)
}

fn ssim_band(x: &[f32], y: &[f32], h: usize, w: usize, taps: &[f64]) -> f64 {
    if x == y {
        return 1.0;
    }
    let to64 = |v: &[f32]| v.iter().map(|&a| a as f64).collect::<Vec<_>>();
    let (x, y) = (to64(x), to64(y));
    let prod = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).collect::<Vec<_>>();
    let mx = filter_valid(&x, h, w, taps);
    let my = filter_valid(&y, h, w, taps);
    let sxx = filter_valid(&prod(&x, &x), h, w, taps);
    let syy = filter_valid(&prod(&y, &y), h, w, taps);
    let sxy = filter_valid(&prod(&x, &y), h, w, taps);
    let n = mx.len();
    let mut acc = 0.0;
    for i in 0..n {
        let (ux, uy) = (mx[i], my[i]);
        let vx = sxx[i] - ux * ux;
        let vy = syy[i] - uy * uy;
        let cxy = sxy[i] - ux * uy;
        acc += ((2.0 * ux * uy + SSIM_C1) * (2.0 * cxy + SSIM_C2))
            / ((ux * ux + uy * uy + SSIM_C1) * (vx + vy + SSIM_C2));
    }
    acc / n as f64
}

/// Separable valid-mode filtering with a symmetric window.
fn filter_valid(img: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = taps.iter().enumerate().map(|(t, &c)| c * img[y * w + x + t]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = taps.iter().enumerate().map(|(t, &c)| c * rows[(y + t) * ow + x]).sum();
        }
    }
    out
}

/// Mean spectral angle in radians over pixels where both spectra are
/// non-zero, and how many pixels were skipped.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SamResult {
    pub mean: f64,
    pub skipped: usize,
}

pub fn sam(pred: &HsiCube, gt: &HsiCube) -> Result<SamResult> {
    pred.expect_same_dims(gt)?;
    let [s, h, w] = gt.dims();
    let plane = h * w;
    let (mut total, mut counted) = (0.0, 0usize);
    let (mut p, mut g) = (vec![0.0f64; s], vec![0.0f64; s]);
    for i in 0..plane {
        for b in 0..s {
            p[b] = pred.data()[b * plane + i] as f64;
            g[b] = gt.data()[b * plane + i] as f64;
        }
        if let Some(a) = spectral_angle(&p, &g) {
            total += a;
            counted += 1;
        }
    }
    let mean = if counted == 0 { 0.0 } else { total / counted as f64 };
    Ok(SamResult { mean, skipped: plane - counted })
}

/// Angle between two vectors via `2 atan2(|a' - b'|, |a' + b'|)` on the unit
/// vectors, which stays accurate near 0 and pi; `None` if either is zero.
pub fn spectral_angle(a: &[f64], b: &[f64]) -> Option<f64> {
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    let (mut d, mut s) = (0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let (u, v) = (x / na, y / nb);
        d += (u - v) * (u - v);
        s += (u + v) * (u + v);
    }
    Some(2.0 * d.sqrt().atan2(s.sqrt()))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricReport {
    pub mpsnr: f64,
    pub mssim: f64,
    pub sam: f64,
    pub sam_skipped: usize,
}

impl MetricReport {
    pub fn compute(pred: &HsiCube, gt: &HsiCube) -> Result<Self> {
        let s = sam(pred, gt)?;
        Ok(MetricReport { mpsnr: mpsnr(pred, gt)?, mssim: mssim(pred, gt)?, sam: s.mean, sam_skipped: s.skipped })
    }

    pub fn to_kv(&self) -> KvText {
        let mut kv = KvText::new();
        kv.set("psnr", fmt_sig(self.mpsnr));
        kv.set("ssim", fmt_unit(self.mssim));
        kv.set("sam", fmt_unit(self.sam));
        kv.set("sam_skipped", self.sam_skipped);
        kv
    }

    pub const CSV_HEADER: &'static str = "psnr,ssim,sam,sam_skipped";

    pub fn csv_row(&self) -> String {
        format!("{},{},{},{}", fmt_sig(self.mpsnr), fmt_unit(self.mssim), fmt_unit(self.sam), self.sam_skipped)
    }
}

impl Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.to_kv())
    }
}

/// Four significant digits, `inf` for the infinite sentinel.
pub fn fmt_sig(v: f64) -> String {
    fmt_digits(v, 0)
}

/// Four significant digits but at least four decimals, for values on a unit
/// scale (`1.0000`, `0.0000`, `0.04567`).
pub fn fmt_unit(v: f64) -> String {
    fmt_digits(v, 4)
}

fn fmt_digits(v: f64, min_decimals: usize) -> String {
    if v.is_infinite() {
        return if v > 0.0 { "inf".into() } else { "-inf".into() };
    }
    let digits = if v == 0.0 { 0 } else { v.abs().log10().floor() as i32 };
    let decimals = ((3 - digits).max(0) as usize).max(min_decimals);
    format!("{v:.decimals$}")
}
