//! Image quality metrics on `[0, 1]` data and the report that aggregates them.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Reported PSNR when the two images are identical.
pub const PSNR_CAP: f64 = 99.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

fn clamped_pair<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<(Vec<f64>, Vec<f64>)> {
    if a.shape() != b.shape() {
        return Err(Error::shape("metric", format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    if a.numel() == 0 {
        return Err(Error::shape("metric", "empty images"));
    }
    let c = |t: &Tensor<T>| t.data().iter().map(|v| v.as_f64().clamp(0.0, 1.0)).collect();
    Ok((c(a), c(b)))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Psnr {
    pub db: f64,
    /// The images were identical and `db` is [`PSNR_CAP`].
    pub capped: bool,
}

/// `10 log10(peak^2 / MSE)` after clamping both images to `[0, 1]`.
pub fn psnr<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, peak: f64) -> Result<Psnr> {
    let (x, y) = clamped_pair(a, b)?;
    let mse = x.iter().zip(&y).map(|(p, q)| (p - q) * (p - q)).sum::<f64>() / x.len() as f64;
    Ok(if mse == 0.0 {
        Psnr { db: PSNR_CAP, capped: true }
    } else {
        Psnr { db: (10.0 * (peak * peak / mse).log10()).min(PSNR_CAP), capped: false }
    })
}

/// `(RMSE, MAE)` computed on `[0, 1]` data and multiplied by 255.
pub fn rmse_mae_255<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<(f64, f64)> {
    let (x, y) = clamped_pair(a, b)?;
    let n = x.len() as f64;
    let (mut se, mut ae) = (0.0, 0.0);
    for (p, q) in x.iter().zip(&y) {
        se += (p - q) * (p - q);
        ae += (p - q).abs();
    }
    Ok(((se / n).sqrt() * 255.0, ae / n * 255.0))
}

fn gaussian_taps() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> =
        (0..SSIM_WINDOW).map(|i| (-((i as f64 - r).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()).collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Valid-region separable filtering of an `h x w` plane.
fn filter_valid(p: &[f64], h: usize, w: usize, g: &[f64]) -> Vec<f64> {
    let k = g.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut tmp = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            tmp[y * ow + x] = (0..k).map(|i| g[i] * p[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..k).map(|i| g[i] * tmp[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean structural similarity over the trailing `H x W` planes (Gaussian
/// 11x11 window, sigma 1.5, valid region), averaged across planes.
pub fn ssim<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, peak: f64) -> Result<f64> {
    let (x, y) = clamped_pair(a, b)?;
    let s = a.shape();
    if s.len() < 2 || s[s.len() - 2] < SSIM_WINDOW || s[s.len() - 1] < SSIM_WINDOW {
        return Err(Error::shape("ssim", format!("{s:?} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")));
    }
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    let g = gaussian_taps();
    let c1 = (K1 * peak).powi(2);
    let c2 = (K2 * peak).powi(2);
    let planes = x.len() / (h * w);
    let mut total = 0.0;
    for p in 0..planes {
        let xp = &x[p * h * w..(p + 1) * h * w];
        let yp = &y[p * h * w..(p + 1) * h * w];
        let prod = |f: &dyn Fn(usize) -> f64| (0..h * w).map(f).collect::<Vec<f64>>();
        let mx = filter_valid(xp, h, w, &g);
        let my = filter_valid(yp, h, w, &g);
        let sxx = filter_valid(&prod(&|i| xp[i] * xp[i]), h, w, &g);
        let syy = filter_valid(&prod(&|i| yp[i] * yp[i]), h, w, &g);
        let sxy = filter_valid(&prod(&|i| xp[i] * yp[i]), h, w, &g);
        let mut acc = 0.0;
        for i in 0..mx.len() {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cov = sxy[i] - ux * uy;
            acc += ((2.0 * ux * uy + c1) * (2.0 * cov + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
        }
        total += acc / mx.len() as f64;
    }
    Ok(total / planes as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleMetrics {
    pub id: String,
    pub psnr: f64,
    pub psnr_capped: bool,
    pub ssim: f64,
    pub rmse_255: f64,
    pub mae_255: f64,
}

impl SampleMetrics {
    pub fn compute<T: Scalar>(id: impl Into<String>, pred: &Tensor<T>, target: &Tensor<T>) -> Result<Self> {
        let p = psnr(pred, target, 1.0)?;
        let (rmse_255, mae_255) = rmse_mae_255(pred, target)?;
        Ok(Self { id: id.into(), psnr: p.db, psnr_capped: p.capped, ssim: ssim(pred, target, 1.0)?, rmse_255, mae_255 })
    }
}

/// Per-sample metrics plus their means.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricReport {
    pub label: String,
    pub samples: Vec<SampleMetrics>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MeanMetrics {
    pub psnr: f64,
    pub ssim: f64,
    pub rmse_255: f64,
    pub mae_255: f64,
}

impl MetricReport {
    pub fn new(label: impl Into<String>) -> Self {
        Self { label: label.into(), samples: Vec::new() }
    }

    pub fn mean(&self) -> MeanMetrics {
        let n = self.samples.len().max(1) as f64;
        let avg = |f: fn(&SampleMetrics) -> f64| self.samples.iter().map(f).sum::<f64>() / n;
        MeanMetrics {
            psnr: avg(|s| s.psnr),
            ssim: avg(|s| s.ssim),
            rmse_255: avg(|s| s.rmse_255),
            mae_255: avg(|s| s.mae_255),
        }
    }

    /// Aligned text table: one row per sample and a closing mean row.
    pub fn table(&self) -> String {
        let w = self.samples.iter().map(|s| s.id.len()).max().unwrap_or(0).max(6);
        let mut out = String::new();
        if !self.label.is_empty() {
            let _ = writeln!(out, "# {}", self.label);
        }
        let _ = writeln!(out, "{:<w$}  {:>8}  {:>7}  {:>7}  {:>7}", "sample", "PSNR", "SSIM", "RMSE", "MAE");
        for s in &self.samples {
            let mark = if s.psnr_capped { "*" } else { " " };
            let _ = writeln!(
                out,
                "{:<w$}  {:>7.3}{mark}  {:>7.4}  {:>7.3}  {:>7.3}",
                s.id, s.psnr, s.ssim, s.rmse_255, s.mae_255
            );
        }
        let m = self.mean();
        let _ =
            writeln!(out, "{:<w$}  {:>7.3}   {:>7.4}  {:>7.3}  {:>7.3}", "mean", m.psnr, m.ssim, m.rmse_255, m.mae_255);
        if self.samples.iter().any(|s| s.psnr_capped) {
            let _ = writeln!(out, "* identical images, PSNR capped at {PSNR_CAP} dB");
        }
        out
    }

    pub fn csv(&self) -> String {
        let mut out = String::from("sample,psnr,psnr_capped,ssim,rmse_255,mae_255\n");
        for s in &self.samples {
            let _ =
                writeln!(out, "{},{:?},{},{:?},{:?},{:?}", s.id, s.psnr, s.psnr_capped, s.ssim, s.rmse_255, s.mae_255);
        }
        let m = self.mean();
        let _ = writeln!(out, "mean,{:?},,{:?},{:?},{:?}", m.psnr, m.ssim, m.rmse_255, m.mae_255);
        out
    }
}
