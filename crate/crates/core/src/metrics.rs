//! Image and depth evaluation metrics.
//!
//! SSIM follows the scikit-image Gaussian-window convention: σ = 1.5,
//! 11 taps, symmetric (half-sample) boundary reflection, population
//! covariances, `C1 = 0.01²`, `C2 = 0.03²`, data range 1, and a border of 5
//! pixels excluded from the mean. Color images average the per-channel
//! scores.

use serde::Serialize;
use thiserror::Error;

use crate::maps::{DepthMap, RgbImage};

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("image sizes differ: {0:?} vs {1:?}")]
    ShapeMismatch((usize, usize), (usize, usize)),
    #[error("view {view}: no pixel is valid in both prediction and ground truth")]
    EmptyOverlap { view: usize },
    #[error("no views given")]
    NoViews,
}

/// `−10·log10(MSE)` over all pixels and channels; `+∞` for identical
/// images.
pub fn psnr(a: &RgbImage, b: &RgbImage) -> Result<f64, MetricsError> {
    check_shape(a, b)?;
    let mut sum = 0.0;
    for (p, q) in a.pixels.iter().zip(&b.pixels) {
        for c in 0..3 {
            sum += (p[c] - q[c]).powi(2);
        }
    }
    let mse = sum / (3 * a.pixels.len()) as f64;
    Ok(if mse == 0.0 { f64::INFINITY } else { -10.0 * mse.log10() })
}

fn check_shape(a: &RgbImage, b: &RgbImage) -> Result<(), MetricsError> {
    if a.width != b.width || a.height != b.height {
        return Err(MetricsError::ShapeMismatch((a.width, a.height), (b.width, b.height)));
    }
    Ok(())
}

const SSIM_SIGMA: f64 = 1.5;
const SSIM_RADIUS: usize = 5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn gaussian_taps() -> [f64; 2 * SSIM_RADIUS + 1] {
    let mut k = [0.0; 2 * SSIM_RADIUS + 1];
    for (i, v) in k.iter_mut().enumerate() {
        let x = i as f64 - SSIM_RADIUS as f64;
        *v = (-0.5 * x * x / (SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.map(|v| v / s)
}

/// Index into `[0, n)` under half-sample symmetric extension.
#[inline]
fn reflect(i: isize, n: usize) -> usize {
    let p = 2 * n as isize;
    let m = i.rem_euclid(p);
    (if m >= n as isize { p - 1 - m } else { m }) as usize
}

fn blur(src: &[f64], w: usize, h: usize, taps: &[f64]) -> Vec<f64> {
    let r = SSIM_RADIUS as isize;
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, t) in taps.iter().enumerate() {
                acc += t * src[y * w + reflect(x as isize + k as isize - r, w)];
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, t) in taps.iter().enumerate() {
                acc += t * tmp[reflect(y as isize + k as isize - r, h) * w + x];
            }
            out[y * w + x] = acc;
        }
    }
    out
}

/// Mean SSIM of two single-channel images.
pub fn ssim_gray(a: &[f64], b: &[f64], width: usize, height: usize) -> f64 {
    assert_eq!(a.len(), width * height);
    assert_eq!(b.len(), width * height);
    let taps = gaussian_taps();
    let prod = |f: &dyn Fn(usize) -> f64| -> Vec<f64> { (0..a.len()).map(f).collect() };
    let mu_a = blur(a, width, height, &taps);
    let mu_b = blur(b, width, height, &taps);
    let aa = blur(&prod(&|i| a[i] * a[i]), width, height, &taps);
    let bb = blur(&prod(&|i| b[i] * b[i]), width, height, &taps);
    let ab = blur(&prod(&|i| a[i] * b[i]), width, height, &taps);
    // Images narrower than the window keep every pixel along that axis.
    let crop = |n: usize| if n > 2 * SSIM_RADIUS { SSIM_RADIUS } else { 0 };
    let (cx, cy) = (crop(width), crop(height));
    let mut sum = 0.0;
    let mut count = 0usize;
    for y in cy..height - cy {
        for x in cx..width - cx {
            let i = y * width + x;
            let (ua, ub) = (mu_a[i], mu_b[i]);
            let va = aa[i] - ua * ua;
            let vb = bb[i] - ub * ub;
            let cov = ab[i] - ua * ub;
            sum += ((2.0 * ua * ub + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((ua * ua + ub * ub + SSIM_C1) * (va + vb + SSIM_C2));
            count += 1;
        }
    }
    sum / count as f64
}

pub fn ssim(a: &RgbImage, b: &RgbImage) -> Result<f64, MetricsError> {
    check_shape(a, b)?;
    let mut total = 0.0;
    for c in 0..3 {
        let ca: Vec<f64> = a.pixels.iter().map(|p| p[c]).collect();
        let cb: Vec<f64> = b.pixels.iter().map(|p| p[c]).collect();
        total += ssim_gray(&ca, &cb, a.width, a.height);
    }
    Ok(total / 3.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DepthMetricReport {
    pub abs_rel: f64,
    pub sq_rel: f64,
    pub rmse: f64,
    pub rmse_log: f64,
    pub scale_factor_s: f64,
    pub n_pixels: usize,
    /// Pixels left out of `rmse_log` because a value was not positive.
    pub log_excluded: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MedianScale {
    pub s: f64,
    /// Valid pixels skipped because the prediction was not positive.
    pub excluded: usize,
}

fn median(v: &mut [f64]) -> f64 {
    let n = v.len();
    let mid = n / 2;
    let (_, &mut upper, _) = v.select_nth_unstable_by(mid, f64::total_cmp);
    if n % 2 == 1 {
        upper
    } else {
        let lower = v[..mid].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        0.5 * (lower + upper)
    }
}

fn overlap<'a>(pred: &'a DepthMap, gt: &'a DepthMap) -> impl Iterator<Item = (f64, f64)> + 'a {
    (0..gt.values.len())
        .filter(|&i| pred.validity[i] && gt.validity[i] && gt.values[i] > 0.0)
        .map(|i| (pred.values[i], gt.values[i]))
}

/// One scale per scene: the mean over views of each view's median
/// `gt / pred` ratio.
pub fn median_scale(preds: &[DepthMap], gts: &[DepthMap]) -> Result<MedianScale, MetricsError> {
    if preds.is_empty() {
        return Err(MetricsError::NoViews);
    }
    assert_eq!(preds.len(), gts.len(), "one prediction per ground-truth view");
    let mut excluded = 0;
    let mut total = 0.0;
    for (view, (p, g)) in preds.iter().zip(gts).enumerate() {
        let mut ratios = Vec::new();
        for (pv, gv) in overlap(p, g) {
            if pv > 0.0 {
                ratios.push(gv / pv);
            } else {
                excluded += 1;
            }
        }
        if ratios.is_empty() {
            return Err(MetricsError::EmptyOverlap { view });
        }
        total += median(&mut ratios);
    }
    Ok(MedianScale {
        s: total / preds.len() as f64,
        excluded,
    })
}

/// The four depth metrics over pixels valid in both maps, pooled across
/// views. Predictions are multiplied by `scale` first.
pub fn depth_metrics(preds: &[DepthMap], gts: &[DepthMap], scale: f64) -> Result<DepthMetricReport, MetricsError> {
    if preds.is_empty() {
        return Err(MetricsError::NoViews);
    }
    assert_eq!(preds.len(), gts.len(), "one prediction per ground-truth view");
    let (mut abs_rel, mut sq_rel, mut se, mut se_log) = (0.0, 0.0, 0.0, 0.0);
    let (mut n, mut n_log, mut log_excluded) = (0usize, 0usize, 0usize);
    for (view, (p, g)) in preds.iter().zip(gts).enumerate() {
        let before = n;
        for (pv, gv) in overlap(p, g) {
            let d = scale * pv;
            let e = d - gv;
            abs_rel += e.abs() / gv;
            sq_rel += e * e / gv;
            se += e * e;
            n += 1;
            if d > 0.0 {
                se_log += (d.ln() - gv.ln()).powi(2);
                n_log += 1;
            } else {
                log_excluded += 1;
            }
        }
        if n == before {
            return Err(MetricsError::EmptyOverlap { view });
        }
    }
    let nf = n as f64;
    Ok(DepthMetricReport {
        abs_rel: abs_rel / nf,
        sq_rel: sq_rel / nf,
        rmse: (se / nf).sqrt(),
        rmse_log: if n_log > 0 { (se_log / n_log as f64).sqrt() } else { f64::NAN },
        scale_factor_s: scale,
        n_pixels: n,
        log_excluded,
    })
}

/// Median-scale the predictions, then compute the depth metrics.
pub fn scene_depth_metrics(preds: &[DepthMap], gts: &[DepthMap]) -> Result<DepthMetricReport, MetricsError> {
    let s = median_scale(preds, gts)?;
    depth_metrics(preds, gts, s.s)
}
