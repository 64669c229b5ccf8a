//! Scale-shift alignment of relative depth and the depth distillation losses.
//!
//! Every loss fits `(w, q)` in closed form on the current values and treats
//! the fit as a constant: gradients never flow through `(w, q)`, and each
//! loss differentiates exactly one of its depth operands. All losses are L1
//! sums; the subgradient of `|0|` is taken as 0.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::confidence::ConfidenceMask;
use crate::maps::DepthMap;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AlignError {
    #[error("degenerate scale-shift fit over {valid_pixels} pixel(s){}", patch.map(|p| format!(" in patch {p:?}")).unwrap_or_default())]
    DegenerateFit {
        valid_pixels: usize,
        patch: Option<PatchSpec>,
    },
    #[error("patch {patch:?} does not fit a {width}x{height} image")]
    PatchOutOfBounds {
        patch: PatchSpec,
        width: usize,
        height: usize,
    },
    #[error("map dimensions disagree")]
    ShapeMismatch,
}

/// A strided rectangular pixel lattice: `origin + stride·(col, row)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PatchSpec {
    /// Top-left pixel `(x, y)`.
    pub origin: (usize, usize),
    /// `(rows, cols)`.
    pub size: (usize, usize),
    pub stride: usize,
}

impl PatchSpec {
    pub fn new(origin: (usize, usize), size: (usize, usize), stride: usize) -> Self {
        assert!(stride > 0 && size.0 > 0 && size.1 > 0, "empty patch");
        Self {
            origin,
            size,
            stride,
        }
    }

    pub fn whole_image(width: usize, height: usize) -> Self {
        Self::new((0, 0), (height, width), 1)
    }

    pub fn len(&self) -> usize {
        self.size.0 * self.size.1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Pixel extent `(width, height)` covered by the lattice.
    pub fn footprint(&self) -> (usize, usize) {
        (
            (self.size.1 - 1) * self.stride + 1,
            (self.size.0 - 1) * self.stride + 1,
        )
    }

    pub fn fits(&self, width: usize, height: usize) -> bool {
        let (fw, fh) = self.footprint();
        self.origin.0 + fw <= width && self.origin.1 + fh <= height
    }

    pub fn check(&self, width: usize, height: usize) -> Result<(), AlignError> {
        if self.fits(width, height) {
            Ok(())
        } else {
            Err(AlignError::PatchOutOfBounds {
                patch: *self,
                width,
                height,
            })
        }
    }

    /// Lattice pixels in row-major order.
    pub fn pixels(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let (rows, cols) = self.size;
        (0..rows).flat_map(move |r| {
            (0..cols).map(move |c| {
                (
                    self.origin.0 + c * self.stride,
                    self.origin.1 + r * self.stride,
                )
            })
        })
    }

    /// Non-overlapping tiling of an image with `size × size` patches; the
    /// last row/column of tiles is shifted inward to stay in bounds.
    pub fn tiles(width: usize, height: usize, size: usize) -> Vec<PatchSpec> {
        let starts = |extent: usize| -> Vec<usize> {
            let s = size.min(extent);
            let mut v: Vec<usize> = (0..extent.div_ceil(s)).map(|i| (i * s).min(extent - s)).collect();
            v.dedup();
            v
        };
        let (sw, sh) = (size.min(width), size.min(height));
        let mut out = Vec::new();
        for y in starts(height) {
            for x in starts(width) {
                out.push(PatchSpec::new((x, y), (sh, sw), 1));
            }
        }
        out
    }
}

/// `(w, q)` with `aligned = w·source + q`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScaleShift {
    pub w: f64,
    pub q: f64,
}

impl ScaleShift {
    pub const IDENTITY: ScaleShift = ScaleShift { w: 1.0, q: 0.0 };

    #[inline]
    pub fn apply(&self, d: f64) -> f64 {
        self.w * d + self.q
    }

    /// A negative scale flips depth ordering.
    pub fn is_inverted(&self) -> bool {
        self.w < 0.0
    }
}

/// Closed-form least-squares `(w, q)` minimizing
/// `Σ_mask (w·source + q − target)²`.
pub fn fit_scale_shift(
    source: &[f64],
    target: &[f64],
    mask: &[bool],
) -> Result<ScaleShift, AlignError> {
    assert_eq!(source.len(), target.len());
    assert_eq!(source.len(), mask.len());
    let mut n = 0usize;
    let (mut ss, mut st) = (0.0, 0.0);
    for i in 0..source.len() {
        if mask[i] {
            n += 1;
            ss += source[i];
            st += target[i];
        }
    }
    let degenerate = AlignError::DegenerateFit {
        valid_pixels: n,
        patch: None,
    };
    if n < 2 {
        return Err(degenerate);
    }
    let nf = n as f64;
    let (ms, mt) = (ss / nf, st / nf);
    // Centered normal equations.
    let (mut sxx, mut sxy, mut s2) = (0.0, 0.0, 0.0);
    for i in 0..source.len() {
        if mask[i] {
            let ds = source[i] - ms;
            sxx += ds * ds;
            sxy += ds * (target[i] - mt);
            s2 += source[i] * source[i];
        }
    }
    if !(sxx > 1e-14 * s2.max(f64::MIN_POSITIVE)) || !sxx.is_finite() {
        return Err(degenerate);
    }
    let w = sxy / sxx;
    Ok(ScaleShift { w, q: mt - w * ms })
}

#[inline]
fn sign0(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Σ_mask |fit(source) − target| and its gradient with respect to `target`.
pub fn masked_l1(source: &[f64], target: &[f64], mask: &[bool], fit: ScaleShift) -> (f64, Vec<f64>) {
    let mut value = 0.0;
    let grad = (0..source.len())
        .map(|i| {
            if !mask[i] {
                return 0.0;
            }
            let r = fit.apply(source[i]) - target[i];
            value += r.abs();
            -sign0(r)
        })
        .collect();
    (value, grad)
}

/// One loss evaluated on a patch.
#[derive(Debug, Clone, PartialEq)]
pub struct LossTerm {
    pub value: f64,
    /// Gradient with respect to the differentiable operand, per patch pixel.
    pub grad: Vec<f64>,
    pub fit: Option<ScaleShift>,
    /// The fit was degenerate and the term contributes nothing.
    pub skipped: bool,
}

impl LossTerm {
    fn skipped(len: usize) -> Self {
        Self {
            value: 0.0,
            grad: vec![0.0; len],
            fit: None,
            skipped: true,
        }
    }
}

/// Distillation of relative depth into rendered depth:
/// `Σ M |(w·sg(d_star) + q) − d_bar|`, gradient into `d_bar` only.
/// Used for both seen views and sampled unseen views.
pub fn distill_loss(d_star: &[f64], d_bar: &[f64], mask: &[bool]) -> LossTerm {
    match fit_scale_shift(d_star, d_bar, mask) {
        Ok(fit) => distill_loss_with_fit(d_star, d_bar, mask, fit),
        Err(_) => LossTerm::skipped(d_star.len()),
    }
}

/// As [`distill_loss`] with an externally supplied alignment.
pub fn distill_loss_with_fit(d_star: &[f64], d_bar: &[f64], mask: &[bool], fit: ScaleShift) -> LossTerm {
    let (value, grad) = masked_l1(d_star, d_bar, mask, fit);
    LossTerm {
        value,
        grad,
        fit: Some(fit),
        skipped: false,
    }
}

/// Provider adaptation toward rendered geometry:
/// `Σ M (|sg(d_bar) − d_star| + |(w·sg(d_bar) + q) − d_star|)` where
/// `(w, q)` fits `d_bar` onto `d_star`. Gradient into `d_star` only.
/// A degenerate fit drops the second term and keeps the first.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptationLoss {
    pub absolute: LossTerm,
    pub scale_shift: LossTerm,
}

impl AdaptationLoss {
    pub fn value(&self) -> f64 {
        self.absolute.value + self.scale_shift.value
    }

    pub fn grad(&self) -> Vec<f64> {
        self.absolute
            .grad
            .iter()
            .zip(&self.scale_shift.grad)
            .map(|(a, b)| a + b)
            .collect()
    }
}

pub fn adaptation_loss(d_bar: &[f64], d_star: &[f64], mask: &[bool]) -> AdaptationLoss {
    let (value, grad) = masked_l1(d_bar, d_star, mask, ScaleShift::IDENTITY);
    let absolute = LossTerm {
        value,
        grad,
        fit: None,
        skipped: false,
    };
    let scale_shift = match fit_scale_shift(d_bar, d_star, mask) {
        Ok(fit) => {
            let (value, grad) = masked_l1(d_bar, d_star, mask, fit);
            LossTerm {
                value,
                grad,
                fit: Some(fit),
                skipped: false,
            }
        }
        Err(_) => LossTerm::skipped(d_bar.len()),
    };
    AdaptationLoss {
        absolute,
        scale_shift,
    }
}

/// Keeps the provider within the affine family of its initial prediction:
/// `Σ |(w·sg(d_init) + q) − d_star|`, `(w, q)` fitting `d_init` onto
/// `d_star`; gradient into `d_star` only.
pub fn regularization_loss(d_init: &[f64], d_star: &[f64], mask: &[bool]) -> LossTerm {
    match fit_scale_shift(d_init, d_star, mask) {
        Ok(fit) => {
            let (value, grad) = masked_l1(d_init, d_star, mask, fit);
            LossTerm {
                value,
                grad,
                fit: Some(fit),
                skipped: false,
            }
        }
        Err(_) => LossTerm::skipped(d_init.len()),
    }
}

/// Values and validity of `map` over the patch lattice.
pub fn gather(map: &DepthMap, patch: &PatchSpec) -> Result<(Vec<f64>, Vec<bool>), AlignError> {
    patch.check(map.width, map.height)?;
    Ok(patch
        .pixels()
        .map(|(x, y)| {
            let i = map.index(x, y);
            (map.values[i], map.validity[i])
        })
        .unzip())
}

fn gather_pair(
    a: &DepthMap,
    b: &DepthMap,
    patch: &PatchSpec,
    mask: Option<&ConfidenceMask>,
) -> Result<(Vec<f64>, Vec<f64>, Vec<bool>), AlignError> {
    if !a.same_shape(b) || mask.is_some_and(|m| m.width != a.width || m.height != a.height) {
        return Err(AlignError::ShapeMismatch);
    }
    let (va, ma) = gather(a, patch)?;
    let (vb, mb) = gather(b, patch)?;
    let m = patch
        .pixels()
        .zip(ma.iter().zip(&mb))
        .map(|((x, y), (&oa, &ob))| oa && ob && mask.is_none_or(|m| m.get(x, y)))
        .collect();
    Ok((va, vb, m))
}

/// Seen-view distillation on a patch of full maps.
pub fn loss_seen(
    d_star: &DepthMap,
    d_bar: &DepthMap,
    patch: &PatchSpec,
    mask: &ConfidenceMask,
) -> Result<LossTerm, AlignError> {
    let (s, b, m) = gather_pair(d_star, d_bar, patch, Some(mask))?;
    Ok(distill_loss(&s, &b, &m))
}

/// Unseen-view distillation; `d_star_of_render` is the provider's output on
/// the rendered image.
pub fn loss_unseen(
    d_star_of_render: &DepthMap,
    d_bar: &DepthMap,
    patch: &PatchSpec,
    mask: &ConfidenceMask,
) -> Result<LossTerm, AlignError> {
    loss_seen(d_star_of_render, d_bar, patch, mask)
}

pub fn loss_mde(
    d_bar: &DepthMap,
    d_star: &DepthMap,
    patch: &PatchSpec,
    mask: &ConfidenceMask,
) -> Result<AdaptationLoss, AlignError> {
    let (b, s, m) = gather_pair(d_bar, d_star, patch, Some(mask))?;
    Ok(adaptation_loss(&b, &s, &m))
}

pub fn loss_reg(d_init: &DepthMap, d_star: &DepthMap, patch: &PatchSpec) -> Result<LossTerm, AlignError> {
    let (i, s, m) = gather_pair(d_init, d_star, patch, None)?;
    Ok(regularization_loss(&i, &s, &m))
}

/// Align `source` to `target` independently on each tile; pixels of
/// degenerate tiles stay invalid.
pub fn align_patchwise(source: &DepthMap, target: &DepthMap, tile: usize) -> Result<DepthMap, AlignError> {
    if !source.same_shape(target) {
        return Err(AlignError::ShapeMismatch);
    }
    let mut out = DepthMap::new(source.width, source.height, target.frame);
    for patch in PatchSpec::tiles(source.width, source.height, tile) {
        let (s, t, m) = gather_pair(source, target, &patch, None)?;
        if let Ok(fit) = fit_scale_shift(&s, &t, &m) {
            for ((x, y), (&v, &ok)) in patch.pixels().zip(s.iter().zip(&m)) {
                if ok {
                    out.set(x, y, fit.apply(v));
                }
            }
        }
    }
    Ok(out)
}

/// Align `source` to `target` with one fit over the whole image.
pub fn align_global(source: &DepthMap, target: &DepthMap) -> Result<DepthMap, AlignError> {
    if !source.same_shape(target) {
        return Err(AlignError::ShapeMismatch);
    }
    let mask: Vec<bool> = source
        .validity
        .iter()
        .zip(&target.validity)
        .map(|(a, b)| *a && *b)
        .collect();
    let fit = fit_scale_shift(&source.values, &target.values, &mask)?;
    let mut out = DepthMap::new(source.width, source.height, target.frame);
    for (i, &ok) in mask.iter().enumerate() {
        if ok {
            out.values[i] = fit.apply(source.values[i]);
            out.validity[i] = true;
        }
    }
    Ok(out)
}

/// Mean |aligned − target| over pixels valid in both.
pub fn mean_abs_error(aligned: &DepthMap, target: &DepthMap) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for i in 0..aligned.values.len() {
        if aligned.validity[i] && target.validity[i] {
            sum += (aligned.values[i] - target.values[i]).abs();
            n += 1;
        }
    }
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}
