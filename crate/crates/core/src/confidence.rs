//! Cross-view confidence masks.
//!
//! A pixel of view `i` is trusted when its aligned relative depth, lifted to
//! 3D and reprojected into a second view `l`, lands at a depth that agrees
//! with what the radiance field renders at that pixel of `l`, within `tau`.
//! Masks are a pure function of depth and geometry.

use std::path::Path;

use rayon::prelude::*;

use crate::align::fit_scale_shift;
use crate::camera::{pixel_center, reproject, Intrinsics, Pose, RelativePose};
use crate::dataset::{write_pbm, DatasetError};
use crate::maps::DepthMap;

#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceMask {
    pub width: usize,
    pub height: usize,
    pub values: Vec<bool>,
    pub source_view: Option<u32>,
    pub target_view: Option<u32>,
    /// Why the mask is empty, when construction could not proceed.
    pub diagnostic: Option<String>,
}

impl ConfidenceMask {
    pub fn all(width: usize, height: usize, value: bool) -> Self {
        Self {
            width,
            height,
            values: vec![value; width * height],
            source_view: None,
            target_view: None,
            diagnostic: None,
        }
    }

    pub fn with_views(mut self, source: u32, target: u32) -> Self {
        self.source_view = Some(source);
        self.target_view = Some(target);
        self
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.values[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.values.iter().filter(|&&v| v).count()
    }

    /// Fraction of true entries.
    pub fn coverage(&self) -> f64 {
        if self.values.is_empty() {
            0.0
        } else {
            self.count() as f64 / self.values.len() as f64
        }
    }

    pub fn is_subset_of(&self, other: &ConfidenceMask) -> bool {
        self.values.iter().zip(&other.values).all(|(a, b)| !a || *b)
    }

    pub fn write_pbm(&self, path: &Path) -> Result<(), DatasetError> {
        write_pbm(path, self.width, self.height, &self.values)
    }
}

/// Scene-scale default threshold: 5% of the bounding-box diagonal.
pub fn default_tau(scene_diagonal: f64) -> f64 {
    0.05 * scene_diagonal
}

/// Mask for view `i` checked against view `l`.
///
/// `d_star_i` is aligned to `d_bar_i` with one image-level least-squares
/// fit; each aligned pixel is reprojected through `rel` (i → l) and accepted
/// when the reprojected depth is within `tau` of `d_bar_l` at the nearest
/// pixel. Invalid pixels in any input are rejected.
pub fn build_mask_seen(
    d_star_i: &DepthMap,
    d_bar_i: &DepthMap,
    d_bar_l: &DepthMap,
    intrinsics: &Intrinsics,
    rel: &RelativePose,
    tau: f64,
) -> ConfidenceMask {
    assert!(tau > 0.0, "tau must be positive");
    let (w, h) = (d_star_i.width, d_star_i.height);
    assert!(d_star_i.same_shape(d_bar_i), "source maps disagree in shape");
    let mut mask = ConfidenceMask::all(w, h, false);
    let fit_mask: Vec<bool> = d_star_i
        .validity
        .iter()
        .zip(&d_bar_i.validity)
        .map(|(a, b)| *a && *b)
        .collect();
    let fit = match fit_scale_shift(&d_star_i.values, &d_bar_i.values, &fit_mask) {
        Ok(f) => f,
        Err(e) => {
            mask.diagnostic = Some(format!("image-level alignment failed: {e}"));
            return mask;
        }
    };
    mask.values = (0..w * h)
        .into_par_iter()
        .map(|i| {
            if !fit_mask[i] {
                return false;
            }
            let a = fit.apply(d_star_i.values[i]);
            let r = reproject(pixel_center(i % w, i / w), a, intrinsics, rel);
            match r.nearest(d_bar_l.width, d_bar_l.height) {
                Some((x, y)) => d_bar_l
                    .get(x, y)
                    .is_some_and(|d| (r.depth - d).abs() < tau),
                None => false,
            }
        })
        .collect();
    mask
}

/// A seen view available as a reprojection target.
#[derive(Debug, Clone, Copy)]
pub struct SeenView<'a> {
    pub view_id: u32,
    pub pose: &'a Pose,
    /// Rendered depth at the seen view.
    pub d_bar: &'a DepthMap,
}

/// Index of the seen view closest to `pose`: translation distance first,
/// rotation angle as the tie-breaker.
pub fn nearest_view(pose: &Pose, seen: &[SeenView]) -> Option<usize> {
    seen.iter()
        .enumerate()
        .map(|(i, v)| (i, pose.distance(v.pose)))
        .min_by(|a, b| a.1 .0.total_cmp(&b.1 .0).then(a.1 .1.total_cmp(&b.1 .1)))
        .map(|(i, _)| i)
}

/// Mask for an unseen view `l`, checked against its single nearest seen
/// view.
pub fn build_mask_unseen(
    d_star_l: &DepthMap,
    d_bar_l: &DepthMap,
    intrinsics: &Intrinsics,
    pose_l: &Pose,
    seen: &[SeenView],
    tau: f64,
) -> ConfidenceMask {
    let Some(j) = nearest_view(pose_l, seen) else {
        let mut m = ConfidenceMask::all(d_star_l.width, d_star_l.height, false);
        m.diagnostic = Some("no seen view to compare against".into());
        return m;
    };
    let target = &seen[j];
    let rel = pose_l.relative_to(target.pose);
    let mut m = build_mask_seen(d_star_l, d_bar_l, target.d_bar, intrinsics, &rel, tau);
    m.target_view = Some(target.view_id);
    m
}
