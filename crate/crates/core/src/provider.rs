//! A monocular depth provider with controllable failure modes.
//!
//! The provider perceives scene geometry through a backdoor (the true depth
//! seen from the camera), distorts it the way single-image depth networks
//! do, and then applies a trainable low-resolution affine correction. The
//! distortion is frozen; only the correction adapts.
//!
//! Distortions are applied in this order (they do not commute):
//! per-region affine, global affine, convexity warp
//! `d + a·sin(π·d/d_max)`, then Gaussian noise seeded per viewpoint.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camera::{Intrinsics, Pose};
use crate::maps::{DepthFrame, DepthMap, RgbImage};
use crate::optim::{Adam, OptimError};
use crate::scene::{CameraView, Perception, SceneSpec};

#[derive(Debug, Error)]
pub enum ProviderError {
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("initial predictions must be captured before adaptation starts")]
    SnapshotAfterAdaptation,
    #[error("update refused: {0}")]
    Update(#[from] OptimError),
    #[error("{file}: {reason}")]
    Checkpoint { file: String, reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AmbiguityOracleConfig {
    pub global_scale: f64,
    pub global_shift: f64,
    /// `(scale, shift)` per scene primitive; primitives beyond the list are
    /// left undistorted.
    pub region_affines: Vec<(f64, f64)>,
    pub convexity_warp: f64,
    pub depth_max: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl AmbiguityOracleConfig {
    pub fn identity() -> Self {
        Self {
            global_scale: 1.0,
            global_shift: 0.0,
            region_affines: Vec::new(),
            convexity_warp: 0.0,
            depth_max: 1.0,
            noise_sigma: 0.0,
            seed: 0,
        }
    }

    /// Per-instance scale inconsistencies plus a convexity warp and mild
    /// noise, sized for scenes a few units across.
    pub fn ambiguous(seed: u64) -> Self {
        Self {
            global_scale: 0.35,
            global_shift: 0.4,
            region_affines: vec![(1.0, 0.0), (0.75, 0.6), (1.3, -0.5)],
            convexity_warp: 0.25,
            depth_max: 8.0,
            noise_sigma: 0.01,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), ProviderError> {
        let bad = |m: &str| Err(ProviderError::Argument(m.into()));
        if !(self.global_scale > 0.0) {
            return bad("global_scale must be positive");
        }
        if !(self.depth_max > 0.0) {
            return bad("depth_max must be positive");
        }
        if !((self.convexity_warp * std::f64::consts::PI / self.depth_max).abs() < 1.0) {
            return bad("convexity warp is not monotone: need |a·π/d_max| < 1");
        }
        if !(self.noise_sigma >= 0.0) {
            return bad("noise_sigma must be non-negative");
        }
        if self.region_affines.iter().any(|(s, _)| !(*s > 0.0)) {
            return bad("region scales must be positive");
        }
        Ok(())
    }

    /// Output of the global affine at half of `depth_max`: a typical
    /// relative depth.
    pub fn nominal_depth(&self) -> f64 {
        self.global_scale * 0.5 * self.depth_max + self.global_shift
    }

    /// Distorted value of one true depth in region `region`, before noise.
    pub fn distort(&self, depth: f64, region: Option<usize>) -> f64 {
        let (rs, rb) = region
            .and_then(|r| self.region_affines.get(r).copied())
            .unwrap_or((1.0, 0.0));
        let d = rs * depth + rb;
        let d = self.global_scale * d + self.global_shift;
        d + self.convexity_warp * (std::f64::consts::PI * d / self.depth_max).sin()
    }

    /// Distorted relative depth of a whole perception.
    pub fn apply(&self, p: &Perception) -> DepthMap {
        let mut out = DepthMap::new(p.depth.width, p.depth.height, DepthFrame::Relative);
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ p.key.wrapping_mul(0x9e37_79b9_7f4a_7c15));
        let noise = (self.noise_sigma > 0.0).then(|| Normal::new(0.0, self.noise_sigma).expect("sigma validated"));
        for i in 0..out.values.len() {
            // Draw for every pixel so noise is stable under validity changes.
            let n = noise.as_ref().map_or(0.0, |d| d.sample(&mut rng));
            if p.depth.validity[i] {
                out.values[i] = self.distort(p.depth.values[i], p.regions[i]) + n;
                out.validity[i] = true;
            }
        }
        out
    }
}

/// Trainable per-pixel affine correction: a coarse grid of
/// `(log_scale, shift)` nodes, bilinearly interpolated over the image.
/// Scaling is about `pivot`: `out = exp(ls)·(d − pivot) + pivot + shift`.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrectionField {
    /// `(nodes_x, nodes_y)`.
    pub nodes: (usize, usize),
    /// Depth left fixed by a pure scale change. A pivot near typical depths
    /// decouples the scale and shift gradients.
    pub pivot: f64,
    /// `[log_scale, shift]` per node, x-fastest.
    params: Vec<f64>,
}

#[derive(Debug, Clone, Copy)]
struct Bilinear {
    index: [usize; 4],
    weight: [f64; 4],
}

impl CorrectionField {
    pub fn identity(nx: usize, ny: usize) -> Self {
        assert!(nx >= 2 && ny >= 2, "correction grid needs at least 2x2 nodes");
        Self {
            nodes: (nx, ny),
            pivot: 0.0,
            params: vec![0.0; 2 * nx * ny],
        }
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn set_node(&mut self, ix: usize, iy: usize, log_scale: f64, shift: f64) {
        let n = iy * self.nodes.0 + ix;
        self.params[2 * n] = log_scale;
        self.params[2 * n + 1] = shift;
    }

    /// Every node set so that `out = scale·d + shift` everywhere (bilinear
    /// weights sum to one).
    pub fn set_uniform(&mut self, scale: f64, shift: f64) {
        assert!(scale > 0.0, "scale must be positive");
        let sh = shift - self.pivot + scale * self.pivot;
        for n in 0..self.nodes.0 * self.nodes.1 {
            self.params[2 * n] = scale.ln();
            self.params[2 * n + 1] = sh;
        }
    }

    fn bilinear(&self, x: usize, y: usize, width: usize, height: usize) -> Bilinear {
        let (nx, ny) = self.nodes;
        let u = (x as f64 + 0.5) / width as f64 * (nx - 1) as f64;
        let v = (y as f64 + 0.5) / height as f64 * (ny - 1) as f64;
        let (i, j) = ((u as usize).min(nx - 2), (v as usize).min(ny - 2));
        let (fu, fv) = (u - i as f64, v - j as f64);
        let n = j * nx + i;
        Bilinear {
            index: [n, n + 1, n + nx, n + nx + 1],
            weight: [(1.0 - fu) * (1.0 - fv), fu * (1.0 - fv), (1.0 - fu) * fv, fu * fv],
        }
    }

    /// `(scale, shift)` at a pixel.
    pub fn affine_at(&self, x: usize, y: usize, width: usize, height: usize) -> (f64, f64) {
        let b = self.bilinear(x, y, width, height);
        let (mut ls, mut sh) = (0.0, 0.0);
        for k in 0..4 {
            ls += b.weight[k] * self.params[2 * b.index[k]];
            sh += b.weight[k] * self.params[2 * b.index[k] + 1];
        }
        (ls.exp(), sh)
    }

    pub fn apply(&self, base: &DepthMap) -> DepthMap {
        let mut out = base.clone();
        for y in 0..base.height {
            for x in 0..base.width {
                let i = base.index(x, y);
                if base.validity[i] {
                    let (s, b) = self.affine_at(x, y, base.width, base.height);
                    out.values[i] = s * (base.values[i] - self.pivot) + self.pivot + b;
                }
            }
        }
        out
    }

    /// Accumulate `Σ g_p · d(out_p)/d(params)` for pixels `(x, y)` of an
    /// image whose uncorrected depth is `base`.
    pub fn backward(&self, base: &DepthMap, pixels: &[(usize, usize)], grads: &[f64], out: &mut [f64]) {
        assert_eq!(pixels.len(), grads.len());
        assert_eq!(out.len(), self.params.len());
        for (&(x, y), &g) in pixels.iter().zip(grads) {
            let i = base.index(x, y);
            if g == 0.0 || !base.validity[i] {
                continue;
            }
            let b = self.bilinear(x, y, base.width, base.height);
            let (s, _) = self.affine_at(x, y, base.width, base.height);
            let d_ls = g * s * (base.values[i] - self.pivot);
            for k in 0..4 {
                out[2 * b.index[k]] += b.weight[k] * d_ls;
                out[2 * b.index[k] + 1] += b.weight[k] * g;
            }
        }
    }
}

/// Where the provider's backdoor geometry comes from.
pub trait GeometrySource: Sync {
    /// True geometry of a captured view.
    fn seen(&self, view: &CameraView) -> Option<Perception>;
    /// True geometry at an arbitrary camera; `None` if unavailable.
    fn novel(&self, intrinsics: &Intrinsics, pose: &Pose, width: usize, height: usize, key: u64) -> Option<Perception>;
}

impl GeometrySource for SceneSpec {
    fn seen(&self, view: &CameraView) -> Option<Perception> {
        self.perceive(&view.intrinsics, &view.pose, view.width(), view.height(), view.view_id as u64)
            .ok()
    }

    fn novel(&self, intrinsics: &Intrinsics, pose: &Pose, width: usize, height: usize, key: u64) -> Option<Perception> {
        self.perceive(intrinsics, pose, width, height, key).ok()
    }
}

/// Geometry limited to the stored depth of captured views; novel cameras
/// are unavailable.
#[derive(Debug, Clone, Copy, Default)]
pub struct StoredDepth;

impl GeometrySource for StoredDepth {
    fn seen(&self, view: &CameraView) -> Option<Perception> {
        view.gt_depth
            .as_ref()
            .map(|d| Perception::from_depth(d.clone(), view.view_id as u64))
    }

    fn novel(&self, _: &Intrinsics, _: &Pose, _: usize, _: usize, _: u64) -> Option<Perception> {
        None
    }
}

#[derive(Debug, Clone)]
pub struct DepthProvider {
    pub oracle: AmbiguityOracleConfig,
    pub correction: CorrectionField,
    adam: Adam,
    adapted: bool,
}

/// A prediction and the uncorrected map it was built from, needed for
/// gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub depth: DepthMap,
    pub base: DepthMap,
}

pub const DEFAULT_CORRECTION_NODES: usize = 8;

impl DepthProvider {
    pub fn new(oracle: AmbiguityOracleConfig, nodes: (usize, usize)) -> Result<Self, ProviderError> {
        oracle.validate()?;
        let mut correction = CorrectionField::identity(nodes.0, nodes.1);
        correction.pivot = oracle.nominal_depth();
        Ok(Self {
            adam: Adam::new(correction.params.len()),
            oracle,
            correction,
            adapted: false,
        })
    }

    pub fn has_adapted(&self) -> bool {
        self.adapted
    }

    /// Relative depth for `image`. Pixel values are not inspected; geometry
    /// comes from `perception`.
    pub fn predict(&self, image: &RgbImage, perception: &Perception) -> Result<Prediction, ProviderError> {
        let d = &perception.depth;
        if image.width != d.width || image.height != d.height {
            return Err(ProviderError::Argument(format!(
                "image is {}x{} but geometry is {}x{}",
                image.width, image.height, d.width, d.height
            )));
        }
        let base = self.oracle.apply(perception);
        Ok(Prediction {
            depth: self.correction.apply(&base),
            base,
        })
    }

    /// Predictions for every view before any adaptation.
    pub fn snapshot_initial(&self, inputs: &[(&RgbImage, &Perception)]) -> Result<Vec<DepthMap>, ProviderError> {
        if self.adapted {
            return Err(ProviderError::SnapshotAfterAdaptation);
        }
        inputs
            .iter()
            .map(|(img, p)| self.predict(img, p).map(|p| p.depth))
            .collect()
    }

    pub fn adapt_step(&mut self, grads: &[f64], lr: f64) -> Result<(), ProviderError> {
        self.adam.step(&mut self.correction.params, grads, lr)?;
        self.adapted = true;
        Ok(())
    }

    /// `provider.json` (oracle and grid size) plus `provider.bin`
    /// (little-endian float32 correction parameters).
    pub fn save(&self, dir: &Path) -> Result<(), ProviderError> {
        let meta = ProviderMeta {
            oracle: self.oracle.clone(),
            nodes: self.correction.nodes,
        };
        let json = serde_json::to_string_pretty(&meta).expect("serializable");
        let jpath = dir.join("provider.json");
        fs::write(&jpath, json).map_err(|e| ckpt_err(&jpath, e))?;
        let bytes: Vec<u8> = self
            .correction
            .params
            .iter()
            .flat_map(|v| (*v as f32).to_le_bytes())
            .collect();
        let bpath = dir.join("provider.bin");
        fs::write(&bpath, bytes).map_err(|e| ckpt_err(&bpath, e))
    }

    pub fn load(dir: &Path) -> Result<Self, ProviderError> {
        let jpath = dir.join("provider.json");
        let text = fs::read_to_string(&jpath).map_err(|e| ckpt_err(&jpath, e))?;
        let meta: ProviderMeta = serde_json::from_str(&text).map_err(|e| ckpt_err(&jpath, e))?;
        let mut p = Self::new(meta.oracle, meta.nodes)?;
        let bpath = dir.join("provider.bin");
        let bytes = fs::read(&bpath).map_err(|e| ckpt_err(&bpath, e))?;
        if bytes.len() != 4 * p.correction.params.len() {
            return Err(ckpt_err(&bpath, format!("expected {} bytes, found {}", 4 * p.correction.params.len(), bytes.len())));
        }
        for (v, c) in p.correction.params.iter_mut().zip(bytes.chunks_exact(4)) {
            *v = f32::from_le_bytes(c.try_into().unwrap()) as f64;
        }
        p.adapted = p.correction.params.iter().any(|&v| v != 0.0);
        Ok(p)
    }
}

#[derive(Serialize, Deserialize)]
struct ProviderMeta {
    oracle: AmbiguityOracleConfig,
    nodes: (usize, usize),
}

fn ckpt_err(path: &Path, e: impl std::fmt::Display) -> ProviderError {
    ProviderError::Checkpoint {
        file: path.display().to_string(),
        reason: e.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp_perception(w: usize, h: usize) -> Perception {
        let v = (0..w * h).map(|i| 1.0 + 0.1 * i as f64).collect();
        Perception::from_depth(DepthMap::from_values(w, h, v, DepthFrame::Absolute), 3)
    }

    #[test]
    fn identity_provider_passes_depth_through() {
        let p = DepthProvider::new(AmbiguityOracleConfig::identity(), (8, 8)).unwrap();
        let per = ramp_perception(4, 4);
        let img = RgbImage::filled(4, 4, [0.0; 3]);
        let out = p.predict(&img, &per).unwrap().depth;
        assert_eq!(out.values, per.depth.values);
        assert_eq!(out.frame, DepthFrame::Relative);
    }

    #[test]
    fn global_affine_only() {
        let cfg = AmbiguityOracleConfig {
            global_scale: 2.0,
            global_shift: 0.5,
            ..AmbiguityOracleConfig::identity()
        };
        let p = DepthProvider::new(cfg, (8, 8)).unwrap();
        let per = ramp_perception(4, 4);
        let out = p.predict(&RgbImage::filled(4, 4, [0.0; 3]), &per).unwrap().depth;
        for (o, g) in out.values.iter().zip(&per.depth.values) {
            assert_eq!(*o, 2.0 * g + 0.5);
        }
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let p = DepthProvider::new(AmbiguityOracleConfig::identity(), (8, 8)).unwrap();
        assert!(p.predict(&RgbImage::filled(3, 4, [0.0; 3]), &ramp_perception(4, 4)).is_err());
    }

    #[test]
    fn non_monotone_warp_rejected() {
        let cfg = AmbiguityOracleConfig {
            convexity_warp: 1.0,
            depth_max: 3.0,
            ..AmbiguityOracleConfig::identity()
        };
        assert!(DepthProvider::new(cfg, (8, 8)).is_err());
    }

    #[test]
    fn zero_gradient_update_is_exact_noop() {
        let mut p = DepthProvider::new(AmbiguityOracleConfig::identity(), (4, 4)).unwrap();
        p.correction.set_node(1, 1, 0.3, -0.2);
        let before = p.correction.clone();
        p.adapt_step(&vec![0.0; 32], 0.1).unwrap();
        assert_eq!(p.correction, before);
    }

    #[test]
    fn single_node_gradient_moves_only_that_node() {
        let mut p = DepthProvider::new(AmbiguityOracleConfig::identity(), (4, 4)).unwrap();
        let mut g = vec![0.0; 32];
        g[2 * 5 + 1] = 1.0;
        p.adapt_step(&g, 0.1).unwrap();
        for (i, v) in p.correction.params().iter().enumerate() {
            assert_eq!(*v != 0.0, i == 11, "param {i}");
        }
    }

    #[test]
    fn non_finite_gradient_refused() {
        let mut p = DepthProvider::new(AmbiguityOracleConfig::identity(), (4, 4)).unwrap();
        let mut g = vec![0.0; 32];
        g[3] = f64::INFINITY;
        assert!(matches!(p.adapt_step(&g, 0.1), Err(ProviderError::Update(_))));
        assert!(!p.has_adapted());
    }

    #[test]
    fn snapshot_after_adaptation_is_an_error() {
        let mut p = DepthProvider::new(AmbiguityOracleConfig::identity(), (4, 4)).unwrap();
        let per = ramp_perception(4, 4);
        let img = RgbImage::filled(4, 4, [0.0; 3]);
        let snap = p.snapshot_initial(&[(&img, &per)]).unwrap();
        assert_eq!(snap[0], p.predict(&img, &per).unwrap().depth);
        let mut g = vec![0.0; 32];
        g[0] = 1.0;
        p.adapt_step(&g, 0.1).unwrap();
        assert!(matches!(p.snapshot_initial(&[(&img, &per)]), Err(ProviderError::SnapshotAfterAdaptation)));
        assert_ne!(snap[0], p.predict(&img, &per).unwrap().depth);
    }

    #[test]
    fn snapshot_is_oracle_then_correction_by_hand() {
        // 4x4 view, 2x2 correction grid with a known node layout. Pixel
        // centers map to u = (x + 0.5)/4 in [0, 1]; node values vary in x
        // only, so scale(x) = exp(lerp(0, ln 2, u)), shift(x) = lerp(0, 1, u).
        // The pivot is 0.5 * (1 / 2) + 1 = 1.25.
        let cfg = AmbiguityOracleConfig {
            global_scale: 0.5,
            global_shift: 1.0,
            ..AmbiguityOracleConfig::identity()
        };
        let mut p = DepthProvider::new(cfg, (2, 2)).unwrap();
        p.correction.set_node(1, 0, 2f64.ln(), 1.0);
        p.correction.set_node(1, 1, 2f64.ln(), 1.0);
        let per = ramp_perception(4, 4);
        let img = RgbImage::filled(4, 4, [0.0; 3]);
        let snap = &p.snapshot_initial(&[(&img, &per)]).unwrap()[0];
        for y in 0..4 {
            for x in 0..4 {
                let u = (x as f64 + 0.5) / 4.0;
                let gt = 1.0 + 0.1 * (y * 4 + x) as f64;
                let base = 0.5 * gt + 1.0;
                let expect = (u * 2f64.ln()).exp() * (base - 1.25) + 1.25 + u;
                assert!((snap.get(x, y).unwrap() - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn correction_gradient_matches_finite_difference() {
        let mut p = DepthProvider::new(AmbiguityOracleConfig::identity(), (3, 3)).unwrap();
        for (i, v) in p.correction.params_mut().iter_mut().enumerate() {
            *v = 0.1 * ((i * 7) % 5) as f64 - 0.2;
        }
        let per = ramp_perception(5, 5);
        let img = RgbImage::filled(5, 5, [0.0; 3]);
        let pred = p.predict(&img, &per).unwrap();
        let pixels: Vec<_> = (0..5).flat_map(|y| (0..5).map(move |x| (x, y))).collect();
        let up: Vec<f64> = (0..25).map(|i| ((i * 3) % 7) as f64 - 3.0).collect();
        let loss = |c: &CorrectionField| -> f64 {
            let d = c.apply(&pred.base);
            pixels.iter().zip(&up).map(|(&(x, y), g)| g * d.get(x, y).unwrap()).sum()
        };
        let mut g = vec![0.0; 18];
        p.correction.backward(&pred.base, &pixels, &up, &mut g);
        for k in 0..18 {
            let mut a = p.correction.clone();
            a.params_mut()[k] += 1e-6;
            let mut b = p.correction.clone();
            b.params_mut()[k] -= 1e-6;
            let fd = (loss(&a) - loss(&b)) / 2e-6;
            assert!((fd - g[k]).abs() < 1e-5 * (1.0 + fd.abs()), "param {k}: {fd} vs {}", g[k]);
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut p = DepthProvider::new(AmbiguityOracleConfig::ambiguous(4), (8, 8)).unwrap();
        p.correction.set_node(3, 4, 0.25, -0.5);
        p.save(dir.path()).unwrap();
        let q = DepthProvider::load(dir.path()).unwrap();
        assert_eq!(q.oracle, p.oracle);
        assert_eq!(q.correction, p.correction);
    }
}
