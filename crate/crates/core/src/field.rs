//! Dense voxel radiance field with trilinear interpolation, alpha-compositing
//! volume rendering, and exact analytic gradients of the quadrature.
//!
//! Each grid node stores four raw (pre-activation) values: density and RGB.
//! Density goes through softplus, color through the logistic function,
//! *after* interpolation.

use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::Vector3;
use rand::RngCore;
use thiserror::Error;

use crate::camera::{Aabb, Ray};

#[derive(Debug, Error)]
pub enum FieldError {
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("forward/backward sampling mismatch: forward used {forward:?}, backward got {backward:?}")]
    SamplingMismatch {
        forward: Sampling,
        backward: Sampling,
    },
    #[error("{file}: {reason}")]
    Checkpoint { file: String, reason: String },
    #[error(transparent)]
    Geometry(#[from] crate::camera::GeometryError),
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Number of raw parameters per node.
pub const NODE_PARAMS: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct RadianceFieldGrid {
    resolution: [usize; 3],
    bounds: Aabb,
    /// `[density_raw, r_raw, g_raw, b_raw]` per node, x-fastest.
    nodes: Vec<[f64; NODE_PARAMS]>,
    inv_cell: Vector3<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FieldSample {
    pub sigma: f64,
    pub color: [f64; 3],
}

/// The eight interpolation corners of a point.
#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct Corners {
    pub index: [usize; 8],
    pub weight: [f64; 8],
}

impl RadianceFieldGrid {
    /// Grid with every node set to `density_raw` and `color_raw`.
    pub fn new(
        resolution: [usize; 3],
        bounds: Aabb,
        density_raw: f64,
        color_raw: f64,
    ) -> Result<Self, FieldError> {
        if resolution.iter().any(|&n| n < 2) {
            return Err(FieldError::Argument(format!(
                "resolution {resolution:?} must be at least 2 per axis"
            )));
        }
        if bounds.is_degenerate() {
            return Err(FieldError::Argument("degenerate bounds".into()));
        }
        let n = resolution.iter().product();
        let ext = bounds.extent();
        let inv_cell = Vector3::new(
            (resolution[0] - 1) as f64 / ext.x,
            (resolution[1] - 1) as f64 / ext.y,
            (resolution[2] - 1) as f64 / ext.z,
        );
        Ok(Self {
            resolution,
            bounds,
            nodes: vec![[density_raw, color_raw, color_raw, color_raw]; n],
            inv_cell,
        })
    }

    pub fn resolution(&self) -> [usize; 3] {
        self.resolution
    }

    pub fn bounds(&self) -> &Aabb {
        &self.bounds
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    #[inline]
    pub fn node_index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.resolution[0] * (j + self.resolution[1] * k)
    }

    pub fn node_position(&self, i: usize, j: usize, k: usize) -> Vector3<f64> {
        let e = self.bounds.extent();
        let r = self.resolution;
        self.bounds.min
            + Vector3::new(
                e.x * i as f64 / (r[0] - 1) as f64,
                e.y * j as f64 / (r[1] - 1) as f64,
                e.z * k as f64 / (r[2] - 1) as f64,
            )
    }

    pub fn density_raw(&self, node: usize) -> f64 {
        self.nodes[node][0]
    }

    pub fn color_raw(&self, node: usize) -> [f64; 3] {
        let n = &self.nodes[node];
        [n[1], n[2], n[3]]
    }

    pub fn set_density_raw(&mut self, node: usize, v: f64) {
        self.nodes[node][0] = v;
    }

    pub fn set_color_raw(&mut self, node: usize, c: [f64; 3]) {
        self.nodes[node][1..].copy_from_slice(&c);
    }

    /// All raw parameters, node-major `[density, r, g, b]`.
    pub fn params(&self) -> &[f64] {
        self.nodes.as_flattened()
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        self.nodes.as_flattened_mut()
    }

    pub fn all_finite(&self) -> bool {
        self.params().iter().all(|v| v.is_finite())
    }

    pub(crate) fn corners(&self, x: &Vector3<f64>) -> Option<Corners> {
        if !self.bounds.contains(x) {
            return None;
        }
        let u = (x - self.bounds.min).component_mul(&self.inv_cell);
        let mut base = [0usize; 3];
        let mut frac = [0.0; 3];
        for a in 0..3 {
            let max_cell = self.resolution[a] - 2;
            let c = (u[a].floor().max(0.0) as usize).min(max_cell);
            base[a] = c;
            frac[a] = (u[a] - c as f64).clamp(0.0, 1.0);
        }
        let mut out = Corners::default();
        let nx = self.resolution[0];
        let nxy = nx * self.resolution[1];
        let origin = base[0] + nx * base[1] + nxy * base[2];
        for c in 0..8 {
            let (dx, dy, dz) = (c & 1, (c >> 1) & 1, (c >> 2) & 1);
            out.index[c] = origin + dx + nx * dy + nxy * dz;
            let wx = if dx == 1 { frac[0] } else { 1.0 - frac[0] };
            let wy = if dy == 1 { frac[1] } else { 1.0 - frac[1] };
            let wz = if dz == 1 { frac[2] } else { 1.0 - frac[2] };
            out.weight[c] = wx * wy * wz;
        }
        Some(out)
    }

    #[inline]
    pub(crate) fn interpolate_raw(&self, c: &Corners) -> [f64; NODE_PARAMS] {
        let mut raw = [0.0; NODE_PARAMS];
        for k in 0..8 {
            let n = &self.nodes[c.index[k]];
            let w = c.weight[k];
            raw[0] += w * n[0];
            raw[1] += w * n[1];
            raw[2] += w * n[2];
            raw[3] += w * n[3];
        }
        raw
    }

    /// Field value at a world point. Outside the bounds the field is empty
    /// (zero density, black).
    pub fn query(&self, x: &Vector3<f64>) -> Result<FieldSample, FieldError> {
        if !(x.x.is_finite() && x.y.is_finite() && x.z.is_finite()) {
            return Err(FieldError::Argument("non-finite query point".into()));
        }
        Ok(match self.corners(x) {
            None => FieldSample {
                sigma: 0.0,
                color: [0.0; 3],
            },
            Some(c) => {
                let raw = self.interpolate_raw(&c);
                FieldSample {
                    sigma: softplus(raw[0]),
                    color: [sigmoid(raw[1]), sigmoid(raw[2]), sigmoid(raw[3])],
                }
            }
        })
    }
}

/// How sample distances are placed inside each stratum.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sampling {
    /// Stratum midpoints.
    Midpoint,
    /// Uniformly jittered within each stratum, reproducible from the seed
    /// and the ray's index in its batch.
    Jittered { seed: u64 },
}

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl Sampling {
    #[inline]
    pub(crate) fn offset(&self, ray_index: usize, k: usize) -> f64 {
        match *self {
            Sampling::Midpoint => 0.5,
            Sampling::Jittered { seed } => {
                let h = splitmix64(
                    seed ^ splitmix64((ray_index as u64) << 20 ^ k as u64),
                );
                (h >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderResult {
    /// Composited color without background.
    pub color: [f64; 3],
    /// Expected ray distance `Σ w_k t_k`.
    pub depth: f64,
    pub weights: Vec<f64>,
    /// `T_k`, transmittance before sample `k`.
    pub transmittance: Vec<f64>,
    pub t_values: Vec<f64>,
    pub accumulated_opacity: f64,
}

/// Per-sample scratch reused across rays.
#[derive(Debug, Default)]
pub(crate) struct Marcher {
    t: Vec<f64>,
    sigma: Vec<f64>,
    color: Vec<[f64; 3]>,
    raw: Vec<[f64; NODE_PARAMS]>,
    corners: Vec<Option<Corners>>,
    trans: Vec<f64>,
    weight: Vec<f64>,
    delta: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RayOutput {
    pub color: [f64; 3],
    pub depth: f64,
    pub opacity: f64,
}

/// Upstream gradient of a scalar loss with respect to one ray's outputs.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RayGrad {
    pub color: [f64; 3],
    pub depth: f64,
    pub opacity: f64,
}

impl RayGrad {
    pub fn is_zero(&self) -> bool {
        self.color == [0.0; 3] && self.depth == 0.0 && self.opacity == 0.0
    }
}

impl Marcher {
    pub(crate) fn new() -> Self {
        Self::default()
    }

    /// Forward pass over `[ray.near, ray.far]`, which must already be finite.
    pub(crate) fn march(
        &mut self,
        grid: &RadianceFieldGrid,
        ray: &Ray,
        n: usize,
        offset: impl Fn(usize) -> f64,
    ) -> RayOutput {
        self.t.clear();
        self.sigma.clear();
        self.color.clear();
        self.raw.clear();
        self.corners.clear();
        self.trans.clear();
        self.weight.clear();
        let delta = (ray.far - ray.near) / n as f64;
        self.delta = delta;
        let mut trans = 1.0;
        let mut out = RayOutput::default();
        for k in 0..n {
            let t = ray.near + (k as f64 + offset(k)) * delta;
            let x = ray.at(t);
            let corners = grid.corners(&x);
            let (raw, sigma, color) = match &corners {
                Some(c) => {
                    let raw = grid.interpolate_raw(c);
                    (
                        raw,
                        softplus(raw[0]),
                        [sigmoid(raw[1]), sigmoid(raw[2]), sigmoid(raw[3])],
                    )
                }
                None => ([0.0; NODE_PARAMS], 0.0, [0.0; 3]),
            };
            let alpha = -(-sigma * delta).exp_m1();
            let w = trans * alpha;
            self.t.push(t);
            self.sigma.push(sigma);
            self.color.push(color);
            self.raw.push(raw);
            self.corners.push(corners);
            self.trans.push(trans);
            self.weight.push(w);
            out.color[0] += w * color[0];
            out.color[1] += w * color[1];
            out.color[2] += w * color[2];
            out.depth += w * t;
            out.opacity += w;
            trans *= (-sigma * delta).exp();
        }
        out
    }

    /// Per-sample gradients with respect to the interpolated raw values,
    /// handed to `sink` from the last sample to the first.
    pub(crate) fn backprop_with(&self, g: &RayGrad, mut sink: impl FnMut(&Corners, [f64; NODE_PARAMS])) {
        let n = self.t.len();
        let mut suffix = 0.0; // sum over j > k of w_j s_j
        for k in (0..n).rev() {
            let Some(corners) = &self.corners[k] else {
                continue;
            };
            let c = &self.color[k];
            let s = g.color[0] * c[0] + g.color[1] * c[1] + g.color[2] * c[2]
                + g.depth * self.t[k]
                + g.opacity;
            let w = self.weight[k];
            let trans_next = self.trans[k] * (-self.sigma[k] * self.delta).exp();
            let d_sigma = self.delta * (trans_next * s - suffix);
            suffix += w * s;

            let raw = &self.raw[k];
            sink(
                corners,
                [
                    d_sigma * sigmoid(raw[0]),
                    w * g.color[0] * c[0] * (1.0 - c[0]),
                    w * g.color[1] * c[1] * (1.0 - c[1]),
                    w * g.color[2] * c[2] * (1.0 - c[2]),
                ],
            );
        }
    }
}

#[inline]
pub(crate) fn scatter(grad: &mut [[f64; NODE_PARAMS]], corners: &Corners, d_raw: &[f64; NODE_PARAMS]) {
    for i in 0..8 {
        let cw = corners.weight[i];
        if cw == 0.0 {
            continue;
        }
        let dst = &mut grad[corners.index[i]];
        dst[0] += cw * d_raw[0];
        dst[1] += cw * d_raw[1];
        dst[2] += cw * d_raw[2];
        dst[3] += cw * d_raw[3];
    }
}

/// Render one ray. The integration range is the ray's `[near, far]`
/// clipped to the grid bounds; a ray that misses the grid renders empty.
pub fn render_ray(
    grid: &RadianceFieldGrid,
    ray: &Ray,
    n_samples: usize,
    jitter: Option<&mut dyn RngCore>,
) -> Result<RenderResult, FieldError> {
    if n_samples < 2 {
        return Err(FieldError::Argument(format!(
            "n_samples = {n_samples}, need at least 2"
        )));
    }
    let Some(clipped) = ray.clip(grid.bounds()) else {
        return Ok(RenderResult {
            color: [0.0; 3],
            depth: 0.0,
            weights: vec![0.0; n_samples],
            transmittance: vec![1.0; n_samples],
            t_values: vec![],
            accumulated_opacity: 0.0,
        });
    };
    let offsets: Vec<f64> = match jitter {
        None => vec![0.5; n_samples],
        Some(rng) => (0..n_samples)
            .map(|_| (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64))
            .collect(),
    };
    let mut m = Marcher::new();
    let out = m.march(grid, &clipped, n_samples, |k| offsets[k]);
    Ok(RenderResult {
        color: out.color,
        depth: out.depth,
        weights: m.weight,
        transmittance: m.trans,
        t_values: m.t,
        accumulated_opacity: out.opacity,
    })
}

/// Gradient of a rendering loss with respect to every raw grid parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct GridGradient {
    pub(crate) nodes: Vec<[f64; NODE_PARAMS]>,
}

impl GridGradient {
    pub fn zeros_like(grid: &RadianceFieldGrid) -> Self {
        Self {
            nodes: vec![[0.0; NODE_PARAMS]; grid.node_count()],
        }
    }

    /// Same layout as [`RadianceFieldGrid::params`].
    pub fn values(&self) -> &[f64] {
        self.nodes.as_flattened()
    }

    pub fn density(&self, node: usize) -> f64 {
        self.nodes[node][0]
    }

    pub fn color(&self, node: usize) -> [f64; 3] {
        let n = &self.nodes[node];
        [n[1], n[2], n[3]]
    }

    pub fn is_zero(&self) -> bool {
        self.values().iter().all(|&v| v == 0.0)
    }

    pub fn add_assign(&mut self, other: &GridGradient) {
        for (a, b) in self.nodes.iter_mut().zip(&other.nodes) {
            for c in 0..NODE_PARAMS {
                a[c] += b[c];
            }
        }
    }
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"VXRF";
const CHECKPOINT_VERSION: u32 = 1;

impl RadianceFieldGrid {
    /// Header (magic, version, resolution, bounds as f64) followed by the
    /// float32 density block and the float32 RGB block, x-fastest.
    pub fn save(&self, path: &Path) -> Result<(), FieldError> {
        let mut out = Vec::with_capacity(64 + 16 * self.nodes.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        for r in self.resolution {
            out.extend_from_slice(&(r as u32).to_le_bytes());
        }
        for v in self.bounds.min.iter().chain(self.bounds.max.iter()) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for n in &self.nodes {
            out.extend_from_slice(&(n[0] as f32).to_le_bytes());
        }
        for n in &self.nodes {
            for c in &n[1..] {
                out.extend_from_slice(&(*c as f32).to_le_bytes());
            }
        }
        let mut f = fs::File::create(path).map_err(|e| ckpt_err(path, e.to_string()))?;
        f.write_all(&out).map_err(|e| ckpt_err(path, e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, FieldError> {
        let bytes = fs::read(path).map_err(|e| ckpt_err(path, e.to_string()))?;
        let mut cur = Cursor {
            bytes: &bytes,
            pos: 0,
            path,
        };
        if cur.take(4)? != CHECKPOINT_MAGIC {
            return Err(ckpt_err(path, "bad magic".into()));
        }
        let version = cur.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(ckpt_err(path, format!("unsupported version {version}")));
        }
        let resolution = [cur.u32()? as usize, cur.u32()? as usize, cur.u32()? as usize];
        let mut b = [0.0; 6];
        for v in &mut b {
            *v = cur.f64()?;
        }
        let bounds = Aabb::new(Vector3::new(b[0], b[1], b[2]), Vector3::new(b[3], b[4], b[5]));
        let mut grid = Self::new(resolution, bounds, 0.0, 0.0)?;
        for n in &mut grid.nodes {
            n[0] = cur.f32()? as f64;
        }
        for n in &mut grid.nodes {
            for c in &mut n[1..] {
                *c = cur.f32()? as f64;
            }
        }
        if cur.pos != bytes.len() {
            return Err(ckpt_err(path, "trailing bytes".into()));
        }
        Ok(grid)
    }
}

fn ckpt_err(path: &Path, reason: String) -> FieldError {
    FieldError::Checkpoint {
        file: path.display().to_string(),
        reason,
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8], FieldError> {
        if self.pos + n > self.bytes.len() {
            return Err(ckpt_err(self.path, "truncated".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, FieldError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32, FieldError> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, FieldError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit_bounds() -> Aabb {
        Aabb::new(Vector3::zeros(), Vector3::repeat(1.0))
    }

    fn random_grid(res: usize, seed: u64) -> RadianceFieldGrid {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = RadianceFieldGrid::new([res; 3], unit_bounds(), 0.0, 0.0).unwrap();
        for v in g.params_mut() {
            *v = rng.random_range(-2.0..2.0);
        }
        g
    }

    /// Straightforward 8-corner weighted sum over explicit node coordinates.
    fn naive_query(g: &RadianceFieldGrid, x: &Vector3<f64>) -> FieldSample {
        let r = g.resolution();
        let e = g.bounds().extent();
        let mut raw = [0.0; 4];
        let mut cell = [0usize; 3];
        for a in 0..3 {
            let u = (x[a] - g.bounds().min[a]) / e[a] * (r[a] - 1) as f64;
            cell[a] = (u.floor() as usize).min(r[a] - 2);
        }
        for dz in 0..2 {
            for dy in 0..2 {
                for dx in 0..2 {
                    let (i, j, k) = (cell[0] + dx, cell[1] + dy, cell[2] + dz);
                    let p = g.node_position(i, j, k);
                    let h = Vector3::new(e.x / (r[0] - 1) as f64, e.y / (r[1] - 1) as f64, e.z / (r[2] - 1) as f64);
                    let w = (1.0 - ((x.x - p.x) / h.x).abs())
                        * (1.0 - ((x.y - p.y) / h.y).abs())
                        * (1.0 - ((x.z - p.z) / h.z).abs());
                    let n = g.node_index(i, j, k);
                    raw[0] += w * g.density_raw(n);
                    let c = g.color_raw(n);
                    for ch in 0..3 {
                        raw[ch + 1] += w * c[ch];
                    }
                }
            }
        }
        FieldSample {
            sigma: softplus(raw[0]),
            color: [sigmoid(raw[1]), sigmoid(raw[2]), sigmoid(raw[3])],
        }
    }

    #[test]
    fn query_at_node_is_activation_of_node() {
        let g = random_grid(4, 1);
        let n = g.node_index(1, 2, 3);
        let s = g.query(&g.node_position(1, 2, 3)).unwrap();
        assert!((s.sigma - softplus(g.density_raw(n))).abs() < 1e-15);
        assert!((s.color[1] - sigmoid(g.color_raw(n)[1])).abs() < 1e-15);
    }

    #[test]
    fn midpoint_interpolates_before_activation() {
        let mut g = RadianceFieldGrid::new([2, 2, 2], unit_bounds(), 0.0, 0.0).unwrap();
        let a = g.node_index(0, 0, 0);
        let b = g.node_index(1, 0, 0);
        g.set_density_raw(a, -1.0);
        g.set_density_raw(b, 3.0);
        let s = g.query(&Vector3::new(0.5, 0.0, 0.0)).unwrap();
        assert!((s.sigma - softplus(1.0)).abs() < 1e-15);
    }

    #[test]
    fn query_matches_naive_corner_sum() {
        let g = random_grid(5, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..500 {
            let x = Vector3::new(rng.random(), rng.random(), rng.random());
            let a = g.query(&x).unwrap();
            let b = naive_query(&g, &x);
            assert!((a.sigma - b.sigma).abs() < 1e-12);
            for c in 0..3 {
                assert!((a.color[c] - b.color[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn query_outside_and_nonfinite() {
        let g = random_grid(3, 4);
        assert_eq!(g.query(&Vector3::new(2.0, 0.5, 0.5)).unwrap().sigma, 0.0);
        assert!(g.query(&Vector3::new(f64::NAN, 0.5, 0.5)).is_err());
    }

    #[test]
    fn render_needs_two_samples() {
        let g = random_grid(3, 4);
        let ray = Ray::new(Vector3::new(0.5, 0.5, -1.0), Vector3::z(), 0.5, 3.0).unwrap();
        assert!(render_ray(&g, &ray, 1, None).is_err());
    }

    #[test]
    fn empty_space_renders_nothing() {
        let g = RadianceFieldGrid::new([4; 3], unit_bounds(), -1e4, 0.0).unwrap();
        let ray = Ray::new(Vector3::new(0.5, 0.5, -1.0), Vector3::z(), 0.5, 3.0).unwrap();
        let r = render_ray(&g, &ray, 16, None).unwrap();
        assert_eq!(r.color, [0.0; 3]);
        assert_eq!(r.depth, 0.0);
        assert_eq!(r.accumulated_opacity, 0.0);
    }

    #[test]
    fn jittered_render_stays_in_strata() {
        let g = random_grid(4, 5);
        let ray = Ray::new(Vector3::new(0.3, 0.6, -1.0), Vector3::z(), 0.5, 3.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let r = render_ray(&g, &ray, 8, Some(&mut rng)).unwrap();
        let delta = 1.0 / 8.0;
        for (k, t) in r.t_values.iter().enumerate() {
            let lo = 1.0 + k as f64 * delta;
            assert!(*t >= lo && *t <= lo + delta);
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.bin");
        let mut g = random_grid(3, 6);
        for v in g.params_mut() {
            *v = *v as f32 as f64;
        }
        g.save(&path).unwrap();
        let back = RadianceFieldGrid::load(&path).unwrap();
        assert_eq!(g, back);
        let bytes = fs::read(&path).unwrap();
        assert_eq!(&bytes[..4], b"VXRF");
        // header 4+4+12+48, then 27 densities and 81 colors as f32
        assert_eq!(bytes.len(), 68 + 4 * 27 + 12 * 27);
        let first = f32::from_le_bytes(bytes[68..72].try_into().unwrap());
        assert_eq!(first as f64, g.density_raw(0));
    }
}
