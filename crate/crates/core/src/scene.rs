//! Analytic scenes traced to exact ground-truth color and depth.
//!
//! Shading is flat albedo with no lighting, so the photometric target is
//! identical from every viewpoint. Depth is z-depth along the optical axis.

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::{pixel_ray, Aabb, GeometryError, Intrinsics, Pose};
use crate::maps::{DepthFrame, DepthMap, RgbImage};

const HIT_EPS: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Shape {
    Sphere { radius: f64 },
    /// Axis-aligned box given by its half extents.
    Cuboid { half_extents: [f64; 3] },
    /// Horizontal (normal +y) rectangle with half extents along x and z.
    Plane { half_extents: [f64; 2] },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenePrimitive {
    #[serde(flatten)]
    pub shape: Shape,
    pub center: [f64; 3],
    pub albedo: [f64; 3],
}

impl ScenePrimitive {
    pub fn sphere(center: [f64; 3], radius: f64, albedo: [f64; 3]) -> Self {
        Self {
            shape: Shape::Sphere { radius },
            center,
            albedo,
        }
    }

    pub fn cuboid(center: [f64; 3], half_extents: [f64; 3], albedo: [f64; 3]) -> Self {
        Self {
            shape: Shape::Cuboid { half_extents },
            center,
            albedo,
        }
    }

    pub fn plane(center: [f64; 3], half_extents: [f64; 2], albedo: [f64; 3]) -> Self {
        Self {
            shape: Shape::Plane { half_extents },
            center,
            albedo,
        }
    }

    fn c(&self) -> Vector3<f64> {
        Vector3::from(self.center)
    }

    fn validate(&self) -> Result<(), String> {
        let sizes: Vec<f64> = match &self.shape {
            Shape::Sphere { radius } => vec![*radius],
            Shape::Cuboid { half_extents } => half_extents.to_vec(),
            Shape::Plane { half_extents } => half_extents.to_vec(),
        };
        if sizes.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err("primitive sizes must be positive".into());
        }
        if self.albedo.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return Err("albedo must lie in [0, 1]".into());
        }
        if self.center.iter().any(|c| !c.is_finite()) {
            return Err("primitive center must be finite".into());
        }
        Ok(())
    }

    pub fn aabb(&self) -> Aabb {
        let c = self.c();
        let h = match &self.shape {
            Shape::Sphere { radius } => Vector3::repeat(*radius),
            Shape::Cuboid { half_extents } => Vector3::from(*half_extents),
            Shape::Plane { half_extents } => Vector3::new(half_extents[0], 0.0, half_extents[1]),
        };
        Aabb::new(c - h, c + h)
    }

    pub fn contains_point(&self, x: &Vector3<f64>) -> bool {
        let c = self.c();
        match &self.shape {
            Shape::Sphere { radius } => (x - c).norm() < *radius,
            Shape::Cuboid { half_extents } => {
                (0..3).all(|a| (x[a] - c[a]).abs() < half_extents[a])
            }
            Shape::Plane { .. } => false,
        }
    }

    /// Nearest positive ray distance to the surface.
    pub fn intersect(&self, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<f64> {
        let c = self.c();
        match &self.shape {
            Shape::Sphere { radius } => {
                let oc = o - c;
                let b = d.dot(&oc);
                let cc = oc.norm_squared() - radius * radius;
                let disc = b * b - cc;
                if disc < 0.0 {
                    return None;
                }
                let s = disc.sqrt();
                [-b - s, -b + s].into_iter().find(|&t| t > HIT_EPS)
            }
            Shape::Cuboid { half_extents } => {
                // Test each of the six face rectangles.
                let mut best: Option<f64> = None;
                for axis in 0..3 {
                    if d[axis] == 0.0 {
                        continue;
                    }
                    for sign in [-1.0, 1.0] {
                        let plane = c[axis] + sign * half_extents[axis];
                        let t = (plane - o[axis]) / d[axis];
                        if t <= HIT_EPS || best.is_some_and(|b| t >= b) {
                            continue;
                        }
                        let p = o + d * t;
                        let inside = (0..3).filter(|&a| a != axis).all(|a| {
                            (p[a] - c[a]).abs() <= half_extents[a] * (1.0 + 1e-12)
                        });
                        if inside {
                            best = Some(t);
                        }
                    }
                }
                best
            }
            Shape::Plane { half_extents } => {
                if d.y == 0.0 {
                    return None;
                }
                let t = (c.y - o.y) / d.y;
                if t <= HIT_EPS {
                    return None;
                }
                let p = o + d * t;
                ((p.x - c.x).abs() <= half_extents[0] && (p.z - c.z).abs() <= half_extents[1])
                    .then_some(t)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub primitives: Vec<ScenePrimitive>,
    pub background_color: [f64; 3],
    pub bounds: Aabb,
    pub seed: u64,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<(), GeometryError> {
        if self.primitives.is_empty() {
            return Err(GeometryError::InvalidScene("primitive list is empty".into()));
        }
        if self.bounds.is_degenerate() {
            return Err(GeometryError::InvalidScene("degenerate bounds".into()));
        }
        for (i, p) in self.primitives.iter().enumerate() {
            p.validate()
                .map_err(|e| GeometryError::InvalidScene(format!("primitive {i}: {e}")))?;
            if !self.bounds.strictly_contains(&p.aabb()) {
                return Err(GeometryError::InvalidScene(format!(
                    "primitive {i} is not strictly inside the scene bounds"
                )));
            }
        }
        Ok(())
    }

    /// Nearest hit: (primitive index, ray distance).
    pub fn first_hit(&self, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<(usize, f64)> {
        self.primitives
            .iter()
            .enumerate()
            .filter_map(|(i, p)| p.intersect(o, d).map(|t| (i, t)))
            .min_by(|a, b| a.1.total_cmp(&b.1))
    }

    fn check_camera(&self, pose: &Pose) -> Result<(), GeometryError> {
        let c = pose.center();
        match self.primitives.iter().position(|p| p.contains_point(&c)) {
            Some(i) => Err(GeometryError::CameraInsidePrimitive(i)),
            None => Ok(()),
        }
    }

    /// A unit sphere at the origin.
    pub fn unit_sphere() -> Self {
        Self {
            primitives: vec![ScenePrimitive::sphere([0.0; 3], 1.0, [0.8, 0.3, 0.2])],
            background_color: [0.0; 3],
            bounds: Aabb::new(Vector3::repeat(-1.5), Vector3::repeat(1.5)),
            seed: 0,
        }
    }

    /// Two boxes of different size on a floor.
    pub fn two_box() -> Self {
        Self {
            primitives: vec![
                ScenePrimitive::plane([0.0, -1.0, 0.0], [1.9, 1.9], [0.55, 0.55, 0.5]),
                ScenePrimitive::cuboid([-0.55, -0.45, 0.3], [0.55, 0.55, 0.55], [0.85, 0.25, 0.2]),
                ScenePrimitive::cuboid([0.75, -0.65, -0.6], [0.35, 0.35, 0.35], [0.2, 0.35, 0.85]),
            ],
            background_color: [0.9, 0.95, 1.0],
            bounds: Aabb::new(Vector3::new(-2.0, -1.2, -2.0), Vector3::new(2.0, 0.8, 2.0)),
            seed: 0,
        }
    }

    pub fn single_box() -> Self {
        Self {
            primitives: vec![
                ScenePrimitive::plane([0.0, -1.0, 0.0], [1.9, 1.9], [0.55, 0.55, 0.5]),
                ScenePrimitive::cuboid([0.0, -0.4, 0.0], [0.6, 0.6, 0.6], [0.85, 0.25, 0.2]),
            ],
            background_color: [0.9, 0.95, 1.0],
            bounds: Aabb::new(Vector3::new(-2.0, -1.2, -2.0), Vector3::new(2.0, 0.8, 2.0)),
            seed: 0,
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "sphere" | "unit-sphere" => Some(Self::unit_sphere()),
            "two-box" => Some(Self::two_box()),
            "box" => Some(Self::single_box()),
            _ => None,
        }
    }

    /// Per-pixel hits for a camera: `(primitive, z-depth)` or `None`.
    pub fn trace_hits(
        &self,
        intrinsics: &Intrinsics,
        pose: &Pose,
        width: usize,
        height: usize,
    ) -> Result<Vec<Option<(usize, f64)>>, GeometryError> {
        self.validate()?;
        if width < 2 || height < 2 {
            return Err(GeometryError::InvalidScene(format!(
                "resolution {width}x{height} below 2x2"
            )));
        }
        self.check_camera(pose)?;
        let axis = pose.forward();
        let hits = (0..height)
            .into_par_iter()
            .flat_map_iter(|y| {
                (0..width).map(move |x| {
                    let ray = pixel_ray(intrinsics, pose, width, height, x, y)
                        .expect("pixel inside image");
                    self.first_hit(&ray.origin, &ray.direction)
                        .map(|(i, t)| (i, t * ray.direction.dot(&axis)))
                })
            })
            .collect();
        Ok(hits)
    }

    /// What an observer at this camera perceives: depth plus the primitive
    /// covering each pixel.
    pub fn perceive(
        &self,
        intrinsics: &Intrinsics,
        pose: &Pose,
        width: usize,
        height: usize,
        key: u64,
    ) -> Result<Perception, GeometryError> {
        let hits = self.trace_hits(intrinsics, pose, width, height)?;
        let mut depth = DepthMap::new(width, height, DepthFrame::Absolute);
        let mut regions = vec![None; width * height];
        for (i, h) in hits.into_iter().enumerate() {
            if let Some((prim, z)) = h {
                depth.values[i] = z;
                depth.validity[i] = true;
                regions[i] = Some(prim);
            }
        }
        Ok(Perception {
            depth,
            regions,
            key,
        })
    }
}

/// Ground-truth geometry as seen from one camera, with the primitive index
/// covering each pixel. `key` identifies the viewpoint for seeded noise.
#[derive(Debug, Clone, PartialEq)]
pub struct Perception {
    pub depth: DepthMap,
    pub regions: Vec<Option<usize>>,
    pub key: u64,
}

impl Perception {
    /// A perception without region labels.
    pub fn from_depth(depth: DepthMap, key: u64) -> Self {
        let regions = vec![None; depth.values.len()];
        Self {
            depth,
            regions,
            key,
        }
    }
}

/// One calibrated image with optional ground-truth depth.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraView {
    pub view_id: u32,
    pub intrinsics: Intrinsics,
    pub pose: Pose,
    pub image: RgbImage,
    pub gt_depth: Option<DepthMap>,
}

impl CameraView {
    pub fn width(&self) -> usize {
        self.image.width
    }

    pub fn height(&self) -> usize {
        self.image.height
    }

    /// Round color to 8 bits and depth to float32, matching on-disk storage.
    pub fn quantize_for_storage(&mut self) {
        self.image.quantize_8bit();
        if let Some(d) = &mut self.gt_depth {
            d.quantize_f32();
        }
    }
}

/// Ray-trace a view of `spec`: flat albedo color and z-depth of the nearest
/// hit. Missed pixels get the background color and an invalid depth.
pub fn trace_scene(
    spec: &SceneSpec,
    intrinsics: &Intrinsics,
    pose: &Pose,
    width: usize,
    height: usize,
    view_id: u32,
) -> Result<CameraView, GeometryError> {
    let hits = spec.trace_hits(intrinsics, pose, width, height)?;
    let mut image = RgbImage::filled(width, height, spec.background_color);
    let mut depth = DepthMap::new(width, height, DepthFrame::Absolute);
    for (i, h) in hits.into_iter().enumerate() {
        if let Some((prim, z)) = h {
            image.pixels[i] = spec.primitives[prim].albedo;
            depth.values[i] = z;
            depth.validity[i] = true;
        }
    }
    Ok(CameraView {
        view_id,
        intrinsics: *intrinsics,
        pose: *pose,
        image,
        gt_depth: Some(depth),
    })
}

/// Cameras on a ring around the scene center, all looking at it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OrbitRig {
    pub count: usize,
    pub radius: f64,
    /// Height of the ring above the scene center.
    pub elevation: f64,
    pub fov_x: f64,
    pub width: usize,
    pub height: usize,
    /// Azimuth of the first camera, radians.
    pub phase: f64,
}

impl OrbitRig {
    pub fn new(count: usize, width: usize, height: usize) -> Self {
        Self {
            count,
            radius: 4.5,
            elevation: 2.2,
            fov_x: 0.9,
            width,
            height,
            phase: 0.0,
        }
    }

    /// The same ring shifted by half a camera spacing: a held-out split.
    pub fn interleaved(&self) -> Self {
        Self {
            phase: self.phase + std::f64::consts::PI / self.count as f64,
            ..*self
        }
    }

    pub fn poses(&self, spec: &SceneSpec) -> Result<Vec<Pose>, GeometryError> {
        let target = spec.bounds.center();
        (0..self.count)
            .map(|i| {
                let a = self.phase + std::f64::consts::TAU * i as f64 / self.count as f64;
                let eye = target
                    + Vector3::new(self.radius * a.cos(), self.elevation, self.radius * a.sin());
                Pose::look_at(eye, target, Vector3::new(0.0, 1.0, 0.0))
            })
            .collect()
    }

    pub fn intrinsics(&self) -> Result<Intrinsics, GeometryError> {
        Intrinsics::from_fov(self.fov_x, self.width, self.height)
    }

    /// Trace every camera of the rig, quantized for storage.
    pub fn trace(&self, spec: &SceneSpec, first_id: u32) -> Result<Vec<CameraView>, GeometryError> {
        let k = self.intrinsics()?;
        self.poses(spec)?
            .iter()
            .enumerate()
            .map(|(i, pose)| {
                let mut v = trace_scene(spec, &k, pose, self.width, self.height, first_id + i as u32)?;
                v.quantize_for_storage();
                Ok(v)
            })
            .collect()
    }
}
