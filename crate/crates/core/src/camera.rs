//! Pinhole camera model, pixel rays and cross-view reprojection.
//!
//! Conventions: camera frame is x right, y down, z forward. Poses are
//! world-from-camera. Continuous pixel coordinates put the center of pixel
//! `(i, j)` at `(i + 0.5, j + 0.5)`.

use nalgebra::{Matrix3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

const ORTHONORMAL_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("rotation is not orthonormal with det +1 (deviation {0:e})")]
    InvalidRotation(f64),
    #[error("intrinsics must be upper-triangular with positive focal lengths")]
    InvalidIntrinsics,
    #[error("pixel ({x}, {y}) outside {width}x{height} image")]
    PixelOutOfBounds {
        x: usize,
        y: usize,
        width: usize,
        height: usize,
    },
    #[error("ray bounds must satisfy 0 < near < far (got {near}, {far})")]
    InvalidRayBounds { near: f64, far: f64 },
    #[error("camera center lies inside primitive {0}")]
    CameraInsidePrimitive(usize),
    #[error("invalid scene: {0}")]
    InvalidScene(String),
}

/// Intrinsic matrix `K`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    k: Matrix3<f64>,
    k_inv: Matrix3<f64>,
}

impl Intrinsics {
    pub fn new(k: Matrix3<f64>) -> Result<Self, GeometryError> {
        let upper = k[(1, 0)] == 0.0 && k[(2, 0)] == 0.0 && k[(2, 1)] == 0.0;
        if !upper || !(k[(0, 0)] > 0.0) || !(k[(1, 1)] > 0.0) || k[(2, 2)] != 1.0 {
            return Err(GeometryError::InvalidIntrinsics);
        }
        let k_inv = k.try_inverse().ok_or(GeometryError::InvalidIntrinsics)?;
        Ok(Self { k, k_inv })
    }

    pub fn from_focal(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self, GeometryError> {
        Self::new(Matrix3::new(fx, 0.0, cx, 0.0, fy, cy, 0.0, 0.0, 1.0))
    }

    /// Square-pixel intrinsics for a horizontal field of view in radians,
    /// principal point at the image center.
    pub fn from_fov(fov_x: f64, width: usize, height: usize) -> Result<Self, GeometryError> {
        let f = 0.5 * width as f64 / (0.5 * fov_x).tan();
        Self::from_focal(f, f, 0.5 * width as f64, 0.5 * height as f64)
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.k
    }

    pub fn inverse(&self) -> &Matrix3<f64> {
        &self.k_inv
    }

    /// Camera-frame direction (z = 1) through a continuous pixel coordinate.
    pub fn unproject(&self, p: [f64; 2]) -> Vector3<f64> {
        self.k_inv * Vector3::new(p[0], p[1], 1.0)
    }

    /// Continuous pixel coordinate and z of a camera-frame point.
    pub fn project(&self, x_cam: &Vector3<f64>) -> ([f64; 2], f64) {
        let h = self.k * x_cam;
        ([h.x / h.z, h.y / h.z], x_cam.z)
    }
}

fn check_rotation(r: &Matrix3<f64>) -> Result<(), GeometryError> {
    let dev = (r.transpose() * r - Matrix3::identity()).abs().max();
    let det_dev = (r.determinant() - 1.0).abs();
    let worst = dev.max(det_dev);
    if worst.is_finite() && worst <= ORTHONORMAL_TOL {
        Ok(())
    } else {
        Err(GeometryError::InvalidRotation(worst))
    }
}

/// World-from-camera rigid transform.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Pose {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self, GeometryError> {
        check_rotation(&rotation)?;
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Camera at `eye` looking at `target`; `up` is the world up direction.
    pub fn look_at(
        eye: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
    ) -> Result<Self, GeometryError> {
        let z = (target - eye).normalize();
        let x = (-up).cross(&z);
        if x.norm() < 1e-12 {
            return Err(GeometryError::InvalidScene(
                "look_at direction parallel to up vector".into(),
            ));
        }
        let x = x.normalize();
        let y = z.cross(&x);
        Self::new(Matrix3::from_columns(&[x, y, z]), eye)
    }

    pub fn center(&self) -> Vector3<f64> {
        self.translation
    }

    /// Optical axis in world coordinates.
    pub fn forward(&self) -> Vector3<f64> {
        self.rotation.column(2).into_owned()
    }

    pub fn world_to_camera(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.transpose() * (x - self.translation)
    }

    pub fn camera_to_world(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * x + self.translation
    }

    /// Transform taking this camera's coordinates to `target`'s.
    pub fn relative_to(&self, target: &Pose) -> RelativePose {
        let rt = target.rotation.transpose();
        RelativePose {
            rotation: rt * self.rotation,
            translation: rt * (self.translation - target.translation),
        }
    }

    /// Normalized quaternion blend of rotations, linear blend of centers.
    pub fn interpolate(&self, other: &Pose, s: f64) -> Pose {
        let qa = UnitQuaternion::from_matrix(&self.rotation);
        let mut qb = UnitQuaternion::from_matrix(&other.rotation);
        if qa.coords.dot(&qb.coords) < 0.0 {
            qb = UnitQuaternion::new_unchecked(-qb.into_inner());
        }
        let q = qa.nlerp(&qb, s);
        Pose {
            rotation: q.to_rotation_matrix().into_inner(),
            translation: self.translation * (1.0 - s) + other.translation * s,
        }
    }

    /// Distance used to pick a neighbouring view: center distance, ties
    /// broken by rotation angle.
    pub fn distance(&self, other: &Pose) -> (f64, f64) {
        let r = self.rotation.transpose() * other.rotation;
        let cos = ((r.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
        ((self.translation - other.translation).norm(), cos.acos())
    }
}

/// `R_{i→l}`: maps camera-i coordinates into camera-l coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RelativePose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl RelativePose {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self, GeometryError> {
        check_rotation(&rotation)?;
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn apply(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * x + self.translation
    }

    /// `self` followed by `next`.
    pub fn then(&self, next: &RelativePose) -> RelativePose {
        RelativePose {
            rotation: next.rotation * self.rotation,
            translation: next.rotation * self.translation + next.translation,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vector3<f64>,
    pub direction: Vector3<f64>,
    pub near: f64,
    pub far: f64,
}

impl Ray {
    pub fn new(
        origin: Vector3<f64>,
        direction: Vector3<f64>,
        near: f64,
        far: f64,
    ) -> Result<Self, GeometryError> {
        if !(near > 0.0 && near < far) {
            return Err(GeometryError::InvalidRayBounds { near, far });
        }
        Ok(Self {
            origin,
            direction: direction.normalize(),
            near,
            far,
        })
    }

    pub fn at(&self, t: f64) -> Vector3<f64> {
        self.origin + self.direction * t
    }

    /// Restrict the ray to the part inside `aabb`; `None` if it misses.
    pub fn clip(&self, aabb: &Aabb) -> Option<Ray> {
        let (t0, t1) = aabb.intersect(&self.origin, &self.direction)?;
        let near = t0.max(self.near);
        let far = t1.min(self.far);
        (near < far).then_some(Ray { near, far, ..*self })
    }
}

/// Axis-aligned box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: Vector3<f64>,
    pub max: Vector3<f64>,
}

impl Aabb {
    pub fn new(min: Vector3<f64>, max: Vector3<f64>) -> Self {
        Self { min, max }
    }

    pub fn extent(&self) -> Vector3<f64> {
        self.max - self.min
    }

    pub fn diagonal(&self) -> f64 {
        self.extent().norm()
    }

    pub fn center(&self) -> Vector3<f64> {
        (self.min + self.max) * 0.5
    }

    pub fn is_degenerate(&self) -> bool {
        (0..3).any(|a| !(self.max[a] > self.min[a]))
    }

    pub fn contains(&self, x: &Vector3<f64>) -> bool {
        (0..3).all(|a| x[a] >= self.min[a] && x[a] <= self.max[a])
    }

    pub fn strictly_contains(&self, other: &Aabb) -> bool {
        (0..3).all(|a| other.min[a] > self.min[a] && other.max[a] < self.max[a])
    }

    /// Slab test; returns the parametric entry/exit distances (entry may be
    /// negative when the origin is inside).
    pub fn intersect(&self, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<(f64, f64)> {
        let mut t0 = f64::NEG_INFINITY;
        let mut t1 = f64::INFINITY;
        for a in 0..3 {
            if d[a] == 0.0 {
                if o[a] < self.min[a] || o[a] > self.max[a] {
                    return None;
                }
                continue;
            }
            let inv = 1.0 / d[a];
            let mut ta = (self.min[a] - o[a]) * inv;
            let mut tb = (self.max[a] - o[a]) * inv;
            if ta > tb {
                std::mem::swap(&mut ta, &mut tb);
            }
            t0 = t0.max(ta);
            t1 = t1.min(tb);
        }
        (t0 <= t1 && t1 > 0.0).then_some((t0, t1))
    }
}

/// Continuous coordinate of the center of integer pixel `(x, y)`.
pub fn pixel_center(x: usize, y: usize) -> [f64; 2] {
    [x as f64 + 0.5, y as f64 + 0.5]
}

pub const DEFAULT_NEAR: f64 = 1e-6;

/// Ray through the center of pixel `(x, y)`; unbounded far distance.
pub fn pixel_ray(
    intrinsics: &Intrinsics,
    pose: &Pose,
    width: usize,
    height: usize,
    x: usize,
    y: usize,
) -> Result<Ray, GeometryError> {
    if x >= width || y >= height {
        return Err(GeometryError::PixelOutOfBounds {
            x,
            y,
            width,
            height,
        });
    }
    let d_cam = intrinsics.unproject(pixel_center(x, y));
    Ok(Ray {
        origin: pose.translation,
        direction: (pose.rotation * d_cam).normalize(),
        near: DEFAULT_NEAR,
        far: f64::INFINITY,
    })
}

/// Projection of a world point into a view: continuous pixel and z-depth.
pub fn project_point(
    intrinsics: &Intrinsics,
    pose: &Pose,
    x_world: &Vector3<f64>,
) -> ([f64; 2], f64) {
    intrinsics.project(&pose.world_to_camera(x_world))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Visibility {
    Visible,
    /// Point lands at or behind the target camera plane.
    OutOfFrustum,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Reprojection {
    pub pixel: [f64; 2],
    pub depth: f64,
    pub visibility: Visibility,
}

impl Reprojection {
    /// Nearest pixel index in a `width × height` target image, if the
    /// point is in frustum and in bounds.
    pub fn nearest(&self, width: usize, height: usize) -> Option<(usize, usize)> {
        if self.visibility != Visibility::Visible {
            return None;
        }
        let [u, v] = self.pixel;
        if !(u >= 0.0 && v >= 0.0 && u < width as f64 && v < height as f64) {
            return None;
        }
        Some((u as usize, v as usize))
    }

    pub fn in_bounds(&self, width: usize, height: usize) -> bool {
        self.nearest(width, height).is_some()
    }
}

/// `p' ~ K (R · depth · K⁻¹ p + t)`; `depth` is the z-depth of `p` in the
/// source camera. The returned depth is the z-component in the target frame.
pub fn reproject(
    p: [f64; 2],
    depth: f64,
    intrinsics: &Intrinsics,
    rel: &RelativePose,
) -> Reprojection {
    let x_src = intrinsics.unproject(p) * depth;
    let x_dst = rel.apply(&x_src);
    if !(x_dst.z > 0.0) {
        return Reprojection {
            pixel: [f64::NAN, f64::NAN],
            depth: x_dst.z,
            visibility: Visibility::OutOfFrustum,
        };
    }
    let (pixel, z) = intrinsics.project(&x_dst);
    Reprojection {
        pixel,
        depth: z,
        visibility: Visibility::Visible,
    }
}
