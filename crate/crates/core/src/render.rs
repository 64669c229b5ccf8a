//! Camera-ray batches over a radiance field: forward rendering to color,
//! z-depth and opacity, and the matching backward pass.
//!
//! The backward pass recomputes each ray's forward march, produces the
//! per-sample gradients in parallel, and scatters them into the gradient
//! buffer serially in ray order, so results do not depend on the number of
//! worker threads.

use rayon::prelude::*;

use crate::align::PatchSpec;
use crate::camera::{pixel_ray, Intrinsics, Pose, Ray};
use crate::field::{scatter, Corners, FieldError, GridGradient, Marcher, RadianceFieldGrid, RayGrad, RayOutput, Sampling, NODE_PARAMS};
use crate::maps::{DepthFrame, DepthMap, RgbImage};

/// A camera ray clipped to the grid, plus the factor converting ray
/// distance to z-depth (`direction · optical axis`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelRay {
    pub pixel: (usize, usize),
    /// `None` when the ray misses the grid bounds.
    pub ray: Option<Ray>,
    pub z_factor: f64,
}

pub fn camera_rays(
    grid: &RadianceFieldGrid,
    intrinsics: &Intrinsics,
    pose: &Pose,
    width: usize,
    height: usize,
    pixels: impl IntoIterator<Item = (usize, usize)>,
) -> Result<Vec<PixelRay>, FieldError> {
    let axis = pose.forward();
    pixels
        .into_iter()
        .map(|(x, y)| {
            let ray = pixel_ray(intrinsics, pose, width, height, x, y)?;
            Ok(PixelRay {
                pixel: (x, y),
                z_factor: ray.direction.dot(&axis),
                ray: ray.clip(grid.bounds()),
            })
        })
        .collect()
}

/// Forward outputs of a batch. `outputs[i].depth` is z-depth.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedBatch {
    pub outputs: Vec<RayOutput>,
    pub sampling: Sampling,
    pub n_samples: usize,
}

impl RenderedBatch {
    pub fn len(&self) -> usize {
        self.outputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.outputs.is_empty()
    }

    pub fn depths(&self) -> Vec<f64> {
        self.outputs.iter().map(|o| o.depth).collect()
    }

    /// Color over a constant background: `C + (1 − A)·bg`.
    pub fn composited(&self, i: usize, background: [f64; 3]) -> [f64; 3] {
        let o = &self.outputs[i];
        let a = 1.0 - o.opacity;
        [
            o.color[0] + a * background[0],
            o.color[1] + a * background[1],
            o.color[2] + a * background[2],
        ]
    }
}

fn check_samples(n_samples: usize) -> Result<(), FieldError> {
    if n_samples < 2 {
        return Err(FieldError::Argument(format!(
            "n_samples = {n_samples}, need at least 2"
        )));
    }
    Ok(())
}

fn march_one(
    m: &mut Marcher,
    grid: &RadianceFieldGrid,
    i: usize,
    r: &PixelRay,
    n: usize,
    sampling: Sampling,
) -> RayOutput {
    match &r.ray {
        None => RayOutput::default(),
        Some(ray) => {
            let mut o = m.march(grid, ray, n, |k| sampling.offset(i, k));
            o.depth *= r.z_factor;
            o
        }
    }
}

pub fn render_batch(
    grid: &RadianceFieldGrid,
    rays: &[PixelRay],
    n_samples: usize,
    sampling: Sampling,
) -> Result<RenderedBatch, FieldError> {
    check_samples(n_samples)?;
    let outputs = rays
        .par_iter()
        .enumerate()
        .map_init(Marcher::new, |m, (i, r)| march_one(m, grid, i, r, n_samples, sampling))
        .collect();
    Ok(RenderedBatch {
        outputs,
        sampling,
        n_samples,
    })
}

/// Rays per parallel block of the backward pass.
const BACKWARD_BLOCK: usize = 256;

/// Accumulate `Σ_i dL/d(outputs_i) · d(outputs_i)/dparams` into `grad`.
/// `upstream[i].depth` is the gradient with respect to z-depth.
pub fn backward_batch(
    grid: &RadianceFieldGrid,
    rays: &[PixelRay],
    forward: &RenderedBatch,
    upstream: &[RayGrad],
    sampling: Sampling,
    grad: &mut GridGradient,
) -> Result<(), FieldError> {
    if sampling != forward.sampling {
        return Err(FieldError::SamplingMismatch {
            forward: forward.sampling,
            backward: sampling,
        });
    }
    if rays.len() != forward.len() || upstream.len() != rays.len() {
        return Err(FieldError::Argument(format!(
            "batch sizes disagree: {} rays, {} outputs, {} gradients",
            rays.len(),
            forward.len(),
            upstream.len()
        )));
    }
    if grad.nodes.len() != grid.node_count() {
        return Err(FieldError::Argument("gradient buffer does not match grid".into()));
    }
    let n = forward.n_samples;
    let mut start = 0;
    while start < rays.len() {
        let end = (start + BACKWARD_BLOCK).min(rays.len());
        let records: Vec<Vec<(Corners, [f64; NODE_PARAMS])>> = (start..end)
            .into_par_iter()
            .map_init(Marcher::new, |m, i| {
                let r = &rays[i];
                let (Some(ray), g) = (&r.ray, upstream[i]) else {
                    return Vec::new();
                };
                if g.is_zero() {
                    return Vec::new();
                }
                m.march(grid, ray, n, |k| sampling.offset(i, k));
                let g = RayGrad {
                    depth: g.depth * r.z_factor,
                    ..g
                };
                let mut out = Vec::with_capacity(n);
                m.backprop_with(&g, |c, d| out.push((*c, d)));
                out
            })
            .collect();
        for ray_records in &records {
            for (c, d) in ray_records {
                scatter(&mut grad.nodes, c, d);
            }
        }
        start = end;
    }
    Ok(())
}

/// Rays and forward outputs for a set of pixels of one camera.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedPixels {
    pub rays: Vec<PixelRay>,
    pub batch: RenderedBatch,
}

impl RenderedPixels {
    pub fn backward(
        &self,
        grid: &RadianceFieldGrid,
        upstream: &[RayGrad],
        grad: &mut GridGradient,
    ) -> Result<(), FieldError> {
        backward_batch(grid, &self.rays, &self.batch, upstream, self.batch.sampling, grad)
    }
}

#[allow(clippy::too_many_arguments)]
pub fn render_pixels(
    grid: &RadianceFieldGrid,
    intrinsics: &Intrinsics,
    pose: &Pose,
    width: usize,
    height: usize,
    pixels: impl IntoIterator<Item = (usize, usize)>,
    n_samples: usize,
    sampling: Sampling,
) -> Result<RenderedPixels, FieldError> {
    let rays = camera_rays(grid, intrinsics, pose, width, height, pixels)?;
    let batch = render_batch(grid, &rays, n_samples, sampling)?;
    Ok(RenderedPixels { rays, batch })
}

/// Render the lattice of `patch`; outputs are in the patch's row-major order.
#[allow(clippy::too_many_arguments)]
pub fn render_patch(
    grid: &RadianceFieldGrid,
    intrinsics: &Intrinsics,
    pose: &Pose,
    width: usize,
    height: usize,
    patch: &PatchSpec,
    n_samples: usize,
    sampling: Sampling,
) -> Result<RenderedPixels, FieldError> {
    if !patch.fits(width, height) {
        return Err(FieldError::Argument(format!(
            "patch {patch:?} does not fit a {width}x{height} image"
        )));
    }
    render_pixels(grid, intrinsics, pose, width, height, patch.pixels(), n_samples, sampling)
}

/// A full rendered view.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewRender {
    /// Composited over the background.
    pub image: RgbImage,
    /// Expected z-depth; every pixel is marked valid.
    pub depth: DepthMap,
    pub opacity: Vec<f64>,
}

#[allow(clippy::too_many_arguments)]
pub fn render_view(
    grid: &RadianceFieldGrid,
    intrinsics: &Intrinsics,
    pose: &Pose,
    width: usize,
    height: usize,
    n_samples: usize,
    background: [f64; 3],
) -> Result<ViewRender, FieldError> {
    let pixels = (0..height).flat_map(|y| (0..width).map(move |x| (x, y)));
    let r = render_pixels(grid, intrinsics, pose, width, height, pixels, n_samples, Sampling::Midpoint)?;
    let mut image = RgbImage::filled(width, height, [0.0; 3]);
    for i in 0..r.batch.len() {
        image.pixels[i] = r.batch.composited(i, background);
    }
    Ok(ViewRender {
        image,
        depth: DepthMap::from_values(width, height, r.batch.depths(), DepthFrame::Absolute),
        opacity: r.batch.outputs.iter().map(|o| o.opacity).collect(),
    })
}
