//! Checks shared by the topic tests and the acceptance suite. Each check
//! returns `Err` with a description of the first violation.

#![allow(dead_code)]

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use radiant::ablation::{run_once, AblationSetup};
use radiant::align::{
    adaptation_loss, align_global, align_patchwise, fit_scale_shift, regularization_loss,
};
use radiant::camera::{pixel_center, reproject, Aabb, Intrinsics, Pose, Ray, RelativePose};
use radiant::confidence::build_mask_seen;
use radiant::field::{GridGradient, RadianceFieldGrid, RayGrad, RenderResult, Sampling};
use radiant::maps::{DepthFrame, DepthMap, RgbImage};
use radiant::optim::WarmupCosine;
use radiant::provider::{AmbiguityOracleConfig, DepthProvider, GeometrySource};
use radiant::render::{backward_batch, render_batch, PixelRay};
use radiant::scene::{trace_scene, OrbitRig, Perception, SceneSpec};
use radiant::trainer::{PatchConfig, TrainConfig};

pub type Check = Result<String, String>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

pub fn unit_cube() -> Aabb {
    Aabb::new(Vector3::new(-1.0, -1.0, -1.0), Vector3::new(1.0, 1.0, 1.0))
}

/// Grid over the unit cube with Gaussian raw parameters.
pub fn random_grid(rng: &mut ChaCha8Rng, res: usize) -> RadianceFieldGrid {
    let mut g = RadianceFieldGrid::new([res; 3], unit_cube(), 0.0, 0.0).unwrap();
    for (i, p) in g.params_mut().iter_mut().enumerate() {
        let spread = if i % 4 == 0 { 2.0 } else { 1.0 };
        *p = spread * normal(rng);
    }
    g
}

/// A ray from outside the unit cube aimed at a random interior point.
pub fn random_ray(rng: &mut ChaCha8Rng) -> Ray {
    let dir = Vector3::new(normal(rng), normal(rng), normal(rng)).normalize();
    let origin = dir * 3.0;
    let target = Vector3::new(
        rng.random_range(-0.8..0.8),
        rng.random_range(-0.8..0.8),
        rng.random_range(-0.8..0.8),
    );
    Ray::new(origin, target - origin, 0.5, 10.0).unwrap()
}

/// Composite a ray from scratch: samples at stratum midpoints of the
/// clipped interval, `α = 1 − e^{−σδ}`, `T_k = exp(−Σ_{j<k} σ_j δ)`.
pub fn composite_oracle(grid: &RadianceFieldGrid, ray: &Ray, n: usize) -> ([f64; 3], f64, f64) {
    let Some(r) = ray.clip(grid.bounds()) else {
        return ([0.0; 3], 0.0, 0.0);
    };
    let delta = (r.far - r.near) / n as f64;
    let (mut color, mut depth, mut opacity, mut optical) = ([0.0; 3], 0.0, 0.0, 0.0);
    for k in 0..n {
        let t = r.near + (k as f64 + 0.5) * delta;
        let s = grid.query(&r.at(t)).ok();
        let sigma = s.map_or(0.0, |s| s.sigma);
        let w = (-optical as f64).exp() * (1.0 - (-sigma * delta).exp());
        if let Some(s) = s {
            for c in 0..3 {
                color[c] += w * s.color[c];
            }
        }
        depth += w * t;
        opacity += w;
        optical += sigma * delta;
    }
    (color, depth, opacity)
}

/// Weights non-negative, total at most one, transmittance non-increasing,
/// and outputs equal to the independent composite.
pub fn check_render_invariants(grid: &RadianceFieldGrid, ray: &Ray, r: &RenderResult, n: usize) -> Result<(), String> {
    if let Some(w) = r.weights.iter().find(|w| !(**w >= 0.0)) {
        return Err(format!("negative weight {w}"));
    }
    let total: f64 = r.weights.iter().sum();
    if total > 1.0 + 1e-6 {
        return Err(format!("weights sum to {total}"));
    }
    if let Some(k) = (1..r.transmittance.len()).find(|&k| r.transmittance[k] > r.transmittance[k - 1]) {
        return Err(format!("transmittance rises at sample {k}"));
    }
    let (color, depth, opacity) = composite_oracle(grid, ray, n);
    let err = (0..3)
        .map(|c| (color[c] - r.color[c]).abs())
        .fold((depth - r.depth).abs().max((opacity - r.accumulated_opacity).abs()), f64::max);
    if err > 1e-12 {
        return Err(format!("composite differs from the oracle by {err:e}"));
    }
    Ok(())
}

pub fn pixel_rays(grid: &RadianceFieldGrid, rays: &[Ray], z: &[f64]) -> Vec<PixelRay> {
    rays.iter()
        .zip(z)
        .enumerate()
        .map(|(i, (r, &z))| PixelRay {
            pixel: (i, 0),
            ray: r.clip(grid.bounds()),
            z_factor: z,
        })
        .collect()
}

/// `Σ_i g_i · outputs_i` for a fixed upstream gradient.
fn scalar_loss(grid: &RadianceFieldGrid, rays: &[PixelRay], up: &[RayGrad], n: usize) -> f64 {
    let b = render_batch(grid, rays, n, Sampling::Midpoint).unwrap();
    b.outputs
        .iter()
        .zip(up)
        .map(|(o, g)| {
            g.color[0] * o.color[0] + g.color[1] * o.color[1] + g.color[2] * o.color[2] + g.depth * o.depth + g.opacity * o.opacity
        })
        .sum()
}

/// Largest relative error between the analytic gradient and central
/// differences with step `h`, over every raw parameter. Differences are
/// relative to the larger magnitude, with an absolute floor of 1e-6.
pub fn gradient_error(grid: &RadianceFieldGrid, rays: &[PixelRay], up: &[RayGrad], n: usize, h: f64) -> f64 {
    let b = render_batch(grid, rays, n, Sampling::Midpoint).unwrap();
    let mut g = GridGradient::zeros_like(grid);
    backward_batch(grid, rays, &b, up, Sampling::Midpoint, &mut g).unwrap();
    let mut worst: f64 = 0.0;
    let mut probe = grid.clone();
    for i in 0..grid.params().len() {
        let x = grid.params()[i];
        probe.params_mut()[i] = x + h;
        let plus = scalar_loss(&probe, rays, up, n);
        probe.params_mut()[i] = x - h;
        let minus = scalar_loss(&probe, rays, up, n);
        probe.params_mut()[i] = x;
        let fd = (plus - minus) / (2.0 * h);
        let a = g.values()[i];
        worst = worst.max((a - fd).abs() / a.abs().max(fd.abs()).max(1e-6));
    }
    worst
}

pub enum Head {
    Color,
    Depth,
}

/// Finite-difference check on `grids` random 4³ grids with `rays` rays
/// each, for one output head.
pub fn check_gradients(seed: u64, grids: usize, rays: usize, head: Head) -> Result<f64, String> {
    let mut worst: f64 = 0.0;
    for g in 0..grids {
        let mut r = rng(seed ^ (g as u64) << 8);
        let grid = random_grid(&mut r, 4);
        let rs: Vec<Ray> = (0..rays).map(|_| random_ray(&mut r)).collect();
        let z: Vec<f64> = (0..rays).map(|_| r.random_range(0.6..1.0)).collect();
        let up: Vec<RayGrad> = (0..rays)
            .map(|_| match head {
                Head::Color => RayGrad {
                    color: [normal(&mut r), normal(&mut r), normal(&mut r)],
                    depth: 0.0,
                    opacity: 0.0,
                },
                Head::Depth => RayGrad {
                    color: [0.0; 3],
                    depth: normal(&mut r),
                    opacity: 0.0,
                },
            })
            .collect();
        let e = gradient_error(&grid, &pixel_rays(&grid, &rs, &z), &up, 24, 1e-4);
        worst = worst.max(e);
    }
    if worst < 1e-4 {
        Ok(worst)
    } else {
        Err(format!("max relative error {worst:e}"))
    }
}

/// Two views of the two-box scene 45° apart, traced without quantization.
pub fn two_views(width: usize) -> (SceneSpec, Intrinsics, Pose, Pose) {
    let spec = SceneSpec::two_box();
    let rig = OrbitRig::new(8, width, width);
    let poses = rig.poses(&spec).unwrap();
    (spec, rig.intrinsics().unwrap(), poses[0], poses[1])
}

/// For every pixel of view `a` with a surface hit, reproject its traced
/// depth into view `b`. Where `b`'s own ray through the reprojected point
/// reaches the same surface point, the reprojected z must equal `b`'s
/// traced z. Returns (co-visible pixel count, max error).
pub fn reprojection_agreement(width: usize) -> (usize, f64) {
    let (spec, k, pa, pb) = two_views(width);
    let va = trace_scene(&spec, &k, &pa, width, width, 0).unwrap();
    let depth = va.gt_depth.unwrap();
    let rel = pa.relative_to(&pb);
    let (mut count, mut worst) = (0, 0.0f64);
    for y in 0..width {
        for x in 0..width {
            let Some(z) = depth.get(x, y) else { continue };
            let r = reproject(pixel_center(x, y), z, &k, &rel);
            if r.nearest(width, width).is_none() {
                continue;
            }
            let point = pa.camera_to_world(&(k.unproject(pixel_center(x, y)) * z));
            let dir = pb.rotation * k.unproject(r.pixel);
            let Some((_, t)) = spec.first_hit(&pb.translation, &dir.normalize()) else {
                continue;
            };
            let hit = pb.translation + dir.normalize() * t;
            if (hit - point).norm() > 1e-3 {
                continue; // occluded in b
            }
            let z_b = pb.world_to_camera(&hit).z;
            count += 1;
            worst = worst.max((z_b - r.depth).abs());
        }
    }
    (count, worst)
}

pub fn depth_from(values: Vec<f64>, width: usize) -> DepthMap {
    let h = values.len() / width;
    DepthMap::from_values(width, h, values, DepthFrame::Absolute)
}

/// A random two-view configuration: traced depth for both views plus a
/// distorted relative depth for the first.
pub struct MaskCase {
    pub k: Intrinsics,
    pub rel: RelativePose,
    pub d_star_i: DepthMap,
    pub d_bar_i: DepthMap,
    pub d_bar_l: DepthMap,
}

pub fn mask_case(seed: u64, width: usize) -> MaskCase {
    let mut r = rng(seed);
    let spec = SceneSpec::two_box();
    let rig = OrbitRig {
        phase: r.random_range(0.0..std::f64::consts::TAU),
        ..OrbitRig::new(12, width, width)
    };
    let k = rig.intrinsics().unwrap();
    let poses = rig.poses(&spec).unwrap();
    let hop = r.random_range(1..3);
    let noisy = |d: &DepthMap, r: &mut ChaCha8Rng| {
        let mut d = d.clone();
        d.values.iter_mut().for_each(|v| *v += 0.05 * normal(r));
        d
    };
    let vi = trace_scene(&spec, &k, &poses[0], width, width, 0).unwrap();
    let vl = trace_scene(&spec, &k, &poses[hop], width, width, 1).unwrap();
    let perception = spec.perceive(&k, &poses[0], width, width, seed).unwrap();
    let gt_i = vi.gt_depth.unwrap();
    let gt_l = vl.gt_depth.unwrap();
    MaskCase {
        k,
        rel: poses[0].relative_to(&poses[hop]),
        d_star_i: AmbiguityOracleConfig::ambiguous(seed).apply(&perception),
        d_bar_i: noisy(&gt_i, &mut r),
        d_bar_l: noisy(&gt_l, &mut r),
    }
}

impl MaskCase {
    pub fn mask(&self, tau: f64) -> Vec<bool> {
        build_mask_seen(&self.d_star_i, &self.d_bar_i, &self.d_bar_l, &self.k, &self.rel, tau).values
    }
}

/// Masks nest as the threshold grows, on `configs` random configurations.
pub fn check_tau_monotone(configs: u64) -> Check {
    let mut total_pairs = 0;
    for seed in 0..configs {
        let case = mask_case(seed, 24);
        let taus = [0.01, 0.05, 0.1, 0.3, 1.0, 3.0];
        let masks: Vec<Vec<bool>> = taus.iter().map(|&t| case.mask(t)).collect();
        for i in 1..masks.len() {
            if let Some(p) = (0..masks[i].len()).find(|&p| masks[i - 1][p] && !masks[i][p]) {
                return Err(format!("config {seed}: pixel {p} accepted at tau {} but not {}", taus[i - 1], taus[i]));
            }
            total_pairs += 1;
        }
        if masks[0] == masks[masks.len() - 1] {
            return Err(format!("config {seed}: thresholds never change the mask"));
        }
    }
    Ok(format!("{total_pairs} nested threshold pairs"))
}

/// With an identity relative pose and consistent maps every valid pixel is
/// accepted. Adding 10·tau to one pixel of either the relative depth or
/// the target depth flips that pixel and no other.
pub fn check_single_pixel_flip(seed: u64) -> Check {
    let mut r = rng(seed);
    let (w, h) = (16, 12);
    let k = Intrinsics::from_focal(14.0, 14.0, 8.0, 6.0).unwrap();
    let d_bar = depth_from((0..w * h).map(|_| r.random_range(2.0..6.0)).collect(), w);
    let d_star = depth_from(d_bar.values.iter().map(|v| 0.4 * v - 0.3).collect(), w);
    let tau = 0.1;
    let id = RelativePose::identity();
    let before = build_mask_seen(&d_star, &d_bar, &d_bar, &k, &id, tau).values;
    if before.iter().any(|v| !v) {
        return Err("consistent maps reject a pixel".into());
    }
    let p = r.random_range(0..w * h);
    let mut star = d_star.clone();
    star.values[p] += 10.0 * tau;
    let mut target = d_bar.clone();
    target.values[p] += 10.0 * tau;
    for (name, after) in [
        ("relative", build_mask_seen(&star, &d_bar, &d_bar, &k, &id, tau).values),
        ("target", build_mask_seen(&d_star, &d_bar, &target, &k, &id, tau).values),
    ] {
        let flipped: Vec<usize> = (0..w * h).filter(|&i| before[i] != after[i]).collect();
        if flipped != vec![p] {
            return Err(format!("{name} depth perturbed at {p}, flipped {flipped:?}"));
        }
    }
    Ok(format!("pixel {p} flipped alone"))
}

/// Per-tile and whole-image alignment of the distorted two-box depth to
/// ground truth, scored on the pixels both produce.
pub fn patch_vs_global(seed: u64, width: usize, tile: usize) -> (f64, f64) {
    let spec = SceneSpec::two_box();
    let rig = OrbitRig::new(8, width, width);
    let k = rig.intrinsics().unwrap();
    let pose = rig.poses(&spec).unwrap()[0];
    let perception = spec.perceive(&k, &pose, width, width, seed).unwrap();
    let distorted = AmbiguityOracleConfig::ambiguous(seed).apply(&perception);
    let gt = &perception.depth;
    let patch = align_patchwise(&distorted, gt, tile).unwrap();
    let mut global = align_global(&distorted, gt).unwrap();
    for i in 0..global.values.len() {
        global.validity[i] &= patch.validity[i];
    }
    (radiant::align::mean_abs_error(&patch, gt), radiant::align::mean_abs_error(&global, gt))
}

/// Least-squares objective at `(w, q)` from sufficient statistics.
fn sse(stats: &[f64; 6], w: f64, q: f64) -> f64 {
    let [n, s, t, ss, st, tt] = *stats;
    w * w * ss + 2.0 * w * q * s + n * q * q - 2.0 * w * st - 2.0 * q * t + tt
}

/// Exact recovery on noiseless data and no worse than a 401×401 grid
/// search on noisy patches.
pub fn check_least_squares(patches: usize) -> Check {
    let mut r = rng(11);
    let mut worst_exact: f64 = 0.0;
    let mut margin = f64::INFINITY;
    for _ in 0..patches {
        let n = 64;
        let (w, q) = (r.random_range(0.2..2.5), r.random_range(-1.5..1.5));
        let src: Vec<f64> = (0..n).map(|_| r.random_range(0.5..5.0)).collect();
        let mask = vec![true; n];
        let exact: Vec<f64> = src.iter().map(|s| w * s + q).collect();
        let fit = fit_scale_shift(&src, &exact, &mask).map_err(|e| e.to_string())?;
        worst_exact = worst_exact.max((fit.w - w).abs()).max((fit.q - q).abs());

        let noisy: Vec<f64> = exact.iter().map(|t| t + 0.2 * normal(&mut r)).collect();
        let fit = fit_scale_shift(&src, &noisy, &mask).map_err(|e| e.to_string())?;
        let mut stats = [n as f64, 0.0, 0.0, 0.0, 0.0, 0.0];
        for (s, t) in src.iter().zip(&noisy) {
            stats[1] += s;
            stats[2] += t;
            stats[3] += s * s;
            stats[4] += s * t;
            stats[5] += t * t;
        }
        let direct: f64 = src.iter().zip(&noisy).map(|(s, t)| (fit.apply(*s) - t).powi(2)).sum();
        let mut best = f64::INFINITY;
        for i in 0..401 {
            let gw = 3.0 * i as f64 / 400.0;
            for j in 0..401 {
                let gq = -3.0 + 6.0 * j as f64 / 400.0;
                best = best.min(sse(&stats, gw, gq));
            }
        }
        margin = margin.min(best - direct);
    }
    if worst_exact > 1e-9 {
        return Err(format!("noiseless recovery error {worst_exact:e}"));
    }
    if margin < 0.0 {
        return Err(format!("grid search beat the fit by {:e}", -margin));
    }
    Ok(format!("exact error {worst_exact:.1e}, smallest margin over grid {margin:.2e}"))
}

/// A view of the two-box scene with its perception.
pub struct Case {
    pub perception: Perception,
    pub target: DepthMap,
    pub image: RgbImage,
}

pub fn two_box_case(width: usize) -> Case {
    let scene = SceneSpec::two_box();
    let view = OrbitRig::new(4, width, width).trace(&scene, 0).unwrap().remove(0);
    Case {
        perception: scene.seen(&view).unwrap(),
        target: view.gt_depth.clone().unwrap(),
        image: view.image,
    }
}

pub fn ramp_case(width: usize) -> Case {
    let v = (0..width * width)
        .map(|i| 3.0 + 0.08 * (i % width) as f64 + 0.04 * (i / width) as f64)
        .collect();
    let d = depth_from(v, width);
    Case {
        perception: Perception::from_depth(d.clone(), 1),
        target: d,
        image: RgbImage::filled(width, width, [0.0; 3]),
    }
}

pub fn noiseless(region_affines: Vec<(f64, f64)>, scale: f64, shift: f64) -> AmbiguityOracleConfig {
    AmbiguityOracleConfig {
        global_scale: scale,
        global_shift: shift,
        region_affines,
        convexity_warp: 0.0,
        depth_max: 8.0,
        noise_sigma: 0.0,
        seed: 0,
    }
}

pub fn mean_abs(a: &DepthMap, b: &DepthMap) -> f64 {
    radiant::align::mean_abs_error(a, b)
}

pub fn predict(p: &DepthProvider, case: &Case) -> DepthMap {
    p.predict(&case.image, &case.perception).unwrap().depth
}

/// Adapt toward the frozen target with the adaptation loss plus
/// `reg_coeff` times the regularizer against the map at entry, both over
/// the whole image.
pub fn adapt(provider: &mut DepthProvider, case: &Case, steps: usize, reg_coeff: f64, lr: impl Fn(usize) -> f64) {
    let init = predict(provider, case);
    let (w, h) = (init.width, init.height);
    let pixels: Vec<(usize, usize)> = (0..h).flat_map(|y| (0..w).map(move |x| (x, y))).collect();
    let mask: Vec<bool> = (0..w * h).map(|i| init.validity[i] && case.target.validity[i]).collect();
    let n = mask.iter().filter(|m| **m).count() as f64;
    for step in 0..steps {
        let pred = provider.predict(&case.image, &case.perception).unwrap();
        let mut g = adaptation_loss(&case.target.values, &pred.depth.values, &mask).grad();
        if reg_coeff > 0.0 {
            let r = regularization_loss(&init.values, &pred.depth.values, &mask);
            for (a, b) in g.iter_mut().zip(&r.grad) {
                *a += reg_coeff * b;
            }
        }
        g.iter_mut().for_each(|v| *v /= n);
        let mut out = vec![0.0; provider.correction.params().len()];
        provider.correction.backward(&pred.base, &pixels, &g, &mut out);
        provider.adapt_step(&out, lr(step)).unwrap();
    }
}

/// Mean residual of the best affine map from `init` to `pred` over `mask`.
pub fn affine_residual(init: &DepthMap, pred: &DepthMap, mask: &[bool]) -> f64 {
    let fit = fit_scale_shift(&init.values, &pred.values, mask).unwrap();
    let (mut s, mut n) = (0.0, 0);
    for i in 0..mask.len() {
        if mask[i] {
            s += (fit.apply(init.values[i]) - pred.values[i]).abs();
            n += 1;
        }
    }
    s / n as f64
}

pub fn cosine(base: f64, warmup: usize, total: usize) -> impl Fn(usize) -> f64 {
    move |k| base * WarmupCosine { warmup, total }.multiplier(k)
}

/// Pixels of the two-box view covered by the floor.
pub fn floor_mask(case: &Case) -> Vec<bool> {
    (0..case.target.values.len())
        .map(|i| case.target.validity[i] && case.perception.regions[i] == Some(0))
        .collect()
}

/// The eight-view two-box setup used for end-to-end comparisons.
pub fn e2e_setup(width: usize) -> AblationSetup {
    let scene = SceneSpec::two_box();
    let rig = OrbitRig::new(8, width, width);
    AblationSetup {
        train_views: rig.trace(&scene, 0).unwrap(),
        test_views: rig.interleaved().trace(&scene, 100).unwrap(),
        scene,
        oracle: AmbiguityOracleConfig::ambiguous(0),
        correction_nodes: (8, 8),
        eval_samples: 48,
    }
}

pub fn e2e_config(steps: usize, background: [f64; 3]) -> TrainConfig {
    TrainConfig {
        total_steps: steps,
        unseen_warmup: steps / 4,
        pixel_batch: 256,
        seen_patch: PatchConfig { size: 16, stride: 1 },
        unseen_patch: PatchConfig { size: 12, stride: 3 },
        n_samples: 48,
        grid_resolution: 32,
        background,
        lr_field: 0.05,
        ..TrainConfig::default()
    }
}

/// Photometric-only baseline against the full loop on each seed:
/// `(seed, baseline rmse, full rmse, baseline psnr, full psnr)`.
pub fn e2e_pairs(steps: usize, seeds: &[u64]) -> Result<Vec<(u64, f64, f64, f64, f64)>, String> {
    let setup = e2e_setup(32);
    let full = e2e_config(steps, setup.scene.background_color);
    let base = full.clone().photometric_only();
    seeds
        .iter()
        .map(|&s| {
            let (a, _) = run_once(&setup, &base, s)?;
            let (e, _) = run_once(&setup, &full, s)?;
            Ok((s, a.depth_rmse, e.depth_rmse, a.psnr, e.psnr))
        })
        .collect()
}

/// A short training run on four 16×16 views with every loss active.
pub fn small_config(steps: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        seed,
        total_steps: steps,
        unseen_warmup: steps / 3,
        pixel_batch: 64,
        seen_patch: PatchConfig { size: 8, stride: 1 },
        unseen_patch: PatchConfig { size: 6, stride: 2 },
        n_samples: 16,
        grid_resolution: 12,
        mask_refresh: 5,
        ..TrainConfig::default()
    }
}

/// Loss log bytes of a seeded run on a pool of `threads` workers.
pub fn loss_log_bytes(config: &TrainConfig, threads: usize) -> Vec<u8> {
    let scene = SceneSpec::two_box();
    let views = OrbitRig::new(4, 16, 16).trace(&scene, 0).unwrap();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
    pool.install(|| {
        let provider = DepthProvider::new(AmbiguityOracleConfig::ambiguous(config.seed), (4, 4)).unwrap();
        let field = config.initial_field(scene.bounds).unwrap();
        let out = radiant::trainer::train(&views, &scene, field, provider, config).unwrap();
        let mut bytes = Vec::new();
        out.log.write_csv(&mut bytes).unwrap();
        bytes
    })
}
