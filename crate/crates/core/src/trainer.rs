//! Complementary training of the radiance field and the depth provider.
//!
//! Every step sums, into one field update:
//! * the photometric loss on a random pixel batch from the seen views;
//! * seen-view depth distillation on a random patch of one seen view;
//! * after a warm-up, unseen-view distillation on a strided patch rendered
//!   from a pose interpolated between two seen views.
//!
//! The provider takes its own update in the same step from the adaptation
//! and regularization losses on the seen patch. Depth losses skip pixels
//! whose rendered opacity is below `opacity_threshold`, and all distillation
//! losses are gated by confidence masks built from periodically refreshed
//! full-view renders.
//!
//! Randomness is drawn from generators keyed by `(seed, step, purpose)`, so
//! configurations that toggle a component still sample the same pixels,
//! patches and poses.

use std::fmt;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::align::{
    adaptation_loss, distill_loss, distill_loss_with_fit, fit_scale_shift, regularization_loss, PatchSpec, ScaleShift,
};
use crate::camera::{Aabb, Intrinsics, Pose};
use crate::confidence::{build_mask_seen, default_tau, ConfidenceMask};
use crate::field::{FieldError, GridGradient, RadianceFieldGrid, RayGrad, Sampling};
use crate::maps::{DepthFrame, DepthMap, RgbImage};
use crate::metrics::{psnr, scene_depth_metrics, ssim, DepthMetricReport, MetricsError};
use crate::optim::{Adam, OptimError, WarmupCosine};
use crate::provider::{DepthProvider, GeometrySource, ProviderError};
use crate::render::{camera_rays, render_batch, render_patch, render_view, PixelRay, RenderedPixels};
use crate::scene::{CameraView, Perception};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("{0} view(s) given, ≥ 2 views required")]
    TooFewViews(usize),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("non-finite {loss} loss at step {step}")]
    NonFinite { step: usize, loss: LossName },
    #[error("no geometry available for view {0}")]
    MissingGeometry(u32),
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("field update refused: {0}")]
    Optim(#[from] OptimError),
    #[error("{0}")]
    Hook(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FitMode {
    /// Independent scale-shift per patch.
    Patch,
    /// One scale-shift per image, fitted on the full view.
    Global,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UnseenStrategy {
    /// Blend two random seen poses.
    InterpolatePoses,
    /// Perturb one seen camera around its look-at point.
    JitterSeen,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PatchConfig {
    pub size: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub total_steps: usize,
    pub lr_field: f64,
    pub lr_provider: f64,
    pub coeff_recon: f64,
    pub coeff_seen: f64,
    pub coeff_unseen: f64,
    /// `coeff_unseen` is 0 before this step.
    pub unseen_warmup: usize,
    pub coeff_mde: f64,
    pub coeff_reg: f64,
    pub adapt_provider: bool,
    pub use_confidence: bool,
    pub fit_mode: FitMode,
    pub unseen_strategy: UnseenStrategy,
    pub pixel_batch: usize,
    pub seen_patch: PatchConfig,
    pub unseen_patch: PatchConfig,
    /// Confidence threshold in world units; 5% of the scene diagonal when
    /// absent.
    pub tau: Option<f64>,
    pub n_samples: usize,
    pub opacity_threshold: f64,
    pub grid_resolution: usize,
    pub density_init: f64,
    pub color_init: f64,
    pub background: [f64; 3],
    /// Steps between refreshes of the full-view renders used by masks.
    pub mask_refresh: usize,
    /// Steps between checkpoint hook calls; 0 disables.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            total_steps: 4000,
            lr_field: 1e-2,
            lr_provider: 1e-3,
            coeff_recon: 1.0,
            coeff_seen: 0.01,
            coeff_unseen: 0.01,
            unseen_warmup: 1000,
            coeff_mde: 0.01,
            coeff_reg: 0.1,
            adapt_provider: true,
            use_confidence: true,
            fit_mode: FitMode::Patch,
            unseen_strategy: UnseenStrategy::InterpolatePoses,
            pixel_batch: 1024,
            seen_patch: PatchConfig { size: 64, stride: 1 },
            unseen_patch: PatchConfig { size: 128, stride: 3 },
            tau: None,
            n_samples: 64,
            opacity_threshold: 0.5,
            grid_resolution: 64,
            density_init: -2.0,
            color_init: 0.0,
            background: [1.0; 3],
            mask_refresh: 100,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    /// Photometric loss only.
    pub fn photometric_only(mut self) -> Self {
        self.coeff_seen = 0.0;
        self.coeff_unseen = 0.0;
        self.coeff_mde = 0.0;
        self.coeff_reg = 0.0;
        self.adapt_provider = false;
        self
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(self.lr_field > 0.0 && self.lr_provider > 0.0) {
            return bad("learning rates must be positive".into());
        }
        if self.unseen_warmup > self.total_steps {
            return bad(format!(
                "unseen_warmup {} exceeds total_steps {}",
                self.unseen_warmup, self.total_steps
            ));
        }
        if !(self.opacity_threshold > 0.0 && self.opacity_threshold <= 1.0) {
            return bad("opacity_threshold must lie in (0, 1]".into());
        }
        if self.n_samples < 2 {
            return bad("n_samples must be at least 2".into());
        }
        if self.pixel_batch == 0 {
            return bad("pixel_batch must be positive".into());
        }
        if self.grid_resolution < 2 {
            return bad("grid_resolution must be at least 2".into());
        }
        for (name, p) in [("seen_patch", self.seen_patch), ("unseen_patch", self.unseen_patch)] {
            if p.size == 0 || p.stride == 0 {
                return bad(format!("{name} size and stride must be positive"));
            }
        }
        let coeffs = [
            self.coeff_recon,
            self.coeff_seen,
            self.coeff_unseen,
            self.coeff_mde,
            self.coeff_reg,
        ];
        if coeffs.iter().any(|c| !(c.is_finite() && *c >= 0.0)) {
            return bad("loss coefficients must be finite and non-negative".into());
        }
        if self.tau.is_some_and(|t| !(t > 0.0)) {
            return bad("tau must be positive".into());
        }
        Ok(())
    }

    pub fn initial_field(&self, bounds: Aabb) -> Result<RadianceFieldGrid, FieldError> {
        RadianceFieldGrid::new([self.grid_resolution; 3], bounds, self.density_init, self.color_init)
    }

    fn provider_active(&self) -> bool {
        self.adapt_provider && (self.coeff_mde > 0.0 || self.coeff_reg > 0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossName {
    Recon,
    Seen,
    Unseen,
    Mde,
    Reg,
}

impl fmt::Display for LossName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossName::Recon => "recon",
            LossName::Seen => "seen",
            LossName::Unseen => "unseen",
            LossName::Mde => "mde",
            LossName::Reg => "reg",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub name: LossName,
    pub value: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossLog {
    pub records: Vec<LossRecord>,
}

impl LossLog {
    fn push(&mut self, step: usize, name: LossName, value: f64) {
        self.records.push(LossRecord { step, name, value });
    }

    pub fn values(&self, name: LossName) -> impl Iterator<Item = &LossRecord> {
        self.records.iter().filter(move |r| r.name == name)
    }

    /// `step,loss_name,value`, values printed with round-trip precision.
    pub fn write_csv(&self, mut out: impl Write) -> std::io::Result<()> {
        writeln!(out, "step,loss_name,value")?;
        for r in &self.records {
            writeln!(out, "{},{},{:?}", r.step, r.name, r.value)?;
        }
        Ok(())
    }
}

/// Counters describing how the depth losses behaved.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct TrainStats {
    pub steps: usize,
    /// Distillation terms dropped because the fit was degenerate.
    pub skipped_fits: usize,
    /// Fits with a negative scale.
    pub inverted_fits: usize,
    /// Unseen steps skipped because no geometry was available.
    pub unseen_skipped: usize,
    pub mean_seen_mask_coverage: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub field: RadianceFieldGrid,
    pub provider: DepthProvider,
    pub log: LossLog,
    pub stats: TrainStats,
}

#[derive(Debug, Clone, Copy)]
#[repr(u64)]
enum Purpose {
    Pixels = 1,
    PixelJitter,
    SeenPatch,
    SeenJitter,
    UnseenPose,
    UnseenJitter,
}

fn key(seed: u64, step: usize, purpose: Purpose) -> u64 {
    let mut z = seed
        .wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add((step as u64).wrapping_mul(0xbf58_476d_1ce4_e5b9))
        .wrapping_add((purpose as u64).wrapping_mul(0x94d0_49bb_1331_11eb));
    z ^= z >> 31;
    z = z.wrapping_mul(0xd6e8_feb8_6659_fd93);
    z ^ (z >> 32)
}

fn rng_for(seed: u64, step: usize, purpose: Purpose) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(key(seed, step, purpose))
}

/// Full-view render of a seen camera, refreshed periodically.
struct ViewCache {
    /// Rendered z-depth, invalid where opacity is below threshold.
    d_bar: DepthMap,
}

struct Context<'a> {
    views: &'a [CameraView],
    perceptions: Vec<Perception>,
    initial: Vec<DepthMap>,
    /// Nearest other seen view, for seen masks.
    partner: Vec<usize>,
    tau: f64,
    bounds_center: nalgebra::Vector3<f64>,
}

/// Lattice shrunk, if necessary, to fit the image.
fn fitted_patch(p: PatchConfig, width: usize, height: usize) -> (usize, usize) {
    let rows = p.size.min((height - 1) / p.stride + 1);
    let cols = p.size.min((width - 1) / p.stride + 1);
    (rows, cols)
}

fn random_patch(rng: &mut ChaCha8Rng, p: PatchConfig, width: usize, height: usize) -> PatchSpec {
    let (rows, cols) = fitted_patch(p, width, height);
    let fw = (cols - 1) * p.stride + 1;
    let fh = (rows - 1) * p.stride + 1;
    let x = rng.random_range(0..=width - fw);
    let y = rng.random_range(0..=height - fh);
    PatchSpec::new((x, y), (rows, cols), p.stride)
}

/// Rendered depth with pixels below the opacity threshold marked invalid.
pub fn gated(depth: &DepthMap, opacity: &[f64], threshold: f64) -> DepthMap {
    let mut d = depth.clone();
    for (v, a) in d.validity.iter_mut().zip(opacity) {
        *v = *v && *a >= threshold;
    }
    d
}

/// For each view, the nearest other view by pose distance: the target of its
/// seen-view confidence mask.
pub fn seen_partners(views: &[CameraView]) -> Vec<usize> {
    (0..views.len())
        .map(|i| {
            (0..views.len())
                .filter(|&j| j != i)
                .min_by(|&a, &b| {
                    let da = views[i].pose.distance(&views[a].pose);
                    let db = views[i].pose.distance(&views[b].pose);
                    da.0.total_cmp(&db.0).then(da.1.total_cmp(&db.1))
                })
                .unwrap_or(i)
        })
        .collect()
}

/// Train `field` and `provider` on the seen `views`. `hook` is called with
/// the step count every `checkpoint_every` steps and at the end.
pub fn train(
    views: &[CameraView],
    geometry: &dyn GeometrySource,
    field: RadianceFieldGrid,
    provider: DepthProvider,
    config: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    train_with_hook(views, geometry, field, provider, config, |_, _, _| Ok(()))
}

pub fn train_with_hook(
    views: &[CameraView],
    geometry: &dyn GeometrySource,
    mut field: RadianceFieldGrid,
    mut provider: DepthProvider,
    config: &TrainConfig,
    mut hook: impl FnMut(usize, &RadianceFieldGrid, &DepthProvider) -> Result<(), TrainError>,
) -> Result<TrainOutcome, TrainError> {
    if views.len() < 2 {
        return Err(TrainError::TooFewViews(views.len()));
    }
    config.validate()?;
    let mut log = LossLog::default();
    let mut stats = TrainStats::default();
    if config.total_steps == 0 {
        return Ok(TrainOutcome {
            field,
            provider,
            log,
            stats,
        });
    }

    let depth_active = config.coeff_seen > 0.0 || config.coeff_unseen > 0.0 || config.provider_active();
    let ctx = if depth_active {
        let perceptions = views
            .iter()
            .map(|v| geometry.seen(v).ok_or(TrainError::MissingGeometry(v.view_id)))
            .collect::<Result<Vec<_>, _>>()?;
        let inputs: Vec<_> = views.iter().zip(&perceptions).map(|(v, p)| (&v.image, p)).collect();
        let initial = provider.snapshot_initial(&inputs)?;
        let partner = seen_partners(views);
        Some(Context {
            views,
            perceptions,
            initial,
            partner,
            tau: config.tau.unwrap_or_else(|| default_tau(field.bounds().diagonal())),
            bounds_center: field.bounds().center(),
        })
    } else {
        None
    };

    let schedule = WarmupCosine::scaled(config.total_steps);
    let mut adam = Adam::new(field.params().len());
    let mut caches: Vec<ViewCache> = Vec::new();
    let mut coverage_sum = 0.0;
    let mut coverage_n = 0usize;

    for step in 0..config.total_steps {
        let mut grad = GridGradient::zeros_like(&field);

        if config.coeff_recon > 0.0 {
            let loss = recon_step(&field, views, config, step, &mut grad)?;
            check(step, LossName::Recon, loss)?;
            log.push(step, LossName::Recon, loss);
        }

        if let Some(ctx) = &ctx {
            if caches.is_empty() || step % config.mask_refresh.max(1) == 0 {
                caches = refresh_caches(&field, views, config)?;
            }
            let seen = seen_step(&field, &provider, ctx, &caches, config, step, &mut grad, &mut stats)?;
            coverage_sum += seen.coverage;
            coverage_n += 1;
            if config.coeff_seen > 0.0 {
                check(step, LossName::Seen, seen.seen)?;
                log.push(step, LossName::Seen, seen.seen);
            }
            if config.provider_active() {
                if config.coeff_mde > 0.0 {
                    check(step, LossName::Mde, seen.mde)?;
                    log.push(step, LossName::Mde, seen.mde);
                }
                if config.coeff_reg > 0.0 {
                    check(step, LossName::Reg, seen.reg)?;
                    log.push(step, LossName::Reg, seen.reg);
                }
                provider.adapt_step(&seen.provider_grad, config.lr_provider)?;
            }
            if config.coeff_unseen > 0.0 && step >= config.unseen_warmup {
                match unseen_step(&field, &provider, geometry, ctx, &caches, config, step, &mut grad, &mut stats)? {
                    Some(loss) => {
                        check(step, LossName::Unseen, loss)?;
                        log.push(step, LossName::Unseen, loss);
                    }
                    None => stats.unseen_skipped += 1,
                }
            }
        }

        let lr = config.lr_field * schedule.multiplier(step);
        adam.step(field.params_mut(), grad.values(), lr)?;
        stats.steps = step + 1;
        if config.checkpoint_every > 0 && (step + 1) % config.checkpoint_every == 0 {
            hook(step + 1, &field, &provider)?;
        }
    }
    if config.checkpoint_every == 0 || config.total_steps % config.checkpoint_every != 0 {
        hook(config.total_steps, &field, &provider)?;
    }
    stats.mean_seen_mask_coverage = if coverage_n > 0 { coverage_sum / coverage_n as f64 } else { 0.0 };
    Ok(TrainOutcome {
        field,
        provider,
        log,
        stats,
    })
}

fn check(step: usize, loss: LossName, value: f64) -> Result<(), TrainError> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(TrainError::NonFinite { step, loss })
    }
}

/// Mean squared color error over a random pixel batch.
fn recon_step(
    field: &RadianceFieldGrid,
    views: &[CameraView],
    config: &TrainConfig,
    step: usize,
    grad: &mut GridGradient,
) -> Result<f64, TrainError> {
    let mut rng = rng_for(config.seed, step, Purpose::Pixels);
    let mut picks: Vec<(usize, usize, usize)> = (0..config.pixel_batch)
        .map(|_| {
            let v = rng.random_range(0..views.len());
            let w = views[v].width();
            let h = views[v].height();
            (v, rng.random_range(0..w), rng.random_range(0..h))
        })
        .collect();
    picks.sort_unstable_by_key(|p| p.0);
    let mut rays: Vec<PixelRay> = Vec::with_capacity(picks.len());
    let mut targets = Vec::with_capacity(picks.len());
    for chunk in picks.chunk_by(|a, b| a.0 == b.0) {
        let v = &views[chunk[0].0];
        rays.extend(camera_rays(
            field,
            &v.intrinsics,
            &v.pose,
            v.width(),
            v.height(),
            chunk.iter().map(|p| (p.1, p.2)),
        )?);
        targets.extend(chunk.iter().map(|p| v.image.get(p.1, p.2)));
    }
    let sampling = Sampling::Jittered {
        seed: key(config.seed, step, Purpose::PixelJitter),
    };
    let batch = render_batch(field, &rays, config.n_samples, sampling)?;
    let scale = config.coeff_recon / rays.len() as f64;
    let bg = config.background;
    let mut loss = 0.0;
    let upstream: Vec<RayGrad> = (0..rays.len())
        .map(|i| {
            let c = batch.composited(i, bg);
            let t = targets[i];
            let e = [c[0] - t[0], c[1] - t[1], c[2] - t[2]];
            loss += e[0] * e[0] + e[1] * e[1] + e[2] * e[2];
            let g = [2.0 * scale * e[0], 2.0 * scale * e[1], 2.0 * scale * e[2]];
            RayGrad {
                color: g,
                depth: 0.0,
                opacity: -(g[0] * bg[0] + g[1] * bg[1] + g[2] * bg[2]),
            }
        })
        .collect();
    crate::render::backward_batch(field, &rays, &batch, &upstream, sampling, grad)?;
    Ok(loss / rays.len() as f64)
}

fn refresh_caches(
    field: &RadianceFieldGrid,
    views: &[CameraView],
    config: &TrainConfig,
) -> Result<Vec<ViewCache>, TrainError> {
    views
        .iter()
        .map(|v| {
            let r = render_view(field, &v.intrinsics, &v.pose, v.width(), v.height(), config.n_samples, config.background)?;
            Ok(ViewCache {
                d_bar: gated(&r.depth, &r.opacity, config.opacity_threshold),
            })
        })
        .collect()
}

struct SeenOutcome {
    seen: f64,
    mde: f64,
    reg: f64,
    coverage: f64,
    provider_grad: Vec<f64>,
}

fn note_fit(stats: &mut TrainStats, skipped: bool, fit: Option<ScaleShift>) {
    if skipped {
        stats.skipped_fits += 1;
    }
    if fit.is_some_and(|f| f.is_inverted()) {
        stats.inverted_fits += 1;
    }
}

/// Patch values of a full map, with validity.
fn patch_values(map: &DepthMap, patch: &PatchSpec) -> (Vec<f64>, Vec<bool>) {
    patch
        .pixels()
        .map(|(x, y)| {
            let i = map.index(x, y);
            (map.values[i], map.validity[i])
        })
        .unzip()
}

/// Image-level alignment of `d_star` onto the cached render.
fn global_fit(d_star: &DepthMap, d_bar: &DepthMap, mask: &ConfidenceMask) -> Option<ScaleShift> {
    let m: Vec<bool> = (0..d_star.values.len())
        .map(|i| d_star.validity[i] && d_bar.validity[i] && mask.values[i])
        .collect();
    fit_scale_shift(&d_star.values, &d_bar.values, &m).ok()
}

#[allow(clippy::too_many_arguments)]
fn seen_step(
    field: &RadianceFieldGrid,
    provider: &DepthProvider,
    ctx: &Context,
    caches: &[ViewCache],
    config: &TrainConfig,
    step: usize,
    grad: &mut GridGradient,
    stats: &mut TrainStats,
) -> Result<SeenOutcome, TrainError> {
    let mut rng = rng_for(config.seed, step, Purpose::SeenPatch);
    let i = rng.random_range(0..ctx.views.len());
    let view = &ctx.views[i];
    let (w, h) = (view.width(), view.height());
    let patch = random_patch(&mut rng, config.seen_patch, w, h);

    let pred = provider.predict(&view.image, &ctx.perceptions[i])?;
    let mask = if config.use_confidence {
        let l = ctx.partner[i];
        let rel = view.pose.relative_to(&ctx.views[l].pose);
        build_mask_seen(&pred.depth, &caches[i].d_bar, &caches[l].d_bar, &view.intrinsics, &rel, ctx.tau)
    } else {
        ConfidenceMask::all(w, h, true)
    };

    let sampling = Sampling::Jittered {
        seed: key(config.seed, step, Purpose::SeenJitter),
    };
    let rendered = render_patch(field, &view.intrinsics, &view.pose, w, h, &patch, config.n_samples, sampling)?;
    let d_bar: Vec<f64> = rendered.batch.depths();
    let (d_star, star_valid) = patch_values(&pred.depth, &patch);
    let m: Vec<bool> = patch
        .pixels()
        .enumerate()
        .map(|(k, (x, y))| star_valid[k] && mask.get(x, y) && rendered.batch.outputs[k].opacity >= config.opacity_threshold)
        .collect();
    let n = patch.len() as f64;
    let coverage = m.iter().filter(|&&b| b).count() as f64 / n;
    let fit = match config.fit_mode {
        FitMode::Patch => None,
        FitMode::Global => global_fit(&pred.depth, &caches[i].d_bar, &mask),
    };

    let mut seen_value = 0.0;
    if config.coeff_seen > 0.0 {
        let term = match (config.fit_mode, fit) {
            (FitMode::Patch, _) => distill_loss(&d_star, &d_bar, &m),
            (FitMode::Global, Some(f)) => distill_loss_with_fit(&d_star, &d_bar, &m, f),
            (FitMode::Global, None) => distill_loss(&d_star, &d_bar, &vec![false; m.len()]),
        };
        note_fit(stats, term.skipped, term.fit);
        seen_value = term.value / n;
        if !term.skipped {
            depth_backward(field, &rendered, &term.grad, config.coeff_seen / n, grad)?;
        }
    }

    let mut provider_grad = vec![0.0; provider.correction.params().len()];
    let (mut mde_value, mut reg_value) = (0.0, 0.0);
    if config.provider_active() {
        let mut g_star = vec![0.0; patch.len()];
        if config.coeff_mde > 0.0 {
            let a = adaptation_loss(&d_bar, &d_star, &m);
            note_fit(stats, a.scale_shift.skipped, a.scale_shift.fit);
            mde_value = a.value() / n;
            for (g, v) in g_star.iter_mut().zip(a.grad()) {
                *g += config.coeff_mde / n * v;
            }
        }
        if config.coeff_reg > 0.0 {
            let (d_init, init_valid) = patch_values(&ctx.initial[i], &patch);
            let rm: Vec<bool> = star_valid.iter().zip(&init_valid).map(|(a, b)| *a && *b).collect();
            let r = regularization_loss(&d_init, &d_star, &rm);
            note_fit(stats, r.skipped, r.fit);
            reg_value = r.value / n;
            for (g, v) in g_star.iter_mut().zip(&r.grad) {
                *g += config.coeff_reg / n * v;
            }
        }
        let pixels: Vec<(usize, usize)> = patch.pixels().collect();
        provider.correction.backward(&pred.base, &pixels, &g_star, &mut provider_grad);
    }
    Ok(SeenOutcome {
        seen: seen_value,
        mde: mde_value,
        reg: reg_value,
        coverage,
        provider_grad,
    })
}

fn depth_backward(
    field: &RadianceFieldGrid,
    rendered: &RenderedPixels,
    d_grad: &[f64],
    scale: f64,
    grad: &mut GridGradient,
) -> Result<(), TrainError> {
    let upstream: Vec<RayGrad> = d_grad
        .iter()
        .map(|g| RayGrad {
            depth: scale * g,
            ..Default::default()
        })
        .collect();
    rendered.backward(field, &upstream, grad)?;
    Ok(())
}

fn sample_unseen_pose(ctx: &Context, config: &TrainConfig, rng: &mut ChaCha8Rng) -> Option<(usize, Pose)> {
    let n = ctx.views.len();
    match config.unseen_strategy {
        UnseenStrategy::InterpolatePoses => {
            let a = rng.random_range(0..n);
            let mut b = rng.random_range(0..n - 1);
            if b >= a {
                b += 1;
            }
            let s = rng.random_range(0.0..1.0);
            Some((a, ctx.views[a].pose.interpolate(&ctx.views[b].pose, s)))
        }
        UnseenStrategy::JitterSeen => {
            let a = rng.random_range(0..n);
            let pose = &ctx.views[a].pose;
            let target = ctx.bounds_center;
            let radius = (pose.center() - target).norm();
            let jitter = nalgebra::Vector3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            ) * (0.1 * radius);
            let up = -pose.rotation.column(1).into_owned();
            Pose::look_at(pose.center() + jitter, target, up).ok().map(|p| (a, p))
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn unseen_step(
    field: &RadianceFieldGrid,
    provider: &DepthProvider,
    geometry: &dyn GeometrySource,
    ctx: &Context,
    caches: &[ViewCache],
    config: &TrainConfig,
    step: usize,
    grad: &mut GridGradient,
    stats: &mut TrainStats,
) -> Result<Option<f64>, TrainError> {
    let mut rng = rng_for(config.seed, step, Purpose::UnseenPose);
    let Some((anchor, pose)) = sample_unseen_pose(ctx, config, &mut rng) else {
        return Ok(None);
    };
    let view = &ctx.views[anchor];
    let (w, h) = (view.width(), view.height());
    let k: &Intrinsics = &view.intrinsics;
    let perception_key = key(config.seed, step, Purpose::UnseenPose) | (1 << 63);
    let Some(perception) = geometry.novel(k, &pose, w, h, perception_key) else {
        return Ok(None);
    };
    let patch = random_patch(&mut rng, config.unseen_patch, w, h);
    let sampling = Sampling::Jittered {
        seed: key(config.seed, step, Purpose::UnseenJitter),
    };
    let rendered = render_patch(field, k, &pose, w, h, &patch, config.n_samples, sampling)?;

    // The provider sees the rendered image; its geometry comes through the
    // backdoor, so the pixels outside the patch can stay blank.
    let mut image = RgbImage::filled(w, h, config.background);
    let mut d_bar_map = DepthMap::new(w, h, DepthFrame::Absolute);
    for (kk, (x, y)) in patch.pixels().enumerate() {
        image.set(x, y, rendered.batch.composited(kk, config.background));
        let o = rendered.batch.outputs[kk];
        if o.opacity >= config.opacity_threshold {
            d_bar_map.set(x, y, o.depth);
        }
    }
    let pred = provider.predict(&image, &perception)?;

    let mask = if config.use_confidence {
        // The lattice stands in for the full unseen image when fitting.
        let seen: Vec<_> = ctx
            .views
            .iter()
            .zip(caches)
            .map(|(v, c)| crate::confidence::SeenView {
                view_id: v.view_id,
                pose: &v.pose,
                d_bar: &c.d_bar,
            })
            .collect();
        let mut d_star_lattice = DepthMap::new(w, h, DepthFrame::Relative);
        for (x, y) in patch.pixels() {
            if let Some(v) = pred.depth.get(x, y) {
                d_star_lattice.set(x, y, v);
            }
        }
        crate::confidence::build_mask_unseen(&d_star_lattice, &d_bar_map, k, &pose, &seen, ctx.tau)
    } else {
        ConfidenceMask::all(w, h, true)
    };

    let d_bar = rendered.batch.depths();
    let (d_star, star_valid) = patch_values(&pred.depth, &patch);
    let m: Vec<bool> = patch
        .pixels()
        .enumerate()
        .map(|(kk, (x, y))| {
            star_valid[kk] && mask.get(x, y) && rendered.batch.outputs[kk].opacity >= config.opacity_threshold
        })
        .collect();
    let term = match config.fit_mode {
        FitMode::Patch => distill_loss(&d_star, &d_bar, &m),
        FitMode::Global => match global_fit(&pred.depth, &d_bar_map, &mask) {
            Some(f) => distill_loss_with_fit(&d_star, &d_bar, &m, f),
            None => distill_loss(&d_star, &d_bar, &vec![false; m.len()]),
        },
    };
    note_fit(stats, term.skipped, term.fit);
    let n = patch.len() as f64;
    if !term.skipped {
        depth_backward(field, &rendered, &term.grad, config.coeff_unseen / n, grad)?;
    }
    Ok(Some(term.value / n))
}

/// Held-out evaluation of a trained field.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub views: usize,
    pub psnr: f64,
    pub ssim: f64,
    pub depth: DepthMetricReport,
}

pub fn evaluate(
    field: &RadianceFieldGrid,
    views: &[CameraView],
    n_samples: usize,
    background: [f64; 3],
) -> Result<EvalReport, TrainError> {
    let mut images = Vec::with_capacity(views.len());
    let mut depths = Vec::with_capacity(views.len());
    for v in views {
        let r = render_view(field, &v.intrinsics, &v.pose, v.width(), v.height(), n_samples, background)?;
        images.push(r.image);
        depths.push(r.depth);
    }
    evaluate_renders(&images, &depths, views)
}

/// Metrics of given renders against the views' images and depths.
pub fn evaluate_renders(images: &[RgbImage], depths: &[DepthMap], views: &[CameraView]) -> Result<EvalReport, TrainError> {
    if views.is_empty() {
        return Err(MetricsError::NoViews.into());
    }
    let (mut p, mut s) = (0.0, 0.0);
    for (img, v) in images.iter().zip(views) {
        p += psnr(img, &v.image)?;
        s += ssim(img, &v.image)?;
    }
    let gts: Vec<DepthMap> = views
        .iter()
        .map(|v| v.gt_depth.clone().unwrap_or_else(|| DepthMap::new(v.width(), v.height(), DepthFrame::Absolute)))
        .collect();
    let n = views.len() as f64;
    Ok(EvalReport {
        views: views.len(),
        psnr: p / n,
        ssim: s / n,
        depth: scene_depth_metrics(depths, &gts)?,
    })
}
