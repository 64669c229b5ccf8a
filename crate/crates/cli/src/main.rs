//! `radiant`: generate synthetic scenes, train, render, evaluate, run
//! ablations and dump confidence masks.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or format error, 3 training
//! halted on a non-finite loss.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use radiant::ablation::{cumulative_variants, fitting_variants, run_ablation, AblationSetup};
use radiant::camera::{pixel_center, Aabb};
use radiant::confidence::{build_mask_seen, default_tau};
use radiant::dataset::{load_dataset, save_dataset, write_pfm, write_ppm};
use radiant::field::RadianceFieldGrid;
use radiant::maps::{DepthMap, RgbImage};
use radiant::provider::{AmbiguityOracleConfig, DepthProvider, GeometrySource, StoredDepth, DEFAULT_CORRECTION_NODES};
use radiant::render::render_view;
use radiant::scene::{CameraView, OrbitRig, SceneSpec};
use radiant::trainer::{evaluate_renders, gated, seen_partners, train_with_hook, EvalReport, TrainConfig, TrainError};

#[derive(Debug, Parser)]
#[command(name = "radiant", version, about = "Few-shot radiance fields with depth distillation")]
struct Cli {
    /// Worker threads; defaults to the available cores.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum AblationKind {
    /// Photometric baseline plus one component at a time.
    Chain,
    /// Image-level versus patch-level scale-shift fitting.
    Fitting,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Ray-trace a preset scene from an orbit of cameras.
    Generate {
        /// sphere, two-box or box.
        #[arg(long)]
        scene: String,
        #[arg(long, default_value_t = 8)]
        views: usize,
        #[arg(long)]
        out: PathBuf,
        /// Square image size in pixels.
        #[arg(long, default_value_t = 64)]
        resolution: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a field and depth provider on a dataset directory.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Flat JSON training config; flags override it.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        tau: Option<f64>,
        #[arg(long)]
        steps: Option<usize>,
        /// Depth-provider oracle config as JSON; a seeded ambiguous oracle
        /// by default.
        #[arg(long)]
        provider: Option<PathBuf>,
    },
    /// Render color and depth at the cameras of a dataset.
    Render {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print image and depth metrics of a checkpoint as CSV.
    Evaluate {
        #[arg(long)]
        data: PathBuf,
        /// A training output directory, or a dataset directory whose images
        /// and depths are compared directly.
        #[arg(long)]
        ckpt: PathBuf,
    },
    /// Paired multi-seed ablation on a preset scene.
    Ablate {
        #[arg(long, value_enum, default_value_t = AblationKind::Chain)]
        kind: AblationKind,
        #[arg(long, default_value = "two-box")]
        scene: String,
        #[arg(long, default_value_t = 8)]
        views: usize,
        #[arg(long, default_value_t = 32)]
        resolution: usize,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        /// Number of seeds, starting at `--seed`.
        #[arg(long, default_value_t = 3)]
        seeds: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        tau: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the seen-view confidence masks of a trained checkpoint.
    MaskDump {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        tau: Option<f64>,
    },
}

/// Error raised for bad arguments detected after parsing.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// Scene description stored next to a generated dataset.
#[derive(Debug, Serialize, Deserialize)]
struct SceneFile {
    name: String,
    rig: OrbitRig,
    spec: SceneSpec,
}

const SCENE_FILE: &str = "scene.json";
const TEST_DIR: &str = "test";

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if cause.is::<UsageError>() {
            return 1;
        }
        match cause.downcast_ref::<TrainError>() {
            Some(TrainError::NonFinite { .. } | TrainError::Optim(_)) => return 3,
            Some(TrainError::Config(_)) => return 1,
            _ => {}
        }
    }
    2
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(usage("--threads must be positive"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    match cli.command {
        Command::Generate {
            scene,
            views,
            out,
            resolution,
            seed,
        } => generate(&scene, views, &out, resolution, seed),
        Command::Train {
            data,
            config,
            out,
            seed,
            tau,
            steps,
            provider,
        } => train_cmd(&data, config.as_deref(), &out, seed, tau, steps, provider.as_deref()),
        Command::Render { ckpt, data, out } => render_cmd(&ckpt, &data, &out),
        Command::Evaluate { data, ckpt } => evaluate_cmd(&data, &ckpt),
        Command::Ablate {
            kind,
            scene,
            views,
            resolution,
            config,
            steps,
            seeds,
            seed,
            tau,
            out,
        } => ablate_cmd(kind, &scene, views, resolution, config.as_deref(), steps, seeds, seed, tau, &out),
        Command::MaskDump { data, ckpt, out, tau } => mask_dump(&data, &ckpt, &out, tau),
    }
}

fn preset(name: &str) -> Result<SceneSpec> {
    SceneSpec::preset(name).ok_or_else(|| usage(format!("unknown scene '{name}' (expected sphere, two-box or box)")))
}

fn generate(name: &str, views: usize, out: &Path, resolution: usize, seed: u64) -> Result<()> {
    let mut spec = preset(name)?;
    spec.seed = seed;
    if views == 0 {
        return Err(usage("--views must be positive"));
    }
    if resolution < 2 {
        return Err(usage("--resolution must be at least 2"));
    }
    let rig = OrbitRig::new(views, resolution, resolution);
    let train = rig.trace(&spec, 0)?;
    let test = rig.interleaved().trace(&spec, views as u32)?;
    save_dataset(&train, out)?;
    save_dataset(&test, &out.join(TEST_DIR))?;
    let file = SceneFile {
        name: name.to_string(),
        rig,
        spec,
    };
    write_json(&out.join(SCENE_FILE), &file)?;
    eprintln!("wrote {} training and {} test views to {}", train.len(), test.len(), out.display());
    Ok(())
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable value");
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn scene_file(data: &Path) -> Result<Option<SceneFile>> {
    let p = data.join(SCENE_FILE);
    if p.exists() {
        Ok(Some(read_json(&p)?))
    } else {
        Ok(None)
    }
}

/// Flat JSON config with the flags that override it. The returned flag is
/// true when the file sets the background color explicitly.
fn load_config(path: Option<&Path>) -> Result<(TrainConfig, bool)> {
    let Some(path) = path else {
        return Ok((TrainConfig::default(), false));
    };
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let raw: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    let has_background = raw.get("background").is_some();
    let config = serde_json::from_value(raw).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    Ok((config, has_background))
}

/// Bounding box of the valid ground-truth points, padded by 10%.
fn bounds_from_depth(views: &[CameraView]) -> Result<Aabb> {
    let mut lo = Vector3::repeat(f64::INFINITY);
    let mut hi = Vector3::repeat(f64::NEG_INFINITY);
    for v in views {
        let Some(d) = &v.gt_depth else { continue };
        for y in 0..d.height {
            for x in 0..d.width {
                if let Some(z) = d.get(x, y) {
                    let p = v.pose.camera_to_world(&(v.intrinsics.unproject(pixel_center(x, y)) * z));
                    lo = lo.inf(&p);
                    hi = hi.sup(&p);
                }
            }
        }
    }
    if !(lo.iter().all(|c| c.is_finite()) && hi.iter().all(|c| c.is_finite())) {
        bail!("dataset has no ground-truth depth to bound the scene; add {SCENE_FILE}");
    }
    let pad = (hi - lo).map(|e| 0.1 * e.max(1e-3));
    Ok(Aabb::new(lo - pad, hi + pad))
}

fn train_cmd(
    data: &Path,
    config_path: Option<&Path>,
    out: &Path,
    seed: Option<u64>,
    tau: Option<f64>,
    steps: Option<usize>,
    provider_path: Option<&Path>,
) -> Result<()> {
    let (mut config, has_background) = load_config(config_path)?;
    if let Some(s) = seed {
        config.seed = s;
    }
    if let Some(t) = tau {
        config.tau = Some(t);
    }
    if let Some(n) = steps {
        config.total_steps = n;
        config.unseen_warmup = config.unseen_warmup.min(n);
    }
    config.validate()?;
    let views = load_dataset(data)?;
    let scene = scene_file(data)?;
    let bounds = match &scene {
        Some(s) => s.spec.bounds,
        None => bounds_from_depth(&views)?,
    };
    if let (Some(s), false) = (&scene, has_background) {
        config.background = s.spec.background_color;
    }
    let oracle = match provider_path {
        Some(p) => read_json(p)?,
        None => AmbiguityOracleConfig::ambiguous(config.seed),
    };
    let provider = DepthProvider::new(oracle, (DEFAULT_CORRECTION_NODES, DEFAULT_CORRECTION_NODES))?;
    let field = config.initial_field(bounds)?;
    let geometry: &dyn GeometrySource = match &scene {
        Some(s) => &s.spec,
        None => &StoredDepth,
    };

    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write_json(&out.join("config.json"), &config)?;
    let every = config.checkpoint_every;
    let total = config.total_steps;
    let outcome = train_with_hook(&views, geometry, field, provider, &config, |step, field, provider| {
        if every == 0 || step == total {
            return Ok(());
        }
        let dir = out.join(format!("ckpt_{step:06}"));
        save_checkpoint(&dir, field, provider).map_err(|e| TrainError::Hook(format!("{e:#}")))
    })?;
    save_checkpoint(out, &outcome.field, &outcome.provider)?;
    let log_path = out.join("loss_log.csv");
    let mut f = fs::File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?;
    outcome.log.write_csv(&mut f)?;
    write_json(&out.join("stats.json"), &outcome.stats)?;
    eprintln!("trained {} steps; checkpoint in {}", outcome.stats.steps, out.display());
    Ok(())
}

fn save_checkpoint(dir: &Path, field: &RadianceFieldGrid, provider: &DepthProvider) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    field.save(&dir.join("field.bin"))?;
    provider.save(dir)?;
    Ok(())
}

struct Checkpoint {
    field: RadianceFieldGrid,
    config: TrainConfig,
}

fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let field = RadianceFieldGrid::load(&dir.join("field.bin"))?;
    let config_path = dir.join("config.json");
    let config = if config_path.exists() {
        read_json(&config_path)?
    } else {
        TrainConfig::default()
    };
    Ok(Checkpoint { field, config })
}

/// Held-out views when the dataset has a test split, the views themselves
/// otherwise.
fn eval_dir(data: &Path) -> PathBuf {
    let test = data.join(TEST_DIR);
    if test.join("views.json").exists() {
        test
    } else {
        data.to_path_buf()
    }
}

fn render_cmd(ckpt: &Path, data: &Path, out: &Path) -> Result<()> {
    let ck = load_checkpoint(ckpt)?;
    let views = load_dataset(data)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    for v in &views {
        let r = render_view(&ck.field, &v.intrinsics, &v.pose, v.width(), v.height(), ck.config.n_samples, ck.config.background)?;
        write_ppm(&out.join(format!("render_{}.ppm", v.view_id)), &r.image)?;
        write_pfm(&out.join(format!("render_depth_{}.pfm", v.view_id)), &r.depth)?;
    }
    eprintln!("rendered {} views to {}", views.len(), out.display());
    Ok(())
}

fn evaluate_cmd(data: &Path, ckpt: &Path) -> Result<()> {
    let dir = eval_dir(data);
    let views = load_dataset(&dir)?;
    let report = if ckpt.join("field.bin").exists() {
        let ck = load_checkpoint(ckpt)?;
        let mut images = Vec::with_capacity(views.len());
        let mut depths = Vec::with_capacity(views.len());
        for v in &views {
            let r = render_view(&ck.field, &v.intrinsics, &v.pose, v.width(), v.height(), ck.config.n_samples, ck.config.background)?;
            images.push(r.image);
            depths.push(r.depth);
        }
        evaluate_renders(&images, &depths, &views)?
    } else if ckpt.join("views.json").exists() {
        compare_datasets(&views, &eval_dir(ckpt))?
    } else {
        return Err(usage(format!(
            "{} is neither a training output (field.bin) nor a dataset (views.json)",
            ckpt.display()
        )));
    };
    let name = match scene_file(data)? {
        Some(s) => s.name,
        None => data
            .file_name()
            .map_or_else(|| data.display().to_string(), |n| n.to_string_lossy().into_owned()),
    };
    print_report(&name, &report);
    Ok(())
}

/// Metrics of another dataset's images and depths against `views`, matched
/// by view id.
fn compare_datasets(views: &[CameraView], other: &Path) -> Result<EvalReport> {
    let others = load_dataset(other)?;
    let mut images: Vec<RgbImage> = Vec::with_capacity(views.len());
    let mut depths: Vec<DepthMap> = Vec::with_capacity(views.len());
    for v in views {
        let o = others
            .iter()
            .find(|o| o.view_id == v.view_id)
            .with_context(|| format!("view {} missing from {}", v.view_id, other.display()))?;
        let d = o
            .gt_depth
            .clone()
            .with_context(|| format!("view {} of {} has no depth", v.view_id, other.display()))?;
        images.push(o.image.clone());
        depths.push(d);
    }
    Ok(evaluate_renders(&images, &depths, views)?)
}

fn print_report(scene: &str, r: &EvalReport) {
    let mut out = std::io::stdout().lock();
    let d = &r.depth;
    let _ = writeln!(out, "scene,views,psnr,ssim,abs_rel,sq_rel,rmse,rmse_log,s");
    let _ = writeln!(
        out,
        "{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
        scene, r.views, r.psnr, r.ssim, d.abs_rel, d.sq_rel, d.rmse, d.rmse_log, d.scale_factor_s
    );
}

#[allow(clippy::too_many_arguments)]
fn ablate_cmd(
    kind: AblationKind,
    scene: &str,
    views: usize,
    resolution: usize,
    config_path: Option<&Path>,
    steps: Option<usize>,
    seeds: usize,
    seed: u64,
    tau: Option<f64>,
    out: &Path,
) -> Result<()> {
    let spec = preset(scene)?;
    let (mut config, has_background) = load_config(config_path)?;
    if !has_background {
        config.background = spec.background_color;
    }
    if let Some(n) = steps {
        config.total_steps = n;
        config.unseen_warmup = config.unseen_warmup.min(n);
    }
    if tau.is_some() {
        config.tau = tau;
    }
    config.validate()?;
    let rig = OrbitRig::new(views, resolution, resolution);
    let setup = AblationSetup {
        train_views: rig.trace(&spec, 0)?,
        test_views: rig.interleaved().trace(&spec, views as u32)?,
        scene: spec,
        oracle: AmbiguityOracleConfig::ambiguous(seed),
        correction_nodes: (DEFAULT_CORRECTION_NODES, DEFAULT_CORRECTION_NODES),
        eval_samples: config.n_samples,
    };
    let variants = match kind {
        AblationKind::Chain => cumulative_variants(&config),
        AblationKind::Fitting => fitting_variants(&config),
    };
    let seed_list: Vec<u64> = (seed..seed + seeds as u64).collect();
    let table = run_ablation(&setup, &variants, &seed_list).map_err(|e| usage(e.to_string()))?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let csv = out.join("ablation.csv");
    fs::write(&csv, table.to_csv()).with_context(|| format!("writing {}", csv.display()))?;
    let md = table.to_markdown();
    let md_path = out.join("ablation.md");
    fs::write(&md_path, &md).with_context(|| format!("writing {}", md_path.display()))?;
    print!("{md}");
    Ok(())
}

fn mask_dump(data: &Path, ckpt: &Path, out: &Path, tau: Option<f64>) -> Result<()> {
    let ck = load_checkpoint(ckpt)?;
    let provider = DepthProvider::load(ckpt)?;
    let views = load_dataset(data)?;
    if views.len() < 2 {
        return Err(TrainError::TooFewViews(views.len()).into());
    }
    let scene = scene_file(data)?;
    let geometry: &dyn GeometrySource = match &scene {
        Some(s) => &s.spec,
        None => &StoredDepth,
    };
    let tau = tau
        .or(ck.config.tau)
        .unwrap_or_else(|| default_tau(ck.field.bounds().diagonal()));
    if !(tau > 0.0) {
        return Err(usage("--tau must be positive"));
    }
    let d_bar = views
        .iter()
        .map(|v| {
            let r = render_view(&ck.field, &v.intrinsics, &v.pose, v.width(), v.height(), ck.config.n_samples, ck.config.background)?;
            Ok(gated(&r.depth, &r.opacity, ck.config.opacity_threshold))
        })
        .collect::<Result<Vec<_>>>()?;
    let partners = seen_partners(&views);
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    for (i, v) in views.iter().enumerate() {
        let l = partners[i];
        let perception = geometry
            .seen(v)
            .ok_or(TrainError::MissingGeometry(v.view_id))?;
        let pred = provider.predict(&v.image, &perception)?;
        let rel = v.pose.relative_to(&views[l].pose);
        let mask = build_mask_seen(&pred.depth, &d_bar[i], &d_bar[l], &v.intrinsics, &rel, tau)
            .with_views(v.view_id, views[l].view_id);
        let path = out.join(format!("confidence_{}_{}.pbm", v.view_id, views[l].view_id));
        mask.write_pbm(&path)?;
        match &mask.diagnostic {
            Some(d) => eprintln!("view {} -> {}: {d}", v.view_id, views[l].view_id),
            None => eprintln!(
                "view {} -> {}: coverage {:.3}",
                v.view_id,
                views[l].view_id,
                mask.coverage()
            ),
        }
    }
    Ok(())
}
