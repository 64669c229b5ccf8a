//! Paired ablation runs: every variant is trained on the same views with
//! the same seeds, so per-seed differences isolate the toggled component.

use std::fmt::Write as _;

use serde::Serialize;
use thiserror::Error;

use crate::provider::{AmbiguityOracleConfig, DepthProvider};
use crate::scene::{CameraView, SceneSpec};
use crate::trainer::{evaluate, train, EvalReport, FitMode, TrainConfig};

#[derive(Debug, Error)]
pub enum AblationError {
    #[error("{0} seed(s) given, at least 3 are needed for paired comparisons")]
    TooFewSeeds(usize),
    #[error("no variants given")]
    NoVariants,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Variant {
    pub name: String,
    pub config: TrainConfig,
}

impl Variant {
    pub fn new(name: impl Into<String>, config: TrainConfig) -> Self {
        Self {
            name: name.into(),
            config,
        }
    }
}

/// The cumulative chain: photometric baseline, then seen-view distillation,
/// unseen-view distillation, provider adaptation, and confidence masking.
pub fn cumulative_variants(base: &TrainConfig) -> Vec<Variant> {
    let a = base.clone().photometric_only();
    let b = TrainConfig {
        coeff_seen: base.coeff_seen,
        use_confidence: false,
        ..a.clone()
    };
    let c = TrainConfig {
        coeff_unseen: base.coeff_unseen,
        ..b.clone()
    };
    let d = TrainConfig {
        coeff_mde: base.coeff_mde,
        coeff_reg: base.coeff_reg,
        adapt_provider: true,
        ..c.clone()
    };
    let e = TrainConfig {
        use_confidence: true,
        ..d.clone()
    };
    vec![
        Variant::new("(a) baseline", a),
        Variant::new("(b) +seen", b),
        Variant::new("(c) +unseen", c),
        Variant::new("(d) +adaptation", d),
        Variant::new("(e) +confidence", e),
    ]
}

/// Seen-view distillation alone, with one fit per image versus one per
/// patch.
pub fn fitting_variants(base: &TrainConfig) -> Vec<Variant> {
    let seen_only = TrainConfig {
        coeff_seen: base.coeff_seen,
        use_confidence: false,
        ..base.clone().photometric_only()
    };
    vec![
        Variant::new(
            "global-fit",
            TrainConfig {
                fit_mode: FitMode::Global,
                ..seen_only.clone()
            },
        ),
        Variant::new(
            "patch-fit",
            TrainConfig {
                fit_mode: FitMode::Patch,
                ..seen_only
            },
        ),
    ]
}

/// Everything shared by the runs of an ablation.
#[derive(Debug, Clone)]
pub struct AblationSetup {
    pub scene: SceneSpec,
    pub train_views: Vec<CameraView>,
    pub test_views: Vec<CameraView>,
    /// Oracle distortions; its seed is replaced by each run's seed.
    pub oracle: AmbiguityOracleConfig,
    pub correction_nodes: (usize, usize),
    pub eval_samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunResult {
    pub seed: u64,
    pub psnr: f64,
    pub ssim: f64,
    pub depth_rmse: f64,
    pub abs_rel: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub variant: String,
    /// One entry per seed; `Err` holds the failure message.
    pub runs: Vec<Result<RunResult, String>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

fn summarize(values: impl Iterator<Item = f64>) -> Option<Summary> {
    let v: Vec<f64> = values.collect();
    if v.is_empty() {
        return None;
    }
    Some(Summary {
        mean: v.iter().sum::<f64>() / v.len() as f64,
        min: v.iter().copied().fold(f64::INFINITY, f64::min),
        max: v.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    })
}

impl AblationRow {
    pub fn ok_runs(&self) -> impl Iterator<Item = &RunResult> {
        self.runs.iter().filter_map(|r| r.as_ref().ok())
    }

    pub fn psnr(&self) -> Option<Summary> {
        summarize(self.ok_runs().map(|r| r.psnr))
    }

    pub fn depth_rmse(&self) -> Option<Summary> {
        summarize(self.ok_runs().map(|r| r.depth_rmse))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationTable {
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, name: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == name)
    }

    /// Per-seed `(row − reference)` for a metric; `None` where either run
    /// failed.
    pub fn paired_differences(
        &self,
        row: usize,
        reference: usize,
        metric: impl Fn(&RunResult) -> f64,
    ) -> Vec<Option<f64>> {
        self.rows[row]
            .runs
            .iter()
            .zip(&self.rows[reference].runs)
            .map(|(a, b)| match (a, b) {
                (Ok(a), Ok(b)) => Some(metric(a) - metric(b)),
                _ => None,
            })
            .collect()
    }

    /// One line per (variant, seed).
    pub fn to_csv(&self) -> String {
        let mut s = String::from("variant,seed,psnr,ssim,depth_rmse,abs_rel,status\n");
        for row in &self.rows {
            for (seed, run) in self.seeds.iter().zip(&row.runs) {
                match run {
                    Ok(r) => writeln!(
                        s,
                        "{},{},{:.6},{:.6},{:.6},{:.6},ok",
                        row.variant, seed, r.psnr, r.ssim, r.depth_rmse, r.abs_rel
                    ),
                    Err(e) => writeln!(s, "{},{},,,,,failed: {}", row.variant, seed, e.replace(',', ";")),
                }
                .expect("write to string");
            }
        }
        s
    }

    /// Mean and range per variant, plus the mean paired difference against
    /// the first row.
    pub fn to_markdown(&self) -> String {
        let mut s = String::from(
            "| variant | PSNR mean [min, max] | depth RMSE mean [min, max] | ΔPSNR | ΔRMSE | failed |\n|---|---|---|---|---|---|\n",
        );
        let fmt = |x: Option<Summary>, p: usize| {
            x.map_or("n/a".to_string(), |v| format!("{:.p$} [{:.p$}, {:.p$}]", v.mean, v.min, v.max))
        };
        let mean_diff = |d: Vec<Option<f64>>| {
            let v: Vec<f64> = d.into_iter().flatten().collect();
            if v.is_empty() {
                "n/a".to_string()
            } else {
                format!("{:+.4}", v.iter().sum::<f64>() / v.len() as f64)
            }
        };
        for (i, row) in self.rows.iter().enumerate() {
            let failed = row.runs.iter().filter(|r| r.is_err()).count();
            writeln!(
                s,
                "| {} | {} | {} | {} | {} | {} |",
                row.variant,
                fmt(row.psnr(), 2),
                fmt(row.depth_rmse(), 4),
                mean_diff(self.paired_differences(i, 0, |r| r.psnr)),
                mean_diff(self.paired_differences(i, 0, |r| r.depth_rmse)),
                failed
            )
            .expect("write to string");
        }
        s
    }
}

/// One training run followed by held-out evaluation.
pub fn run_once(setup: &AblationSetup, config: &TrainConfig, seed: u64) -> Result<(RunResult, EvalReport), String> {
    let config = TrainConfig {
        seed,
        ..config.clone()
    };
    let oracle = AmbiguityOracleConfig {
        seed,
        ..setup.oracle.clone()
    };
    let provider = DepthProvider::new(oracle, setup.correction_nodes).map_err(|e| e.to_string())?;
    let field = config.initial_field(setup.scene.bounds).map_err(|e| e.to_string())?;
    let out = train(&setup.train_views, &setup.scene, field, provider, &config).map_err(|e| e.to_string())?;
    let report = evaluate(&out.field, &setup.test_views, setup.eval_samples, config.background).map_err(|e| e.to_string())?;
    Ok((
        RunResult {
            seed,
            psnr: report.psnr,
            ssim: report.ssim,
            depth_rmse: report.depth.rmse,
            abs_rel: report.depth.abs_rel,
        },
        report,
    ))
}

/// Train and evaluate every variant on every seed. Failed runs are kept as
/// markers in the table.
pub fn run_ablation(setup: &AblationSetup, variants: &[Variant], seeds: &[u64]) -> Result<AblationTable, AblationError> {
    if seeds.len() < 3 {
        return Err(AblationError::TooFewSeeds(seeds.len()));
    }
    if variants.is_empty() {
        return Err(AblationError::NoVariants);
    }
    let rows = variants
        .iter()
        .map(|v| AblationRow {
            variant: v.name.clone(),
            runs: seeds.iter().map(|&s| run_once(setup, &v.config, s).map(|r| r.0)).collect(),
        })
        .collect();
    Ok(AblationTable {
        seeds: seeds.to_vec(),
        rows,
    })
}
