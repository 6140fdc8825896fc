//! Seeded experiments over simulator scenes: scale sweeps, RANSAC
//! robustness, inlier/error correlation and ablations.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::{align_matches, estimate_pose, ransac_estimate, sample_matches, PipelineConfig, PoseEstimate, RansacConfig, Solver};
use crate::geometry::{Point2, SimilarityTransform2D};
use crate::lifting::{depth_valid_mask, LiftConfig, ProjectionMode};
use crate::metrics::{pose_errors, spearman, summarize, ErrorSample, Summary, Thresholds};
use crate::par;
use crate::simulator::{contaminate, generate, SceneConfig, SyntheticScene};

/// Scenes for each seed, generated in parallel.
pub fn scenes(cfg: &SceneConfig, seeds: &[u64]) -> Result<Vec<SyntheticScene>> {
    par::map_slice(seeds, |&s| generate(&cfg.with_seed(s))).into_iter().collect()
}

/// `count` factors spaced evenly in log scale from `lo` to `hi`.
pub fn log_factors(lo: f64, hi: f64, count: usize) -> Result<Vec<f64>> {
    if !(lo > 0.0 && hi >= lo) || count < 1 {
        return Err(Error::InvalidConfig("factors need 0 < lo <= hi and count >= 1".into()));
    }
    if count == 1 {
        return Ok(vec![lo]);
    }
    let (a, b) = (lo.log10(), hi.log10());
    Ok((0..count).map(|k| 10f64.powf(a + (b - a) * k as f64 / (count - 1) as f64)).collect())
}

/// Pipeline for one scene with the depth cut-off given in meters: the
/// cut-off is converted to the scene's depth units with its hidden scale, so
/// that every variant sees the same cells.
pub fn metric_cutoff(pipeline: &PipelineConfig, scene: &SyntheticScene) -> PipelineConfig {
    PipelineConfig {
        lift: LiftConfig {
            max_depth: pipeline.lift.max_depth * pipeline.lift.initial_scale / scene.s_gt,
            ..pipeline.lift
        },
        ..pipeline.clone()
    }
}

/// Runs the estimator on one scene and scores it against ground truth.
pub fn evaluate_scene(scene: &SyntheticScene, pipeline: &PipelineConfig) -> Result<(PoseEstimate, ErrorSample)> {
    let est = estimate_pose(&scene.aerial, &scene.ground, &scene.depth, &scene.rays, pipeline)?;
    let errors = pose_errors(&est.transform, &scene.expected_transform(pipeline.lift.initial_scale), scene.heading());
    Ok((est, errors))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub seed: u64,
    pub factor: f64,
    pub transform: SimilarityTransform2D,
    /// `|s(f) / (f s(1)) - 1|`.
    pub scale_error: f64,
    pub theta_deviation: f64,
    pub translation_deviation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub factors: Vec<f64>,
    pub rows: Vec<SweepRow>,
    pub max_scale_error: f64,
    pub max_theta_deviation: f64,
    pub max_translation_deviation: f64,
}

/// Divides every depth (and the depth cut-off) by each factor and compares
/// the estimate with the unscaled one. Scale invariance means the recovered
/// scale grows by the factor while rotation and translation stay put.
pub fn scale_sweep(scenes: &[SyntheticScene], factors: &[f64], pipeline: &PipelineConfig) -> Result<SweepReport> {
    pipeline.validate()?;
    if factors.iter().any(|f| !(*f > 0.0) || !f.is_finite()) {
        return Err(Error::InvalidConfig("scale factors must be positive".into()));
    }
    let per_scene = par::map_slice(scenes, |scene| -> Result<Vec<SweepRow>> {
        let valid = depth_valid_mask(&scene.depth, &pipeline.lift);
        let sampled = sample_matches(&scene.aerial, &scene.ground, &valid, pipeline)?;
        let base = align_matches(&sampled, &scene.aerial, &scene.depth, &scene.rays, pipeline)?.transform;
        factors
            .iter()
            .map(|&f| {
                let cfg = PipelineConfig {
                    lift: LiftConfig {
                        max_depth: pipeline.lift.max_depth / f,
                        ..pipeline.lift
                    },
                    ..pipeline.clone()
                };
                let depth = scene.depth.scaled(1.0 / f);
                // Features are untouched, so the matches carry over unless
                // rounding moved a cell across the depth cut-off.
                let t = if depth_valid_mask(&depth, &cfg.lift) == valid {
                    align_matches(&sampled, &scene.aerial, &depth, &scene.rays, &cfg)?
                } else {
                    estimate_pose(&scene.aerial, &scene.ground, &depth, &scene.rays, &cfg)?
                }
                .transform;
                Ok(SweepRow {
                    seed: scene.config.seed,
                    factor: f,
                    transform: t,
                    scale_error: (t.s / (f * base.s) - 1.0).abs(),
                    theta_deviation: crate::geometry::wrap_angle(t.theta - base.theta).abs(),
                    translation_deviation: t.t.distance(base.t),
                })
            })
            .collect()
    });
    let mut rows = Vec::new();
    for r in per_scene {
        rows.extend(r?);
    }
    let max = |f: fn(&SweepRow) -> f64| rows.iter().map(f).fold(0.0, f64::max);
    Ok(SweepReport {
        factors: factors.to_vec(),
        max_scale_error: max(|r| r.scale_error),
        max_theta_deviation: max(|r| r.theta_deviation),
        max_translation_deviation: max(|r| r.translation_deviation),
        rows,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RobustnessTrial {
    pub seed: u64,
    pub pairs: usize,
    pub outliers: usize,
    pub ransac_error: f64,
    pub direct_error: f64,
    /// Largest component difference between the RANSAC and direct
    /// transforms.
    pub difference: f64,
}

/// True correspondences of a scene with Gaussian noise of `point_noise`
/// meters on each aerial coordinate, then contaminated with outliers. Both
/// RANSAC and a direct weighted solve are scored by localization error.
pub fn ransac_trial(scene: &SyntheticScene, outlier_fraction: f64, point_noise: f64, ransac: &RansacConfig) -> Result<RobustnessTrial> {
    let seed = scene.config.seed;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, point_noise).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let mut pairs = scene.true_pairs(1.0);
    for p in pairs.iter_mut() {
        p.q = Point2::new(p.q.x + noise.sample(&mut rng), p.q.y + noise.sample(&mut rng));
    }
    let c = contaminate(&pairs, outlier_fraction, scene.config.aerial_extent, seed)?;
    let truth = scene.expected_transform(1.0);
    let direct = Solver::Similarity.solve(&c.pairs)?;
    let robust = ransac_estimate(&c.pairs, ransac, Solver::Similarity)?.transform;
    Ok(RobustnessTrial {
        seed,
        pairs: c.pairs.len(),
        outliers: c.outlier.iter().filter(|o| **o).count(),
        ransac_error: robust.t.distance(truth.t),
        direct_error: direct.t.distance(truth.t),
        difference: [
            (robust.s - direct.s).abs(),
            crate::geometry::wrap_angle(robust.theta - direct.theta).abs(),
            (robust.t.x - direct.t.x).abs(),
            (robust.t.y - direct.t.y).abs(),
        ]
        .into_iter()
        .fold(0.0, f64::max),
    })
}

pub fn ransac_trials(scenes: &[SyntheticScene], outlier_fraction: f64, point_noise: f64, ransac: &RansacConfig) -> Result<Vec<RobustnessTrial>> {
    par::map_slice(scenes, |s| ransac_trial(s, outlier_fraction, point_noise, ransac)).into_iter().collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InlierTrial {
    pub seed: u64,
    pub feature_noise: f64,
    pub inlier_fraction: f64,
    pub loc_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InlierCorrelation {
    pub trials: Vec<InlierTrial>,
    /// Spearman rank correlation of inlier fraction against localization
    /// error.
    pub rho: f64,
}

/// Trial `k` uses seed `seeds[k]` and the `k`-th feature noise level, so
/// that match quality varies across trials.
pub fn inlier_correlation(base: &SceneConfig, seeds: &[u64], noise_levels: &[f64], pipeline: &PipelineConfig) -> Result<InlierCorrelation> {
    if seeds.len() != noise_levels.len() {
        return Err(Error::LengthMismatch {
            expected: seeds.len(),
            got: noise_levels.len(),
        });
    }
    if pipeline.ransac.is_none() {
        return Err(Error::InvalidConfig("inlier fractions need RANSAC".into()));
    }
    let jobs: Vec<(u64, f64)> = seeds.iter().copied().zip(noise_levels.iter().copied()).collect();
    let trials = par::map_slice(&jobs, |&(seed, noise)| -> Result<InlierTrial> {
        let scene = generate(&SceneConfig {
            feature_noise: noise,
            seed,
            ..base.clone()
        })?;
        let (est, err) = evaluate_scene(&scene, &metric_cutoff(pipeline, &scene))?;
        Ok(InlierTrial {
            seed,
            feature_noise: noise,
            inlier_fraction: est.inlier_fraction(),
            loc_error: err.loc_error,
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let x: Vec<f64> = trials.iter().map(|t| t.inlier_fraction).collect();
    let y: Vec<f64> = trials.iter().map(|t| t.loc_error).collect();
    let rho = spearman(&x, &y)?;
    Ok(InlierCorrelation { trials, rho })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationMode {
    /// All lifted points against the highest point per bird's-eye-view cell.
    TopPoints,
    /// Scale-aware against scale-unaware alignment.
    NoScale,
    /// Number of sampled correspondences.
    N,
    /// Aerial grid resolution.
    Grid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub name: String,
    pub scene: SceneConfig,
    pub pipeline: PipelineConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantResult {
    pub name: String,
    /// Scenes where the estimator failed count as missing.
    pub failures: usize,
    pub errors: Vec<ErrorSample>,
    pub summary: Option<Summary>,
}

/// Noisy scenes with relative depth under a hidden per-scene scale.
pub fn ablation_scene() -> SceneConfig {
    SceneConfig {
        feature_noise: 0.1,
        depth_noise: 0.05,
        depth_kind: crate::lifting::DepthKind::Relative,
        ..SceneConfig::default()
    }
}

/// The variants compared by each ablation mode.
pub fn ablation_variants(mode: AblationMode, scene: &SceneConfig, pipeline: &PipelineConfig) -> Vec<Variant> {
    let v = |name: String, scene: SceneConfig, pipeline: PipelineConfig| Variant { name, scene, pipeline };
    let with_lift = |projection| PipelineConfig {
        lift: LiftConfig {
            projection,
            ..pipeline.lift
        },
        ..pipeline.clone()
    };
    match mode {
        AblationMode::TopPoints => vec![
            v("all-points".into(), scene.clone(), with_lift(ProjectionMode::All)),
            v("top-points".into(), scene.clone(), with_lift(ProjectionMode::Topmost)),
        ],
        AblationMode::NoScale => [Solver::Similarity, Solver::Orthogonal]
            .into_iter()
            .map(|solver| {
                let name = match solver {
                    Solver::Similarity => "similarity",
                    Solver::Orthogonal => "orthogonal",
                };
                v(name.into(), scene.clone(), PipelineConfig { solver, ..pipeline.clone() })
            })
            .collect(),
        AblationMode::N => [64, 128, 256, 512, 1024]
            .into_iter()
            .map(|n| v(format!("n={n}"), scene.clone(), PipelineConfig { n, ..pipeline.clone() }))
            .collect(),
        AblationMode::Grid => [21, 31, 41]
            .into_iter()
            .map(|size| {
                let s = SceneConfig {
                    aerial_size: size,
                    ..scene.clone()
                };
                v(format!("grid={size}x{size}"), s, pipeline.clone())
            })
            .collect(),
    }
}

/// Runs every variant on the same seeds. Depth cut-offs are metric (see
/// `metric_cutoff`).
pub fn run_variants(variants: &[Variant], seeds: &[u64], thresholds: &Thresholds) -> Result<Vec<VariantResult>> {
    variants
        .iter()
        .map(|variant| {
            variant.pipeline.validate()?;
            let outcomes = par::map_slice(seeds, |&seed| -> Result<Option<ErrorSample>> {
                let scene = generate(&variant.scene.with_seed(seed))?;
                Ok(evaluate_scene(&scene, &metric_cutoff(&variant.pipeline, &scene)).ok().map(|(_, e)| e))
            });
            let mut errors = Vec::new();
            let mut failures = 0;
            for o in outcomes {
                match o? {
                    Some(e) => errors.push(e),
                    None => failures += 1,
                }
            }
            Ok(VariantResult {
                name: variant.name.clone(),
                failures,
                summary: summarize(&errors, thresholds).ok(),
                errors,
            })
        })
        .collect()
}
