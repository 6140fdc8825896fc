//! Toy end-to-end training of the projection head with plain gradient
//! descent, supervised only by the camera pose.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::{estimate_pose, PipelineConfig};
use crate::geometry::Point2;
use crate::gradcheck::{evaluate, finite_difference, forward, gradient, GradProblem, Leaf, ProjectionWeights};
use crate::lifting::{depth_valid_mask, lift_ground_cell, LiftConfig};
use crate::losses::{NegativeRule, Targets, VirtualPointSet};
use crate::matching::FeatureGrid;
use crate::metrics::{pose_errors, summarize, ErrorSample, Summary, Thresholds};
use crate::par;
use crate::simulator::{generate, SceneConfig, SyntheticScene};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    /// Contrastive targets use the true depth scale.
    GtScale,
    /// Contrastive targets use the scale recovered by the current estimate.
    PseudoScale,
    /// Pose loss only.
    VceOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GradientMode {
    Analytic,
    FiniteDifference { epsilon: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub steps: usize,
    /// Scenes per step.
    pub batch: usize,
    pub beta: f64,
    pub mode: LossMode,
    pub seed: u64,
    pub tau: f64,
    /// Correspondences selected per scene.
    pub n: usize,
    pub lift: LiftConfig,
    /// Trailing scenes of the dataset held out for evaluation.
    pub held_out: usize,
    /// Scale of the random perturbation added to the identity projection.
    pub init_perturbation: f64,
    pub init_dustbin: f64,
    pub separate_projections: bool,
    pub gradient: GradientMode,
    /// Pipeline used to evaluate held-out scenes.
    pub eval: PipelineConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            steps: 500,
            batch: 4,
            beta: 1.0,
            mode: LossMode::GtScale,
            seed: 0,
            tau: 0.1,
            n: 256,
            lift: LiftConfig::default(),
            held_out: 0,
            init_perturbation: 0.0,
            init_dustbin: 0.0,
            separate_projections: false,
            gradient: GradientMode::Analytic,
            eval: PipelineConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::InvalidConfig("learning rate must be non-negative".into()));
        }
        if self.steps < 1 || self.batch < 1 || self.n < 1 {
            return Err(Error::InvalidConfig("steps, batch and N must be at least 1".into()));
        }
        if !(self.beta >= 0.0) || !(self.tau > 0.0) {
            return Err(Error::InvalidConfig("beta must be non-negative and tau positive".into()));
        }
        if let GradientMode::FiniteDifference { epsilon } = self.gradient {
            if !(epsilon > 0.0) {
                return Err(Error::InvalidConfig("finite-difference step must be positive".into()));
            }
        }
        self.lift.validate()?;
        self.eval.validate()
    }

    fn effective_beta(&self) -> f64 {
        match self.mode {
            LossMode::VceOnly => 0.0,
            _ => self.beta,
        }
    }
}

/// Scene family of the reference training run: a dense landmark field with
/// the latent signal in half of the feature dimensions, observed under
/// per-component noise.
pub fn reference_scene_config() -> SceneConfig {
    SceneConfig {
        aerial_extent: 36.0,
        aerial_size: 16,
        landmarks: 180,
        ground_rows: 16,
        ground_cols: 64,
        feature_dim: 32,
        signal_dim: Some(16),
        feature_noise: 0.2,
        visibility_range: 30.0,
        ..SceneConfig::default()
    }
}

/// Scenes for seeds `0..count` of the reference family.
pub fn reference_dataset(count: usize) -> Result<Vec<SyntheticScene>> {
    let base = reference_scene_config();
    let scenes = par::map_range(count, |s| generate(&base.with_seed(s as u64)));
    scenes.into_iter().collect()
}

/// Number of scenes in the reference run, the last `REFERENCE_HELD_OUT` of
/// which are held out.
pub const REFERENCE_SCENES: usize = 416;
pub const REFERENCE_HELD_OUT: usize = 16;

impl TrainConfig {
    /// The reference run: projection head started away from identity,
    /// trained against the weighted direct solve, which is also the
    /// held-out estimator.
    pub fn reference() -> Self {
        let lift = LiftConfig {
            max_depth: 30.0,
            ..LiftConfig::default()
        };
        Self {
            learning_rate: 0.3,
            steps: 500,
            batch: 8,
            beta: 0.1,
            mode: LossMode::GtScale,
            seed: 0,
            n: 32,
            lift,
            held_out: REFERENCE_HELD_OUT,
            init_perturbation: 0.5,
            eval: PipelineConfig {
                n: 32,
                lift,
                ransac: None,
                ..PipelineConfig::default()
            },
            ..Self::default()
        }
    }
}

/// Initial weights: identity plus a seeded Gaussian perturbation.
pub fn initial_weights(dim: usize, cfg: &TrainConfig) -> ProjectionWeights {
    use rand::Rng;
    use rand_distr::StandardNormal;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut w = if cfg.separate_projections {
        ProjectionWeights::identity_separate(dim, cfg.init_dustbin)
    } else {
        ProjectionWeights::identity(dim, cfg.init_dustbin)
    };
    if cfg.init_perturbation > 0.0 {
        let flat: Vec<f64> = w.flat().iter().map(|v| v + cfg.init_perturbation * rng.sample::<f64, _>(StandardNormal)).collect();
        w = w.with_flat(&flat).expect("same layout");
    }
    w
}

/// The differentiable problem for one scene: features of every aerial cell
/// and of the depth-valid ground cells, lifted with the configured initial
/// scale.
pub fn scene_problem(scene: &SyntheticScene, cfg: &TrainConfig) -> Result<GradProblem> {
    let valid = depth_valid_mask(&scene.depth, &cfg.lift);
    let cells: Vec<usize> = (0..valid.len()).filter(|&k| valid[k]).collect();
    if cells.len() < 2 {
        return Err(Error::InsufficientMatches { got: cells.len(), needed: 2 });
    }
    let dim = scene.aerial.dim;
    let ground_points = cells
        .iter()
        .map(|&c| Ok(lift_ground_cell(c, &scene.depth, &scene.rays, cfg.lift.initial_scale)?.planar()))
        .collect::<Result<Vec<Point2>>>()?;
    let ground_features: Vec<f64> = cells.iter().flat_map(|&c| scene.ground.feature(c).iter().copied()).collect();
    let empty = Targets {
        points: Vec::new(),
        valid: Vec::new(),
    };
    let mut problem = GradProblem {
        dim,
        aerial_features: scene.aerial.data.clone(),
        ground_features,
        tau: cfg.tau,
        n: cfg.n,
        layout: scene.aerial_layout(),
        ground_points,
        gt: scene.pose,
        vp: VirtualPointSet::default(),
        beta: cfg.effective_beta(),
        rule: NegativeRule::default(),
        aerial_targets: empty.clone(),
        ground_targets: empty,
        allow_ties: true,
    };
    problem.set_target_scale(scene.s_gt / cfg.lift.initial_scale);
    Ok(problem)
}

/// For pseudo-scale training, rebuilds the targets from the scale the
/// current parameters recover. No gradient flows through that scale.
fn refresh_targets(problem: &mut GradProblem, params: &ProjectionWeights, mode: LossMode) -> Result<()> {
    if mode == LossMode::PseudoScale && problem.beta > 0.0 {
        let s = evaluate(problem, params)?.transform.s;
        problem.set_target_scale(s);
    }
    Ok(())
}

/// Applies the weights' projection to every feature of a grid.
pub fn project_grid(grid: &FeatureGrid, w: &[f64]) -> Result<FeatureGrid> {
    let d = grid.dim;
    if w.len() != d * d {
        return Err(Error::DimensionMismatch(w.len(), d * d));
    }
    let mut data = vec![0.0; grid.data.len()];
    par::for_each_chunk_mut(&mut data, d, |k, out| {
        let f = grid.feature(k);
        for (r, o) in out.iter_mut().enumerate() {
            *o = w[r * d..(r + 1) * d].iter().zip(f).map(|(a, b)| a * b).sum();
        }
    });
    FeatureGrid::new(grid.rows, grid.cols, d, data, grid.meta.clone())
}

/// Pose errors of the full estimator on each scene, using projected
/// features. Scenes where the estimator fails are skipped.
pub fn evaluate_scenes(scenes: &[SyntheticScene], params: &ProjectionWeights, pipeline: &PipelineConfig) -> Vec<ErrorSample> {
    let cfg = PipelineConfig {
        dustbin: params.dustbin,
        ..pipeline.clone()
    };
    par::map_slice(scenes, |scene| -> Option<ErrorSample> {
        let aerial = project_grid(&scene.aerial, &params.projection).ok()?;
        let ground = project_grid(&scene.ground, params.ground()).ok()?;
        let est = estimate_pose(&aerial, &ground, &scene.depth, &scene.rays, &cfg).ok()?;
        Some(pose_errors(&est.transform, &scene.expected_transform(cfg.lift.initial_scale), scene.heading()))
    })
    .into_iter()
    .flatten()
    .collect()
}

/// Trailing moving average with the given window.
pub fn smooth(curve: &[f64], window: usize) -> Vec<f64> {
    let window = window.max(1);
    let mut out = Vec::with_capacity(curve.len());
    let mut acc = 0.0;
    for (i, v) in curve.iter().enumerate() {
        acc += v;
        if i >= window {
            acc -= curve[i - window];
        }
        out.push(acc / (i + 1).min(window) as f64);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainResult {
    pub weights: ProjectionWeights,
    /// Mean batch loss before each step's update.
    pub loss_curve: Vec<f64>,
    pub held_out_before: Vec<ErrorSample>,
    pub held_out_after: Vec<ErrorSample>,
    pub summary_before: Option<Summary>,
    pub summary_after: Option<Summary>,
}

/// Mean loss and mean gradient over a batch; per-scene work runs in
/// parallel and is summed in batch order.
fn batch_step(problems: &mut [GradProblem], batch: &[usize], params: &ProjectionWeights, cfg: &TrainConfig) -> Result<(f64, Vec<f64>, f64)> {
    for &k in batch {
        refresh_targets(&mut problems[k], params, cfg.mode)?;
    }
    let problems: &[GradProblem] = problems;
    let per_scene = par::map_slice(batch, |&k| -> Result<(f64, Vec<f64>, f64)> {
        let problem = &problems[k];
        match cfg.gradient {
            GradientMode::Analytic => {
                let g = gradient(problem, params)?;
                Ok((g.evaluation.loss.total, g.projection, g.dustbin))
            }
            GradientMode::FiniteDifference { epsilon } => {
                let loss = evaluate(problem, params)?.loss.total;
                let gw = finite_difference(|x| forward(problem, params, Leaf::Projection, x), &params.flat(), epsilon)?;
                let gz = finite_difference(|x| forward(problem, params, Leaf::Dustbin, x), &[params.dustbin], epsilon)?[0];
                Ok((loss, gw, gz))
            }
        }
    });
    let inv = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    let mut gw = vec![0.0; params.flat().len()];
    let mut gz = 0.0;
    for r in per_scene {
        let (l, g, z) = r?;
        loss += l * inv;
        gw.iter_mut().zip(&g).for_each(|(a, b)| *a += b * inv);
        gz += z * inv;
    }
    Ok((loss, gw, gz))
}

/// Loss growth beyond this factor of the first step counts as divergence.
pub const DIVERGENCE_FACTOR: f64 = 1e3;

pub fn check_divergence(step: usize, loss: f64, initial: f64) -> Result<()> {
    if !loss.is_finite() || loss > DIVERGENCE_FACTOR * initial.abs() {
        return Err(Error::DivergenceDetected { step, loss, initial });
    }
    Ok(())
}

/// Trains on all but the last `held_out` scenes and evaluates the estimator
/// on the held-out ones before and after.
pub fn train(dataset: &[SyntheticScene], cfg: &TrainConfig) -> Result<TrainResult> {
    cfg.validate()?;
    if dataset.len() <= cfg.held_out {
        return Err(Error::EmptyInput);
    }
    let (train_set, held) = dataset.split_at(dataset.len() - cfg.held_out);
    let dim = train_set[0].aerial.dim;
    let mut problems = train_set.iter().map(|s| scene_problem(s, cfg)).collect::<Result<Vec<_>>>()?;
    let mut params = initial_weights(dim, cfg);
    let held_out_before = evaluate_scenes(held, &params, &cfg.eval);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = Vec::new();
    let mut loss_curve = Vec::with_capacity(cfg.steps);
    let mut initial = None;
    for step in 0..cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch);
        while batch.len() < cfg.batch.min(problems.len()) {
            if order.is_empty() {
                order = (0..problems.len()).collect();
                order.shuffle(&mut rng);
            }
            batch.push(order.pop().expect("refilled"));
        }
        batch.sort_unstable();
        let (loss, gw, gz) = batch_step(&mut problems, &batch, &params, cfg)?;
        let first = *initial.get_or_insert(loss);
        check_divergence(step, loss, first)?;
        loss_curve.push(loss);
        let flat: Vec<f64> = params.flat().iter().zip(&gw).map(|(w, g)| w - cfg.learning_rate * g).collect();
        params = ProjectionWeights {
            dustbin: params.dustbin - cfg.learning_rate * gz,
            ..params.with_flat(&flat)?
        };
    }
    let held_out_after = evaluate_scenes(held, &params, &cfg.eval);
    let th = Thresholds::default();
    Ok(TrainResult {
        weights: params,
        loss_curve,
        summary_before: summarize(&held_out_before, &th).ok(),
        summary_after: summarize(&held_out_after, &th).ok(),
        held_out_before,
        held_out_after,
    })
}
