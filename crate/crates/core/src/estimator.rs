//! End-to-end pose estimation: match, lift, align, optionally under RANSAC.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{solve_orthogonal, solve_similarity, Point2, Point3, SimilarityTransform2D, WeightedPointPair};
use crate::lifting::{depth_valid_mask, lift_ground_cell, planar_projection_indices, DepthMap, LiftConfig, RayModel};
use crate::matching::{augment_dustbin, drop_dustbin, dual_softmax, sample_correspondences, score_columns, Correspondence, FeatureGrid, MatchProbabilities};
use crate::par;

/// Which closed-form aligner turns correspondences into a pose.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Solver {
    /// Scale-aware weighted Procrustes.
    #[default]
    Similarity,
    /// Orthogonal Procrustes with the scale pinned to 1.
    Orthogonal,
}

impl Solver {
    pub fn solve(self, pairs: &[WeightedPointPair]) -> Result<SimilarityTransform2D> {
        match self {
            Solver::Similarity => solve_similarity(pairs),
            Solver::Orthogonal => solve_orthogonal(pairs),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RansacConfig {
    pub iterations: usize,
    /// Meters, measured in the aerial frame.
    pub inlier_threshold: f64,
    pub min_sample: usize,
    pub refit_on_inliers: bool,
    pub seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self {
            iterations: 1000,
            inlier_threshold: 1.0,
            min_sample: 3,
            refit_on_inliers: true,
            seed: 0,
        }
    }
}

impl RansacConfig {
    pub fn validate(&self) -> Result<()> {
        if self.min_sample < 2 {
            return Err(Error::InvalidConfig("RANSAC min_sample must be at least 2".into()));
        }
        if self.iterations < 1 {
            return Err(Error::InvalidConfig("RANSAC needs at least one iteration".into()));
        }
        if !(self.inlier_threshold > 0.0) {
            return Err(Error::InvalidConfig("inlier threshold must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub tau: f64,
    /// Number of correspondences sampled from the match probabilities.
    pub n: usize,
    pub lift: LiftConfig,
    pub ransac: Option<RansacConfig>,
    #[serde(default)]
    pub dustbin: f64,
    #[serde(default)]
    pub solver: Solver,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            tau: 0.1,
            n: 1024,
            lift: LiftConfig::default(),
            ransac: Some(RansacConfig::default()),
            dustbin: 0.0,
            solver: Solver::Similarity,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::InvalidConfig("tau must be positive".into()));
        }
        if self.n < 1 {
            return Err(Error::InvalidConfig("N must be at least 1".into()));
        }
        if !self.dustbin.is_finite() {
            return Err(Error::InvalidConfig("dustbin score must be finite".into()));
        }
        self.lift.validate()?;
        if let Some(r) = &self.ransac {
            r.validate()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseEstimate {
    pub transform: SimilarityTransform2D,
    /// Correspondences that entered the solver, aligned with the point lists.
    pub correspondences: Vec<Correspondence>,
    /// Lifted ground points (camera frame, after the initial scale).
    pub ground_points: Vec<Point3>,
    /// Aerial cell centers in meters.
    pub aerial_points: Vec<Point2>,
    /// Per-correspondence inlier flags when RANSAC ran.
    pub inliers: Option<Vec<bool>>,
    pub inlier_count: usize,
}

impl PoseEstimate {
    pub fn inlier_fraction(&self) -> f64 {
        if self.correspondences.is_empty() {
            0.0
        } else {
            self.inlier_count as f64 / self.correspondences.len() as f64
        }
    }

    pub fn pairs(&self) -> Vec<WeightedPointPair> {
        self.ground_points
            .iter()
            .zip(&self.aerial_points)
            .zip(&self.correspondences)
            .map(|((g, &q), c)| WeightedPointPair::new(g.planar(), q, c.w))
            .collect()
    }
}

/// Dual-softmax match probabilities restricted to the valid ground cells.
///
/// Masked columns would only receive `exp(MASK_SCORE) == 0` mass, so the
/// interior probabilities of valid columns are identical to running the
/// full masked matrix; this skips the masked work. Column `k` of the
/// result is ground cell `columns[k]`.
pub struct ValidMatches {
    pub probs: MatchProbabilities,
    pub columns: Vec<usize>,
}

pub fn match_valid_columns(aerial: &FeatureGrid, ground: &FeatureGrid, valid: &[bool], tau: f64, dustbin: f64) -> Result<ValidMatches> {
    if valid.len() != ground.cells() {
        return Err(Error::LengthMismatch {
            expected: ground.cells(),
            got: valid.len(),
        });
    }
    let columns: Vec<usize> = (0..valid.len()).filter(|&j| valid[j]).collect();
    let scores = score_columns(aerial, ground, tau, &columns)?;
    let probs = drop_dustbin(&dual_softmax(&augment_dustbin(&scores.scores, dustbin)))?;
    Ok(ValidMatches { probs, columns })
}

/// Match, lift and align one ground view against one aerial grid.
pub fn estimate_pose(aerial: &FeatureGrid, ground: &FeatureGrid, depth: &DepthMap, rays: &RayModel, cfg: &PipelineConfig) -> Result<PoseEstimate> {
    cfg.validate()?;
    check_shapes(ground, depth, rays)?;
    let valid = depth_valid_mask(depth, &cfg.lift);
    let sampled = sample_matches(aerial, ground, &valid, cfg)?;
    align_matches(&sampled, aerial, depth, rays, cfg)
}

fn check_shapes(ground: &FeatureGrid, depth: &DepthMap, rays: &RayModel) -> Result<()> {
    if depth.rows != ground.rows || depth.cols != ground.cols || rays.rows != ground.rows || rays.cols != ground.cols {
        return Err(Error::LengthMismatch {
            expected: ground.cells(),
            got: depth.data.len(),
        });
    }
    Ok(())
}

/// The top-N correspondences among the `valid` ground cells, with ground
/// indices referring to ground cells.
pub fn sample_matches(aerial: &FeatureGrid, ground: &FeatureGrid, valid: &[bool], cfg: &PipelineConfig) -> Result<Vec<Correspondence>> {
    if !valid.iter().any(|v| *v) {
        return Err(Error::InsufficientMatches { got: 0, needed: 2 });
    }
    let matches = match_valid_columns(aerial, ground, valid, cfg.tau, cfg.dustbin)?;
    Ok(sample_correspondences(&matches.probs, cfg.n)
        .into_iter()
        .map(|c| Correspondence {
            ground: matches.columns[c.ground],
            ..c
        })
        .collect())
}

/// Lifts sampled correspondences and solves for the pose. Depth only enters
/// here, so matches can be reused across depth rescalings.
pub fn align_matches(sampled: &[Correspondence], aerial: &FeatureGrid, depth: &DepthMap, rays: &RayModel, cfg: &PipelineConfig) -> Result<PoseEstimate> {
    let layout = aerial
        .aerial_layout()
        .ok_or_else(|| Error::InvalidConfig("first grid must be aerial".into()))?;
    let needed = 2;
    let lifted = sampled
        .iter()
        .map(|c| lift_ground_cell(c.ground, depth, rays, cfg.lift.initial_scale))
        .collect::<Result<Vec<Point3>>>()?;
    let kept = planar_projection_indices(&lifted, cfg.lift.projection, layout.meta.meters_per_cell);
    let correspondences: Vec<Correspondence> = kept.iter().map(|&i| sampled[i]).collect();
    let ground_points: Vec<Point3> = kept.iter().map(|&i| lifted[i]).collect();
    let aerial_points: Vec<Point2> = correspondences.iter().map(|c| layout.center(c.aerial)).collect();

    let positive = correspondences.iter().filter(|c| c.w > 0.0).count();
    if positive < needed {
        return Err(Error::InsufficientMatches { got: positive, needed });
    }
    let pairs: Vec<WeightedPointPair> = ground_points
        .iter()
        .zip(&aerial_points)
        .zip(&correspondences)
        .map(|((g, &q), c)| WeightedPointPair::new(g.planar(), q, c.w))
        .collect();

    let (transform, inliers, inlier_count) = match &cfg.ransac {
        Some(rc) => {
            let r = ransac_estimate(&pairs, rc, cfg.solver)?;
            (r.transform, Some(r.inliers), r.inlier_count)
        }
        None => (cfg.solver.solve(&pairs)?, None, 0),
    };
    Ok(PoseEstimate {
        transform,
        correspondences,
        ground_points,
        aerial_points,
        inliers,
        inlier_count,
    })
}

const MAX_REFITS: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct RansacEstimate {
    pub transform: SimilarityTransform2D,
    pub inliers: Vec<bool>,
    pub inlier_count: usize,
    /// Index of the winning hypothesis among the non-degenerate ones.
    pub best_hypothesis: usize,
}

/// Inlier iff `|T(p) - q| <= threshold`.
pub fn count_inliers(transform: &SimilarityTransform2D, pairs: &[WeightedPointPair], threshold: f64) -> (usize, Vec<bool>) {
    let flags: Vec<bool> = pairs
        .iter()
        .map(|pr| transform.apply(pr.p).distance(pr.q) <= threshold)
        .collect();
    (flags.iter().filter(|f| **f).count(), flags)
}

fn inlier_total(transform: &SimilarityTransform2D, pairs: &[WeightedPointPair], threshold: f64) -> usize {
    let thr2 = threshold * threshold;
    pairs
        .iter()
        .filter(|pr| (transform.apply(pr.p) - pr.q).norm_sq() <= thr2)
        .count()
}

/// Draws the hypotheses sequentially from a ChaCha8 stream seeded with
/// `cfg.seed`, so the sample sequence is platform independent. Degenerate
/// minimal samples are redrawn and do not consume an iteration.
fn draw_hypotheses(pairs: &[WeightedPointPair], cfg: &RansacConfig, solver: Solver) -> Vec<SimilarityTransform2D> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let max_attempts = cfg.iterations.saturating_mul(20).saturating_add(100);
    let mut hypotheses = Vec::with_capacity(cfg.iterations);
    let mut sample = Vec::with_capacity(cfg.min_sample);
    for _ in 0..max_attempts {
        if hypotheses.len() == cfg.iterations {
            break;
        }
        sample.clear();
        let picks = rand::seq::index::sample(&mut rng, pairs.len(), cfg.min_sample);
        sample.extend(picks.iter().map(|i| WeightedPointPair { w: 1.0, ..pairs[i] }));
        if let Ok(t) = solver.solve(&sample) {
            hypotheses.push(t);
        }
    }
    hypotheses
}

/// Minimal-sample consensus over weighted pairs. Hypotheses are solved with
/// uniform weights; the optional refit uses the pairs' own weights over the
/// winning inlier set and repeats while the inlier set changes.
pub fn ransac_estimate(pairs: &[WeightedPointPair], cfg: &RansacConfig, solver: Solver) -> Result<RansacEstimate> {
    cfg.validate()?;
    if pairs.len() < cfg.min_sample {
        return Err(Error::InsufficientMatches {
            got: pairs.len(),
            needed: cfg.min_sample,
        });
    }
    let hypotheses = draw_hypotheses(pairs, cfg, solver);
    if hypotheses.is_empty() {
        return Err(Error::AllHypothesesDegenerate);
    }
    let counts = par::map_slice(&hypotheses, |t| inlier_total(t, pairs, cfg.inlier_threshold));
    // max count, lowest index on ties
    let (best, _) = counts
        .iter()
        .enumerate()
        .fold((0usize, 0usize), |(bi, bc), (i, &c)| if c > bc || i == 0 { (i, c) } else { (bi, bc) });
    let mut transform = hypotheses[best];
    let (mut inlier_count, mut inliers) = count_inliers(&transform, pairs, cfg.inlier_threshold);
    if cfg.refit_on_inliers {
        // A hypothesis a little off the truth can pick up a stray pair near
        // the threshold; re-deriving the inliers from each refit drops it.
        for _ in 0..MAX_REFITS {
            let subset: Vec<WeightedPointPair> = pairs
                .iter()
                .zip(&inliers)
                .filter(|(_, f)| **f)
                .map(|(p, _)| *p)
                .collect();
            let Ok(refit) = solver.solve(&subset) else { break };
            let (count, flags) = count_inliers(&refit, pairs, cfg.inlier_threshold);
            if count < cfg.min_sample {
                break;
            }
            transform = refit;
            if flags == inliers {
                break;
            }
            inlier_count = count;
            inliers = flags;
        }
    }
    Ok(RansacEstimate {
        transform,
        inliers,
        inlier_count,
        best_hypothesis: best,
    })
}

/// Bird's-eye-view ground layout mapped into the aerial metric frame.
pub fn overlay_layout(ground_points: &[Point3], transform: &SimilarityTransform2D) -> Vec<Point2> {
    ground_points.iter().map(|p| transform.apply(p.planar())).collect()
}
