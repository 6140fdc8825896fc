//! Training objectives: virtual correspondence error, the two contrastive
//! losses and their weighted total.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{solve_similarity, Point2, SimilarityTransform2D, WeightedPointPair};
use crate::lifting::AerialLayout;
use crate::matching::Matrix;

/// Square lattice of virtual points over `[-extent, extent]^2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VirtualPointSet {
    pub points: Vec<Point2>,
    pub extent: f64,
}

impl VirtualPointSet {
    pub fn grid(side: usize, extent: f64) -> Result<Self> {
        if side == 0 {
            return Err(Error::InvalidConfig("virtual grid needs at least one point".into()));
        }
        if !(extent >= 0.0) || !extent.is_finite() {
            return Err(Error::InvalidConfig("virtual grid extent must be non-negative".into()));
        }
        let coord = |k: usize| {
            if side == 1 {
                0.0
            } else {
                -extent + 2.0 * extent * k as f64 / (side - 1) as f64
            }
        };
        let mut points = Vec::with_capacity(side * side);
        for i in 0..side {
            for j in 0..side {
                points.push(Point2::new(coord(j), coord(i)));
            }
        }
        Ok(Self { points, extent })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

impl Default for VirtualPointSet {
    /// 10 x 10 points, 5 m half-extent.
    fn default() -> Self {
        Self::grid(10, 5.0).expect("static grid")
    }
}

/// Mean distance between the virtual points moved by `est` and by `gt`.
/// Only rotation and translation act; scales are ignored.
pub fn vce_loss(est: &SimilarityTransform2D, gt: &SimilarityTransform2D, vp: &VirtualPointSet) -> f64 {
    if vp.is_empty() {
        return 0.0;
    }
    let total: f64 = vp
        .points
        .iter()
        .map(|&p| (p.rotated(gt.theta) + gt.t).distance(p.rotated(est.theta) + est.t))
        .sum();
    total / vp.len() as f64
}

/// Points with a per-point validity flag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Targets {
    pub points: Vec<Point2>,
    pub valid: Vec<bool>,
}

impl Targets {
    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }
}

/// `s R p + t` for each ground point; invalid when outside the aerial coverage.
pub fn gt_aerial_targets(ground: &[Point2], gt: &SimilarityTransform2D, s: f64, layout: &AerialLayout) -> Targets {
    let points: Vec<Point2> = ground.iter().map(|&p| p.rotated(gt.theta) * s + gt.t).collect();
    let valid = points.iter().map(|&q| layout.contains(q)).collect();
    Targets { points, valid }
}

/// `R^T (q - t) / s` for each aerial point. Every ground target is valid.
pub fn gt_ground_targets(aerial: &[Point2], gt: &SimilarityTransform2D, s: f64) -> Targets {
    let points: Vec<Point2> = aerial.iter().map(|&q| (q - gt.t).rotated(-gt.theta) * (1.0 / s)).collect();
    Targets {
        valid: vec![true; points.len()],
        points,
    }
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + values.map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Ground-to-aerial contrastive loss.
///
/// `columns[n]` is the score-matrix column of the n-th sampled ground point
/// and `targets.points[n]` its projected aerial position. The positive is the
/// aerial cell nearest the target; the denominator runs over the column.
pub fn info_nce_g2s(scores: &Matrix, columns: &[usize], targets: &Targets, layout: &AerialLayout) -> Result<f64> {
    if columns.len() != targets.points.len() {
        return Err(Error::LengthMismatch {
            expected: columns.len(),
            got: targets.points.len(),
        });
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for (n, &g) in columns.iter().enumerate() {
        if !targets.valid[n] {
            continue;
        }
        let Some(pos) = layout.nearest_cell(targets.points[n]) else { continue };
        let column = (0..scores.rows).map(|i| scores.get(i, g));
        total += log_sum_exp(column) - scores.get(pos, g);
        count += 1;
    }
    if count == 0 {
        return Err(Error::NoValidTargets);
    }
    Ok(total / count as f64)
}

/// Which ground points count as negatives for the aerial-to-ground loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NegativeRule {
    /// Points within this planar distance of the target are not negatives.
    pub radius: f64,
}

impl Default for NegativeRule {
    fn default() -> Self {
        Self { radius: 1.0 }
    }
}

/// Nearest point index (lowest index on ties).
pub fn nearest_index(points: &[Point2], target: Point2) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (k, p) in points.iter().enumerate() {
        let d = p.distance(target);
        if best.is_none_or(|(_, bd)| d < bd) {
            best = Some((k, d));
        }
    }
    best.map(|(k, _)| k)
}

/// Ground-point indices entering the aerial-to-ground denominator for one
/// target: the positive first, then every point farther than the radius.
pub fn s2g_candidates(ground: &[Point2], target: Point2, rule: &NegativeRule) -> Option<(usize, Vec<usize>)> {
    let pos = nearest_index(ground, target)?;
    let negatives = (0..ground.len())
        .filter(|&k| k != pos && ground[k].distance(target) > rule.radius)
        .collect();
    Some((pos, negatives))
}

/// Aerial-to-ground contrastive loss.
///
/// `rows[n]` is the score-matrix row of the n-th sampled aerial point and
/// `targets.points[n]` its projected ground position; `ground` holds the
/// planar lifted position of every score-matrix column.
pub fn info_nce_s2g(scores: &Matrix, rows: &[usize], targets: &Targets, ground: &[Point2], rule: &NegativeRule) -> Result<f64> {
    if rows.len() != targets.points.len() {
        return Err(Error::LengthMismatch {
            expected: rows.len(),
            got: targets.points.len(),
        });
    }
    if ground.len() != scores.cols {
        return Err(Error::LengthMismatch {
            expected: scores.cols,
            got: ground.len(),
        });
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for (n, &a) in rows.iter().enumerate() {
        if !targets.valid[n] {
            continue;
        }
        let Some((pos, negatives)) = s2g_candidates(ground, targets.points[n], rule) else { continue };
        let terms = std::iter::once(pos).chain(negatives.iter().copied()).map(|k| scores.get(a, k));
        total += log_sum_exp(terms) - scores.get(a, pos);
        count += 1;
    }
    if count == 0 {
        return Err(Error::NoValidTargets);
    }
    Ok(total / count as f64)
}

/// Contrastive targets built with a scale estimated from the current
/// correspondences instead of the true one.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoTargets {
    pub scale: f64,
    pub aerial: Targets,
    pub ground: Targets,
}

/// `pairs` supply the estimated scale; rotation and translation come from
/// `gt`. The aerial targets are for `ground` points, the ground targets for
/// `aerial` points.
pub fn pseudo_scale_targets(
    pairs: &[WeightedPointPair],
    ground: &[Point2],
    aerial: &[Point2],
    gt: &SimilarityTransform2D,
    layout: &AerialLayout,
) -> Result<PseudoTargets> {
    let scale = solve_similarity(pairs)?.s;
    Ok(PseudoTargets {
        scale,
        aerial: gt_aerial_targets(ground, gt, scale, layout),
        ground: gt_ground_targets(aerial, gt, scale),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub vce: f64,
    pub g2s: f64,
    pub s2g: f64,
    pub beta: f64,
    pub total: f64,
}

pub fn total_loss(vce: f64, g2s: f64, s2g: f64, beta: f64) -> LossBundle {
    LossBundle {
        vce,
        g2s,
        s2g,
        beta,
        total: vce + beta * (g2s + s2g) / 2.0,
    }
}
