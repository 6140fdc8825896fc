//! Analytic gradients of the differentiable pipeline and a central
//! finite-difference oracle to certify them.
//!
//! The chain is: projected features -> cosine scores -> dustbin-augmented
//! dual softmax -> top-N selection -> weighted scale-aware Procrustes ->
//! virtual correspondence error, plus the contrastive terms on the raw
//! scores. The top-N selection is held fixed while differentiating (the
//! weights of the selected entries carry the gradient); an exact tie at the
//! selection boundary is reported instead of silently picking a side.
//! The rotation is differentiated through its closed form
//! `theta = atan2(C01 - C10, C00 + C11)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Point2, SimilarityTransform2D, WeightedPointPair};
use crate::lifting::{AerialLayout, AerialMeta};
use crate::losses::{
    gt_aerial_targets, gt_ground_targets, info_nce_g2s, info_nce_s2g, s2g_candidates, total_loss, vce_loss, LossBundle, NegativeRule, Targets,
    VirtualPointSet,
};
use crate::matching::{augment_dustbin, softmax_parts, top_n_indices, Correspondence, Matrix};
use crate::par;

/// Denominator floor of the relative discrepancy.
pub const RELATIVE_FLOOR: f64 = 1e-8;

/// Everything held fixed while the parameters vary.
#[derive(Debug, Clone, PartialEq)]
pub struct GradProblem {
    pub dim: usize,
    /// Row-major `n_aerial x dim`.
    pub aerial_features: Vec<f64>,
    /// Row-major `n_ground x dim`.
    pub ground_features: Vec<f64>,
    pub tau: f64,
    pub n: usize,
    pub layout: AerialLayout,
    /// Planar lifted position of each ground column.
    pub ground_points: Vec<Point2>,
    /// Rotation and translation supervising the pose.
    pub gt: SimilarityTransform2D,
    pub vp: VirtualPointSet,
    pub beta: f64,
    pub rule: NegativeRule,
    /// Aerial target of each ground column.
    pub aerial_targets: Targets,
    /// Ground target of each aerial row.
    pub ground_targets: Targets,
    /// Break exact ties at the selection boundary by index instead of
    /// failing; the result is then a one-sided derivative.
    pub allow_ties: bool,
}

impl GradProblem {
    pub fn n_aerial(&self) -> usize {
        self.layout.len()
    }

    pub fn n_ground(&self) -> usize {
        self.ground_points.len()
    }

    /// Rebuilds both target sets for ground-to-aerial scale `s`.
    pub fn set_target_scale(&mut self, s: f64) {
        self.aerial_targets = gt_aerial_targets(&self.ground_points, &self.gt, s, &self.layout);
        self.ground_targets = gt_ground_targets(&self.layout.centers(), &self.gt, s);
    }

    fn validate(&self) -> Result<()> {
        let (na, ng) = (self.n_aerial(), self.n_ground());
        if self.aerial_features.len() != na * self.dim {
            return Err(Error::LengthMismatch {
                expected: na * self.dim,
                got: self.aerial_features.len(),
            });
        }
        if self.ground_features.len() != ng * self.dim {
            return Err(Error::LengthMismatch {
                expected: ng * self.dim,
                got: self.ground_features.len(),
            });
        }
        if self.aerial_targets.points.len() != ng || self.ground_targets.points.len() != na {
            return Err(Error::LengthMismatch {
                expected: ng,
                got: self.aerial_targets.points.len(),
            });
        }
        if !(self.tau > 0.0) || self.n < 1 || !(self.beta >= 0.0) {
            return Err(Error::InvalidConfig("tau and beta must be positive, N at least 1".into()));
        }
        Ok(())
    }
}

/// Learnable parameters: a `dim x dim` projection (row-major) applied to the
/// aerial features, an optional separate one for the ground features (shared
/// when absent), and the dustbin score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionWeights {
    pub projection: Vec<f64>,
    #[serde(default)]
    pub ground_projection: Option<Vec<f64>>,
    pub dustbin: f64,
}

fn identity_matrix(dim: usize) -> Vec<f64> {
    let mut m = vec![0.0; dim * dim];
    for i in 0..dim {
        m[i * dim + i] = 1.0;
    }
    m
}

impl ProjectionWeights {
    pub fn identity(dim: usize, dustbin: f64) -> Self {
        Self {
            projection: identity_matrix(dim),
            ground_projection: None,
            dustbin,
        }
    }

    /// Identity projections, one per branch.
    pub fn identity_separate(dim: usize, dustbin: f64) -> Self {
        Self {
            ground_projection: Some(identity_matrix(dim)),
            ..Self::identity(dim, dustbin)
        }
    }

    pub fn ground(&self) -> &[f64] {
        self.ground_projection.as_deref().unwrap_or(&self.projection)
    }

    /// Projection entries as one vector: aerial, then ground when separate.
    pub fn flat(&self) -> Vec<f64> {
        let mut v = self.projection.clone();
        if let Some(g) = &self.ground_projection {
            v.extend_from_slice(g);
        }
        v
    }

    /// Inverse of `flat`.
    pub fn with_flat(&self, x: &[f64]) -> Result<Self> {
        let n = self.projection.len();
        let expected = n + self.ground_projection.as_ref().map_or(0, |g| g.len());
        if x.len() != expected {
            return Err(Error::LengthMismatch { expected, got: x.len() });
        }
        Ok(Self {
            projection: x[..n].to_vec(),
            ground_projection: self.ground_projection.as_ref().map(|_| x[n..].to_vec()),
            dustbin: self.dustbin,
        })
    }

    pub fn is_finite(&self) -> bool {
        self.dustbin.is_finite() && self.flat().iter().all(|v| v.is_finite())
    }
}

/// Which leaf a flat parameter vector stands for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Leaf {
    /// Raw score-matrix entries, row-major.
    Scores,
    Dustbin,
    Projection,
}

impl Leaf {
    pub const ALL: [Leaf; 3] = [Leaf::Scores, Leaf::Dustbin, Leaf::Projection];
}

/// Unit-normalized projected features and the pre-normalization norms.
struct Projected {
    unit: Vec<f64>,
    norms: Vec<f64>,
}

fn project(features: &[f64], dim: usize, w: &[f64]) -> Result<Projected> {
    let count = features.len() / dim.max(1);
    let mut unit = vec![0.0; features.len()];
    let mut norms = vec![0.0; count];
    for k in 0..count {
        let f = &features[k * dim..(k + 1) * dim];
        let out = &mut unit[k * dim..(k + 1) * dim];
        for (r, o) in out.iter_mut().enumerate() {
            *o = w[r * dim..(r + 1) * dim].iter().zip(f).map(|(a, b)| a * b).sum();
        }
        let n = out.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(n > 0.0) {
            return Err(Error::ZeroNormFeature(k));
        }
        out.iter_mut().for_each(|v| *v /= n);
        norms[k] = n;
    }
    Ok(Projected { unit, norms })
}

fn cosine_scores(a: &Projected, g: &Projected, dim: usize, tau: f64) -> Matrix {
    let (na, ng) = (a.norms.len(), g.norms.len());
    let mut data = vec![0.0; na * ng];
    par::for_each_chunk_mut(&mut data, ng.max(1), |i, row| {
        let ai = &a.unit[i * dim..(i + 1) * dim];
        for (j, out) in row.iter_mut().enumerate() {
            let gj = &g.unit[j * dim..(j + 1) * dim];
            *out = ai.iter().zip(gj).map(|(x, y)| x * y).sum::<f64>() / tau;
        }
    });
    Matrix { rows: na, cols: ng, data }
}

/// Score matrix produced by `params` on the problem's features.
pub fn scores(problem: &GradProblem, params: &ProjectionWeights) -> Result<Matrix> {
    problem.validate()?;
    let a = project(&problem.aerial_features, problem.dim, &params.projection)?;
    let g = project(&problem.ground_features, problem.dim, params.ground())?;
    Ok(cosine_scores(&a, &g, problem.dim, problem.tau))
}

/// Weighted Procrustes in the closed angle form, with what the backward pass
/// needs.
#[derive(Debug, Clone, Copy)]
struct ProcrustesTape {
    weight_sum: f64,
    p_bar: Point2,
    q_bar: Point2,
    a: f64,
    b: f64,
    r: f64,
    var: f64,
    theta: f64,
    s: f64,
    t: Point2,
}

fn procrustes_forward(pairs: &[WeightedPointPair]) -> Result<ProcrustesTape> {
    let weight_sum: f64 = pairs.iter().map(|p| p.w).sum();
    if !(weight_sum > 0.0) {
        return Err(Error::ZeroWeightSum);
    }
    let mut p_bar = Point2::ORIGIN;
    let mut q_bar = Point2::ORIGIN;
    for pr in pairs {
        p_bar = p_bar + pr.p * pr.w;
        q_bar = q_bar + pr.q * pr.w;
    }
    p_bar = p_bar * (1.0 / weight_sum);
    q_bar = q_bar * (1.0 / weight_sum);
    let (mut c00, mut c01, mut c10, mut c11, mut var) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for pr in pairs {
        let p = pr.p - p_bar;
        let q = pr.q - q_bar;
        c00 += pr.w * p.x * q.x;
        c01 += pr.w * p.x * q.y;
        c10 += pr.w * p.y * q.x;
        c11 += pr.w * p.y * q.y;
        var += pr.w * p.norm_sq();
    }
    let a = c00 + c11;
    let b = c01 - c10;
    let r = a.hypot(b);
    if !(var > 0.0) || !(r > 0.0) {
        return Err(Error::DegenerateConfiguration("weighted ground points have no spread"));
    }
    let theta = b.atan2(a);
    let s = r / var;
    let t = q_bar - p_bar.rotated(theta) * s;
    Ok(ProcrustesTape {
        weight_sum,
        p_bar,
        q_bar,
        a,
        b,
        r,
        var,
        theta,
        s,
        t,
    })
}

/// Gradient of a loss with respect to each pair's weight, given the loss
/// gradients with respect to the recovered angle, scale and translation.
fn procrustes_backward(pairs: &[WeightedPointPair], tp: &ProcrustesTape, g_theta: f64, g_s: f64, g_t: Point2) -> Vec<f64> {
    let rp = tp.p_bar.rotated(tp.theta);
    let drp = tp.p_bar.rotated(tp.theta + std::f64::consts::FRAC_PI_2);
    let mut g_q_bar = g_t;
    let g_s = g_s - g_t.dot(rp);
    let g_theta = g_theta - tp.s * g_t.dot(drp);
    let mut g_p_bar = g_t.rotated(-tp.theta) * -tp.s;

    let g_r = g_s / tp.var;
    let g_var = -g_s * tp.r / (tp.var * tp.var);
    let r2 = tp.r * tp.r;
    let ga = -g_theta * tp.b / r2 + g_r * tp.a / tp.r;
    let gb = g_theta * tp.a / r2 + g_r * tp.b / tp.r;
    // dL/dC with C = sum w p q^T - W pbar qbar^T
    let gc = [[ga, gb], [-gb, ga]];
    let bil = |p: Point2, q: Point2| p.x * (gc[0][0] * q.x + gc[0][1] * q.y) + p.y * (gc[1][0] * q.x + gc[1][1] * q.y);
    let w = tp.weight_sum;
    let g_w = -bil(tp.p_bar, tp.q_bar) - g_var * tp.p_bar.norm_sq();
    g_p_bar = g_p_bar
        + Point2::new(gc[0][0] * tp.q_bar.x + gc[0][1] * tp.q_bar.y, gc[1][0] * tp.q_bar.x + gc[1][1] * tp.q_bar.y) * -w
        + tp.p_bar * (-2.0 * w * g_var);
    g_q_bar = g_q_bar + Point2::new(gc[0][0] * tp.p_bar.x + gc[1][0] * tp.p_bar.y, gc[0][1] * tp.p_bar.x + gc[1][1] * tp.p_bar.y) * -w;
    pairs
        .iter()
        .map(|pr| bil(pr.p, pr.q) + g_var * pr.p.norm_sq() + g_p_bar.dot(pr.p - tp.p_bar) / w + g_q_bar.dot(pr.q - tp.q_bar) / w + g_w)
        .collect()
}

/// Gradient of the pair weights for a loss with the given partials on the
/// recovered angle, scale and translation.
pub fn similarity_weight_gradient(pairs: &[WeightedPointPair], g_theta: f64, g_s: f64, g_t: Point2) -> Result<Vec<f64>> {
    let tp = procrustes_forward(pairs)?;
    Ok(procrustes_backward(pairs, &tp, g_theta, g_s, g_t))
}

/// Similarity transform from the closed angle form.
pub fn similarity_closed_form(pairs: &[WeightedPointPair]) -> Result<SimilarityTransform2D> {
    let tp = procrustes_forward(pairs)?;
    Ok(SimilarityTransform2D::new(tp.s, tp.theta, tp.t))
}

/// Partials of the virtual correspondence error with respect to the
/// estimated angle and translation. Points whose displacement vanishes
/// contribute zero.
pub fn vce_backward(est: &SimilarityTransform2D, gt: &SimilarityTransform2D, vp: &VirtualPointSet) -> (f64, Point2) {
    if vp.is_empty() {
        return (0.0, Point2::ORIGIN);
    }
    let inv = 1.0 / vp.len() as f64;
    let mut g_theta = 0.0;
    let mut g_t = Point2::ORIGIN;
    for &v in &vp.points {
        let d = (v.rotated(gt.theta) + gt.t) - (v.rotated(est.theta) + est.t);
        let n = d.norm();
        if n == 0.0 {
            continue;
        }
        let u = d * (inv / n);
        g_t = g_t - u;
        g_theta -= u.dot(v.rotated(est.theta + std::f64::consts::FRAC_PI_2));
    }
    (g_theta, g_t)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub loss: LossBundle,
    pub transform: SimilarityTransform2D,
    /// Selected (aerial row, ground column, weight) triples.
    pub selection: Vec<Correspondence>,
}

struct Tape {
    row_sm: Matrix,
    col_sm: Matrix,
    pairs: Vec<WeightedPointPair>,
    procrustes: ProcrustesTape,
    /// (ground column, positive aerial row)
    g2s: Vec<(usize, usize)>,
    /// (aerial row, positive column, negative columns)
    s2g: Vec<(usize, usize, Vec<usize>)>,
}

/// Top-N interior entries of the match probabilities; errors on an exact
/// tie across the selection boundary.
fn select(probs: &[f64], n: usize, allow_ties: bool) -> Result<Vec<usize>> {
    let idx = top_n_indices(probs, n + 1);
    if !allow_ties && idx.len() > n && probs[idx[n - 1]] == probs[idx[n]] {
        return Err(Error::NonDifferentiablePoint(format!(
            "entries {} and {} tie at the top-{n} boundary",
            idx[n - 1],
            idx[n]
        )));
    }
    Ok(idx.into_iter().take(n).collect())
}

/// Relative gap between the N-th and (N+1)-th match probability, or
/// infinity when every entry is selected.
pub fn selection_gap(problem: &GradProblem, params: &ProjectionWeights) -> Result<f64> {
    let s = scores(problem, params)?;
    let probs = interior(&s, params.dustbin).2;
    let idx = top_n_indices(&probs, problem.n + 1);
    if idx.len() <= problem.n {
        return Ok(f64::INFINITY);
    }
    let hi = probs[idx[problem.n - 1]];
    Ok((hi - probs[idx[problem.n]]) / hi)
}

/// Row softmax, column softmax and the interior dual-softmax probabilities.
fn interior(scores: &Matrix, z: f64) -> (Matrix, Matrix, Vec<f64>) {
    let ext = augment_dustbin(scores, z);
    let (row_sm, col_sm) = softmax_parts(&ext);
    let mut probs = Vec::with_capacity(scores.rows * scores.cols);
    for i in 0..scores.rows {
        for j in 0..scores.cols {
            probs.push(row_sm.get(i, j) * col_sm.get(i, j));
        }
    }
    (row_sm, col_sm, probs)
}

fn or_zero(r: Result<f64>) -> Result<f64> {
    match r {
        Err(Error::NoValidTargets) => Ok(0.0),
        other => other,
    }
}

fn forward_scores(problem: &GradProblem, scores: &Matrix, z: f64) -> Result<(Evaluation, Tape)> {
    let (na, ng) = (problem.n_aerial(), problem.n_ground());
    if scores.rows != na || scores.cols != ng {
        return Err(Error::LengthMismatch {
            expected: na * ng,
            got: scores.rows * scores.cols,
        });
    }
    let (row_sm, col_sm, probs) = interior(scores, z);
    let chosen = select(&probs, problem.n, problem.allow_ties)?;
    let selection: Vec<Correspondence> = chosen
        .iter()
        .map(|&k| Correspondence {
            aerial: k / ng,
            ground: k % ng,
            w: probs[k],
        })
        .collect();
    let centers = problem.layout.centers();
    let pairs: Vec<WeightedPointPair> = selection
        .iter()
        .map(|c| WeightedPointPair::new(problem.ground_points[c.ground], centers[c.aerial], c.w))
        .collect();
    let tp = procrustes_forward(&pairs)?;
    let transform = SimilarityTransform2D::new(tp.s, tp.theta, tp.t);
    let vce = vce_loss(&transform, &problem.gt, &problem.vp);

    let mut g2s_items = Vec::new();
    let mut s2g_items = Vec::new();
    let (mut g2s, mut s2g) = (0.0, 0.0);
    if problem.beta > 0.0 {
        let mut cols: Vec<usize> = selection.iter().map(|c| c.ground).collect();
        cols.sort_unstable();
        cols.dedup();
        let mut rows: Vec<usize> = selection.iter().map(|c| c.aerial).collect();
        rows.sort_unstable();
        rows.dedup();

        let at = Targets {
            points: cols.iter().map(|&g| problem.aerial_targets.points[g]).collect(),
            valid: cols.iter().map(|&g| problem.aerial_targets.valid[g]).collect(),
        };
        g2s = or_zero(info_nce_g2s(scores, &cols, &at, &problem.layout))?;
        for (n, &g) in cols.iter().enumerate() {
            if at.valid[n] {
                if let Some(pos) = problem.layout.nearest_cell(at.points[n]) {
                    g2s_items.push((g, pos));
                }
            }
        }

        let gt_t = Targets {
            points: rows.iter().map(|&a| problem.ground_targets.points[a]).collect(),
            valid: rows.iter().map(|&a| problem.ground_targets.valid[a]).collect(),
        };
        s2g = or_zero(info_nce_s2g(scores, &rows, &gt_t, &problem.ground_points, &problem.rule))?;
        for (n, &a) in rows.iter().enumerate() {
            if gt_t.valid[n] {
                if let Some((pos, negs)) = s2g_candidates(&problem.ground_points, gt_t.points[n], &problem.rule) {
                    s2g_items.push((a, pos, negs));
                }
            }
        }
    }
    let loss = total_loss(vce, g2s, s2g, problem.beta);
    Ok((
        Evaluation {
            loss,
            transform,
            selection,
        },
        Tape {
            row_sm,
            col_sm,
            pairs,
            procrustes: tp,
            g2s: g2s_items,
            s2g: s2g_items,
        },
    ))
}

/// Gradients of the total loss at one parameter point.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub evaluation: Evaluation,
    pub scores: Matrix,
    pub dustbin: f64,
    /// Same layout as `ProjectionWeights::flat`.
    pub projection: Vec<f64>,
}

fn backward_scores(problem: &GradProblem, eval: &Evaluation, tape: &Tape) -> (Matrix, f64) {
    let (na, ng) = (problem.n_aerial(), problem.n_ground());
    let (g_theta, g_t) = vce_backward(&eval.transform, &problem.gt, &problem.vp);
    let g_w = procrustes_backward(&tape.pairs, &tape.procrustes, g_theta, 0.0, g_t);

    // Dual softmax on the augmented (na + 1) x (ng + 1) matrix.
    let (rows, cols) = (na + 1, ng + 1);
    let mut g_p = vec![0.0; rows * cols];
    for (c, g) in eval.selection.iter().zip(&g_w) {
        g_p[c.aerial * cols + c.ground] += g;
    }
    let a = &tape.row_sm.data;
    let b = &tape.col_sm.data;
    let g_a: Vec<f64> = g_p.iter().zip(b).map(|(g, b)| g * b).collect();
    let g_b: Vec<f64> = g_p.iter().zip(a).map(|(g, a)| g * a).collect();
    let mut g_m = vec![0.0; rows * cols];
    for i in 0..rows {
        let r = i * cols..(i + 1) * cols;
        let dot: f64 = g_a[r.clone()].iter().zip(&a[r.clone()]).map(|(x, y)| x * y).sum();
        for k in r {
            g_m[k] += a[k] * (g_a[k] - dot);
        }
    }
    for j in 0..cols {
        let dot: f64 = (0..rows).map(|i| g_b[i * cols + j] * b[i * cols + j]).sum();
        for i in 0..rows {
            let k = i * cols + j;
            g_m[k] += b[k] * (g_b[k] - dot);
        }
    }
    let mut g_s = Matrix::zeros(na, ng);
    let mut g_z = 0.0;
    for i in 0..rows {
        for j in 0..cols {
            let v = g_m[i * cols + j];
            if i < na && j < ng {
                g_s.data[i * ng + j] = v;
            } else {
                g_z += v;
            }
        }
    }

    (g_s, g_z)
}

fn softmax_weights(values: &[f64]) -> Vec<f64> {
    let m = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = values.iter().map(|v| (v - m).exp()).collect();
    let total: f64 = e.iter().sum();
    e.into_iter().map(|v| v / total).collect()
}

fn contrastive_backward(problem: &GradProblem, scores: &Matrix, tape: &Tape, g_s: &mut Matrix) {
    if problem.beta == 0.0 {
        return;
    }
    let (na, ng) = (scores.rows, scores.cols);
    if !tape.g2s.is_empty() {
        let c = 0.5 * problem.beta / tape.g2s.len() as f64;
        for &(g, pos) in &tape.g2s {
            let column: Vec<f64> = (0..na).map(|i| scores.data[i * ng + g]).collect();
            for (i, p) in softmax_weights(&column).into_iter().enumerate() {
                g_s.data[i * ng + g] += c * (p - if i == pos { 1.0 } else { 0.0 });
            }
        }
    }
    if !tape.s2g.is_empty() {
        let c = 0.5 * problem.beta / tape.s2g.len() as f64;
        for (a, pos, negs) in &tape.s2g {
            let ks: Vec<usize> = std::iter::once(*pos).chain(negs.iter().copied()).collect();
            let vals: Vec<f64> = ks.iter().map(|&k| scores.data[a * ng + k]).collect();
            for (n, p) in softmax_weights(&vals).into_iter().enumerate() {
                g_s.data[a * ng + ks[n]] += c * (p - if n == 0 { 1.0 } else { 0.0 });
            }
        }
    }
}

fn projection_backward(problem: &GradProblem, a: &Projected, g: &Projected, scores: &Matrix, g_s: &Matrix) -> (Vec<f64>, Vec<f64>) {
    let d = problem.dim;
    let (na, ng) = (scores.rows, scores.cols);
    let tau = problem.tau;
    // dL/dx_i for x_i = W a_i, and dL/dy_j for y_j = W g_j.
    let g_x: Vec<Vec<f64>> = par::map_range(na, |i| {
        let xi = &a.unit[i * d..(i + 1) * d];
        let mut acc = vec![0.0; d];
        let mut proj = 0.0;
        for j in 0..ng {
            let gs = g_s.data[i * ng + j];
            if gs == 0.0 {
                continue;
            }
            let yj = &g.unit[j * d..(j + 1) * d];
            for (o, y) in acc.iter_mut().zip(yj) {
                *o += gs * y;
            }
            proj += gs * scores.data[i * ng + j] * tau;
        }
        let k = 1.0 / (a.norms[i] * tau);
        acc.iter().zip(xi).map(|(v, x)| k * (v - proj * x)).collect()
    });
    let g_y: Vec<Vec<f64>> = par::map_range(ng, |j| {
        let yj = &g.unit[j * d..(j + 1) * d];
        let mut acc = vec![0.0; d];
        let mut proj = 0.0;
        for i in 0..na {
            let gs = g_s.data[i * ng + j];
            if gs == 0.0 {
                continue;
            }
            let xi = &a.unit[i * d..(i + 1) * d];
            for (o, x) in acc.iter_mut().zip(xi) {
                *o += gs * x;
            }
            proj += gs * scores.data[i * ng + j] * tau;
        }
        let k = 1.0 / (g.norms[j] * tau);
        acc.iter().zip(yj).map(|(v, y)| k * (v - proj * y)).collect()
    });
    let outer = |pairs: &mut dyn Iterator<Item = (&Vec<f64>, &[f64])>| {
        let mut g_w = vec![0.0; d * d];
        for (gv, f) in pairs {
            for r in 0..d {
                for c in 0..d {
                    g_w[r * d + c] += gv[r] * f[c];
                }
            }
        }
        g_w
    };
    let g_aerial = outer(&mut g_x.iter().enumerate().map(|(i, gx)| (gx, &problem.aerial_features[i * d..(i + 1) * d])));
    let g_ground = outer(&mut g_y.iter().enumerate().map(|(j, gy)| (gy, &problem.ground_features[j * d..(j + 1) * d])));
    (g_aerial, g_ground)
}

/// Total loss and its pose estimate at `params`.
pub fn evaluate(problem: &GradProblem, params: &ProjectionWeights) -> Result<Evaluation> {
    let s = scores(problem, params)?;
    Ok(forward_scores(problem, &s, params.dustbin)?.0)
}

/// Exact gradient of the total loss with respect to every leaf.
pub fn gradient(problem: &GradProblem, params: &ProjectionWeights) -> Result<Gradient> {
    problem.validate()?;
    let a = project(&problem.aerial_features, problem.dim, &params.projection)?;
    let g = project(&problem.ground_features, problem.dim, params.ground())?;
    let s = cosine_scores(&a, &g, problem.dim, problem.tau);
    let (evaluation, tape) = forward_scores(problem, &s, params.dustbin)?;
    let (mut g_s, g_z) = backward_scores(problem, &evaluation, &tape);
    contrastive_backward(problem, &s, &tape, &mut g_s);
    let (g_aerial, g_ground) = projection_backward(problem, &a, &g, &s, &g_s);
    let projection = if params.ground_projection.is_some() {
        [g_aerial, g_ground].concat()
    } else {
        g_aerial.iter().zip(&g_ground).map(|(x, y)| x + y).collect()
    };
    Ok(Gradient {
        evaluation,
        scores: g_s,
        dustbin: g_z,
        projection,
    })
}

/// Current values of one leaf as a flat vector.
pub fn leaf_values(problem: &GradProblem, params: &ProjectionWeights, leaf: Leaf) -> Result<Vec<f64>> {
    Ok(match leaf {
        Leaf::Scores => scores(problem, params)?.data,
        Leaf::Dustbin => vec![params.dustbin],
        Leaf::Projection => params.flat(),
    })
}

/// Total loss with one leaf replaced by `x`; the other leaves come from
/// `params` (for `Scores`, the projection is bypassed).
pub fn forward(problem: &GradProblem, params: &ProjectionWeights, leaf: Leaf, x: &[f64]) -> Result<f64> {
    match leaf {
        Leaf::Scores => {
            problem.validate()?;
            let m = Matrix::from_vec(problem.n_aerial(), problem.n_ground(), x.to_vec())?;
            Ok(forward_scores(problem, &m, params.dustbin)?.0.loss.total)
        }
        Leaf::Dustbin => {
            if x.len() != 1 {
                return Err(Error::LengthMismatch { expected: 1, got: x.len() });
            }
            let p = ProjectionWeights {
                dustbin: x[0],
                ..params.clone()
            };
            Ok(evaluate(problem, &p)?.loss.total)
        }
        Leaf::Projection => Ok(evaluate(problem, &params.with_flat(x)?)?.loss.total),
    }
}

/// Analytic gradient of `forward` with respect to one leaf at `params`.
pub fn backward(problem: &GradProblem, params: &ProjectionWeights, leaf: Leaf) -> Result<Vec<f64>> {
    let g = gradient(problem, params)?;
    Ok(match leaf {
        Leaf::Scores => g.scores.data,
        Leaf::Dustbin => vec![g.dustbin],
        Leaf::Projection => g.projection,
    })
}

/// Central differences `(f(x + eps e_k) - f(x - eps e_k)) / (2 eps)`,
/// coordinates evaluated in parallel.
pub fn finite_difference<F>(f: F, x: &[f64], eps: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Result<f64> + Sync + Send,
{
    if !(eps > 0.0) {
        return Err(Error::InvalidConfig("finite-difference step must be positive".into()));
    }
    par::map_range(x.len(), |k| {
        let mut plus = x.to_vec();
        let mut minus = x.to_vec();
        plus[k] += eps;
        minus[k] -= eps;
        Ok((f(&plus)? - f(&minus)?) / (2.0 * eps))
    })
    .into_iter()
    .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradReport {
    pub leaf: Leaf,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub max_abs: f64,
    pub max_rel: f64,
    pub tolerance: f64,
    pub passed: bool,
    /// Set when the instance could not be differentiated.
    pub error: Option<String>,
}

/// `|a - f| / max(|a|, |f|, floor)`, maximized over entries, and the largest
/// absolute discrepancy.
pub fn discrepancy(analytic: &[f64], numeric: &[f64]) -> (f64, f64) {
    analytic.iter().zip(numeric).fold((0.0f64, 0.0f64), |(ma, mr), (a, f)| {
        let d = (a - f).abs();
        (ma.max(d), mr.max(d / a.abs().max(f.abs()).max(RELATIVE_FLOOR)))
    })
}

pub fn report(leaf: Leaf, analytic: Vec<f64>, numeric: Vec<f64>, tol: f64) -> GradReport {
    let (max_abs, max_rel) = discrepancy(&analytic, &numeric);
    GradReport {
        leaf,
        passed: analytic.len() == numeric.len() && max_rel < tol,
        analytic,
        numeric,
        max_abs,
        max_rel,
        tolerance: tol,
        error: None,
    }
}

/// Compares `backward` against `finite_difference` on one leaf. Pipeline
/// errors end up in the report rather than aborting.
pub fn check(problem: &GradProblem, params: &ProjectionWeights, leaf: Leaf, eps: f64, tol: f64) -> GradReport {
    let run = || -> Result<GradReport> {
        let x = leaf_values(problem, params, leaf)?;
        let analytic = backward(problem, params, leaf)?;
        let numeric = finite_difference(|y| forward(problem, params, leaf, y), &x, eps)?;
        Ok(report(leaf, analytic, numeric, tol))
    };
    run().unwrap_or_else(|e| GradReport {
        leaf,
        analytic: Vec::new(),
        numeric: Vec::new(),
        max_abs: f64::NAN,
        max_rel: f64::NAN,
        tolerance: tol,
        passed: false,
        error: Some(e.to_string()),
    })
}

/// Minimum relative top-N gap accepted by `random_instance`.
const MIN_GAP: f64 = 1e-3;

fn draw_instance(rng: &mut ChaCha8Rng) -> (GradProblem, ProjectionWeights) {
    let dim = 4;
    let layout = AerialLayout::new(5, 5, AerialMeta::new(2.0));
    let centers = layout.centers();
    let na = layout.len();
    let ng = 8;
    let gt_scale = 10f64.powf(rng.gen_range(-0.3..0.3));
    let gt = SimilarityTransform2D::new(1.0, rng.gen_range(-3.0..3.0), Point2::new(rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)));
    let normal = |rng: &mut ChaCha8Rng| rng.sample::<f64, _>(StandardNormal);
    let aerial_features: Vec<f64> = (0..na * dim).map(|_| normal(rng)).collect();
    let mut ground_features = Vec::with_capacity(ng * dim);
    let mut ground_points = Vec::with_capacity(ng);
    for j in 0..ng {
        if j % 2 == 0 {
            let cell = rng.gen_range(0..na);
            let q = centers[cell];
            ground_points.push((q - gt.t).rotated(-gt.theta) * (1.0 / gt_scale));
            for k in 0..dim {
                ground_features.push(aerial_features[cell * dim + k] + 0.3 * normal(rng));
            }
        } else {
            ground_points.push(Point2::new(rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0)));
            ground_features.extend((0..dim).map(|_| normal(rng)));
        }
    }
    let mut projection = ProjectionWeights::identity(dim, rng.gen_range(-1.0..1.0));
    for v in projection.projection.iter_mut() {
        *v += 0.2 * normal(rng);
    }
    let mut problem = GradProblem {
        dim,
        aerial_features,
        ground_features,
        tau: 0.5,
        n: 12,
        layout,
        ground_points,
        gt,
        vp: VirtualPointSet::default(),
        beta: 0.5,
        rule: NegativeRule::default(),
        aerial_targets: Targets {
            points: Vec::new(),
            valid: Vec::new(),
        },
        ground_targets: Targets {
            points: Vec::new(),
            valid: Vec::new(),
        },
        allow_ties: false,
    };
    problem.set_target_scale(gt_scale);
    (problem, projection)
}

/// A seeded, well-conditioned instance: non-degenerate alignment and a
/// clear gap at the top-N boundary. Redraws from the same stream until
/// both hold.
pub fn random_instance(seed: u64) -> Result<(GradProblem, ProjectionWeights)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..1000 {
        let (problem, params) = draw_instance(&mut rng);
        if evaluate(&problem, &params).is_err() {
            continue;
        }
        if selection_gap(&problem, &params)? > MIN_GAP {
            return Ok((problem, params));
        }
    }
    Err(Error::DegenerateConfiguration("no well-conditioned instance found"))
}

/// Checks every leaf on the instance drawn from each seed.
pub fn check_seeds(seeds: impl IntoIterator<Item = u64>, eps: f64, tol: f64) -> Result<Vec<(u64, GradReport)>> {
    let mut out = Vec::new();
    for seed in seeds {
        let (problem, params) = random_instance(seed)?;
        for leaf in Leaf::ALL {
            out.push((seed, check(&problem, &params, leaf, eps, tol)));
        }
    }
    Ok(out)
}
