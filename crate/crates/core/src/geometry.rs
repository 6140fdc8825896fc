//! Planar point types and the closed-form weighted Procrustes solvers.
//!
//! Ground points `p` (camera frame, possibly at an unknown scale) are aligned
//! to aerial points `q` (metric) by `q = s * R(theta) * p + t`. The solvers
//! follow the weighted Umeyama construction: weighted centroids, the 2x2
//! cross-covariance `C = sum w * p~ q~^T`, its SVD `C = U S V^T`, the rotation
//! `R = V U^T` and the scale `s = tr(S) / sum w |p~|^2`.

use std::f64::consts::PI;
use std::ops::{Add, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub const ORIGIN: Point2 = Point2 { x: 0.0, y: 0.0 };

    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn dot(self, other: Point2) -> f64 {
        self.x * other.x + self.y * other.y
    }

    pub fn norm_sq(self) -> f64 {
        self.dot(self)
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn distance(self, other: Point2) -> f64 {
        (self - other).norm()
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    /// Counterclockwise rotation by `angle` radians.
    pub fn rotated(self, angle: f64) -> Point2 {
        let (sin, cos) = angle.sin_cos();
        Point2::new(cos * self.x - sin * self.y, sin * self.x + cos * self.y)
    }
}

impl Add for Point2 {
    type Output = Point2;
    fn add(self, rhs: Point2) -> Point2 {
        Point2::new(self.x + rhs.x, self.y + rhs.y)
    }
}

impl Sub for Point2 {
    type Output = Point2;
    fn sub(self, rhs: Point2) -> Point2 {
        Point2::new(self.x - rhs.x, self.y - rhs.y)
    }
}

impl Mul<f64> for Point2 {
    type Output = Point2;
    fn mul(self, rhs: f64) -> Point2 {
        Point2::new(self.x * rhs, self.y * rhs)
    }
}

impl Neg for Point2 {
    type Output = Point2;
    fn neg(self) -> Point2 {
        Point2::new(-self.x, -self.y)
    }
}

/// A point in the ground camera frame: `+x` forward, `+y` left, `+z` up.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Point3 {
    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    /// Drops the height, giving the bird's-eye-view position.
    pub fn planar(self) -> Point2 {
        Point2::new(self.x, self.y)
    }

    pub fn norm(self) -> f64 {
        (self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn scaled(self, k: f64) -> Point3 {
        Point3::new(self.x * k, self.y * k, self.z * k)
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }
}

/// A ground (planar) point matched to an aerial point with a nonnegative weight.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightedPointPair {
    pub p: Point2,
    pub q: Point2,
    pub w: f64,
}

impl WeightedPointPair {
    pub const fn new(p: Point2, q: Point2, w: f64) -> Self {
        Self { p, q, w }
    }
}

/// Row-major 2x2 matrix.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Mat2(pub [[f64; 2]; 2]);

impl Mat2 {
    pub const IDENTITY: Mat2 = Mat2([[1.0, 0.0], [0.0, 1.0]]);
    pub const ZERO: Mat2 = Mat2([[0.0, 0.0], [0.0, 0.0]]);

    pub const fn new(a: f64, b: f64, c: f64, d: f64) -> Self {
        Mat2([[a, b], [c, d]])
    }

    pub fn rotation(angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        Mat2::new(c, -s, s, c)
    }

    pub fn diag(a: f64, d: f64) -> Self {
        Mat2::new(a, 0.0, 0.0, d)
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.0[r][c]
    }

    pub fn transpose(&self) -> Mat2 {
        let m = &self.0;
        Mat2::new(m[0][0], m[1][0], m[0][1], m[1][1])
    }

    pub fn det(&self) -> f64 {
        let m = &self.0;
        m[0][0] * m[1][1] - m[0][1] * m[1][0]
    }

    pub fn trace(&self) -> f64 {
        self.0[0][0] + self.0[1][1]
    }

    pub fn mul_vec(&self, p: Point2) -> Point2 {
        let m = &self.0;
        Point2::new(m[0][0] * p.x + m[0][1] * p.y, m[1][0] * p.x + m[1][1] * p.y)
    }

    /// Frobenius norm.
    pub fn norm(&self) -> f64 {
        self.0.iter().flatten().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().flatten().all(|v| v.is_finite())
    }
}

impl Mul for Mat2 {
    type Output = Mat2;
    fn mul(self, rhs: Mat2) -> Mat2 {
        let (a, b) = (&self.0, &rhs.0);
        let mut out = [[0.0; 2]; 2];
        for (r, row) in out.iter_mut().enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = a[r][0] * b[0][c] + a[r][1] * b[1][c];
            }
        }
        Mat2(out)
    }
}

impl Sub for Mat2 {
    type Output = Mat2;
    fn sub(self, rhs: Mat2) -> Mat2 {
        let (a, b) = (&self.0, &rhs.0);
        Mat2::new(
            a[0][0] - b[0][0],
            a[0][1] - b[0][1],
            a[1][0] - b[1][0],
            a[1][1] - b[1][1],
        )
    }
}

/// Wraps an angle into `[-pi, pi)`.
pub fn wrap_angle(angle: f64) -> f64 {
    let wrapped = (angle + PI).rem_euclid(2.0 * PI) - PI;
    // rem_euclid can round up to exactly 2*pi for tiny negative inputs.
    if wrapped >= PI {
        wrapped - 2.0 * PI
    } else {
        wrapped
    }
}

/// `q = s * R(theta) * p + t`, the pipeline's 3-DoF pose plus depth scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimilarityTransform2D {
    pub s: f64,
    pub theta: f64,
    pub t: Point2,
}

impl Default for SimilarityTransform2D {
    fn default() -> Self {
        Self::IDENTITY
    }
}

impl SimilarityTransform2D {
    pub const IDENTITY: SimilarityTransform2D = SimilarityTransform2D {
        s: 1.0,
        theta: 0.0,
        t: Point2::ORIGIN,
    };

    /// Builds a transform, wrapping `theta`. Panics if `s` is not positive.
    pub fn new(s: f64, theta: f64, t: Point2) -> Self {
        assert!(s > 0.0 && s.is_finite(), "scale must be positive, got {s}");
        Self {
            s,
            theta: wrap_angle(theta),
            t,
        }
    }

    pub fn rotation(&self) -> Mat2 {
        Mat2::rotation(self.theta)
    }

    pub fn apply(&self, p: Point2) -> Point2 {
        p.rotated(self.theta) * self.s + self.t
    }

    pub fn inverse(&self) -> SimilarityTransform2D {
        let inv_s = 1.0 / self.s;
        SimilarityTransform2D::new(inv_s, -self.theta, -(self.t.rotated(-self.theta) * inv_s))
    }

    /// Same rotation and translation with the scale dropped.
    pub fn rigid(&self) -> SimilarityTransform2D {
        SimilarityTransform2D { s: 1.0, ..*self }
    }
}

pub fn apply_transform(transform: &SimilarityTransform2D, points: &[Point2]) -> Vec<Point2> {
    points.iter().map(|&p| transform.apply(p)).collect()
}

pub fn weighted_centroid(points: &[Point2], weights: &[f64]) -> Result<Point2> {
    if points.len() != weights.len() {
        return Err(Error::LengthMismatch {
            expected: points.len(),
            got: weights.len(),
        });
    }
    if points.is_empty() {
        return Err(Error::EmptyInput);
    }
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(Error::ZeroWeightSum);
    }
    let (sx, sy) = points
        .iter()
        .zip(weights)
        .fold((0.0, 0.0), |(sx, sy), (p, &w)| (sx + w * p.x, sy + w * p.y));
    Ok(Point2::new(sx / total, sy / total))
}

/// `C = sum_n w_n * p_n q_n^T` over already-centered point sets.
pub fn weighted_covariance(p_centered: &[Point2], q_centered: &[Point2], weights: &[f64]) -> Result<Mat2> {
    if p_centered.len() != q_centered.len() {
        return Err(Error::LengthMismatch {
            expected: p_centered.len(),
            got: q_centered.len(),
        });
    }
    if p_centered.len() != weights.len() {
        return Err(Error::LengthMismatch {
            expected: p_centered.len(),
            got: weights.len(),
        });
    }
    let mut c = [[0.0; 2]; 2];
    for ((p, q), &w) in p_centered.iter().zip(q_centered).zip(weights) {
        c[0][0] += w * p.x * q.x;
        c[0][1] += w * p.x * q.y;
        c[1][0] += w * p.y * q.x;
        c[1][1] += w * p.y * q.y;
    }
    Ok(Mat2(c))
}

/// Closed-form 2x2 SVD, `c = u * diag(sigma) * v^T` with `sigma[0] >= sigma[1] >= 0`.
///
/// Writes `c` as `Rot(phi) * diag(sx, sy) * Rot(psi)`; a negative `sy` is
/// absorbed into the second column of `v`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Svd2 {
    pub u: Mat2,
    pub sigma: [f64; 2],
    pub v: Mat2,
}

pub fn svd2x2(c: &Mat2) -> Svd2 {
    let m = &c.0;
    let e = 0.5 * (m[0][0] + m[1][1]);
    let f = 0.5 * (m[0][0] - m[1][1]);
    let g = 0.5 * (m[1][0] + m[0][1]);
    let h = 0.5 * (m[1][0] - m[0][1]);
    let q = e.hypot(h);
    let r = f.hypot(g);
    let sx = q + r;
    let sy = q - r;
    let a1 = g.atan2(f);
    let a2 = h.atan2(e);
    let psi = 0.5 * (a2 - a1);
    let phi = 0.5 * (a2 + a1);
    let u = Mat2::rotation(phi);
    let mut v = Mat2::rotation(-psi);
    if sy < 0.0 {
        v.0[0][1] = -v.0[0][1];
        v.0[1][1] = -v.0[1][1];
    }
    Svd2 {
        u,
        sigma: [sx, sy.abs()],
        v,
    }
}

/// Everything the similarity solver computes along the way.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProcrustesSolution {
    pub transform: SimilarityTransform2D,
    pub ground_centroid: Point2,
    pub aerial_centroid: Point2,
    pub covariance: Mat2,
    pub svd: Svd2,
    /// `sum w |p~|^2`.
    pub ground_spread: f64,
    /// `det(V U^T) < 0`; the rotation was corrected to stay proper.
    pub reflection_corrected: bool,
    /// `tr(S * diag(1, d))` with `d = sign det(V U^T)`.
    pub singular_trace: f64,
}

struct Centered {
    p_bar: Point2,
    q_bar: Point2,
    covariance: Mat2,
    spread: f64,
}

fn center_and_cross(pairs: &[WeightedPointPair]) -> Result<Centered> {
    if pairs.is_empty() {
        return Err(Error::EmptyInput);
    }
    if pairs.iter().any(|pr| !(pr.w >= 0.0) || !pr.p.is_finite() || !pr.q.is_finite()) {
        return Err(Error::DegenerateConfiguration("negative weight or non-finite point"));
    }
    let positive = pairs.iter().filter(|pr| pr.w > 0.0).count();
    if positive == 0 {
        return Err(Error::ZeroWeightSum);
    }
    if positive < 2 {
        return Err(Error::DegenerateConfiguration("fewer than two positively weighted pairs"));
    }
    let weights: Vec<f64> = pairs.iter().map(|pr| pr.w).collect();
    let ps: Vec<Point2> = pairs.iter().map(|pr| pr.p).collect();
    let qs: Vec<Point2> = pairs.iter().map(|pr| pr.q).collect();
    let p_bar = weighted_centroid(&ps, &weights)?;
    let q_bar = weighted_centroid(&qs, &weights)?;
    let p_c: Vec<Point2> = ps.iter().map(|&p| p - p_bar).collect();
    let q_c: Vec<Point2> = qs.iter().map(|&q| q - q_bar).collect();
    let covariance = weighted_covariance(&p_c, &q_c, &weights)?;
    let spread: f64 = p_c.iter().zip(&weights).map(|(p, w)| w * p.norm_sq()).sum();
    let raw_moment: f64 = ps.iter().zip(&weights).map(|(p, w)| w * p.norm_sq()).sum();
    if !(spread > 1e-20 * raw_moment) || spread == 0.0 {
        return Err(Error::DegenerateConfiguration("ground points coincide"));
    }
    Ok(Centered {
        p_bar,
        q_bar,
        covariance,
        spread,
    })
}

fn proper_rotation(svd: &Svd2) -> (Mat2, f64) {
    let vut = svd.v * svd.u.transpose();
    let d = if vut.det() < 0.0 { -1.0 } else { 1.0 };
    (svd.v * Mat2::diag(1.0, d) * svd.u.transpose(), d)
}

/// Full weighted scale-aware Procrustes solve with intermediate quantities.
pub fn solve_similarity_detailed(pairs: &[WeightedPointPair]) -> Result<ProcrustesSolution> {
    let Centered {
        p_bar,
        q_bar,
        covariance,
        spread,
    } = center_and_cross(pairs)?;
    let svd = svd2x2(&covariance);
    let (rot, d) = proper_rotation(&svd);
    let theta = wrap_angle(rot.get(1, 0).atan2(rot.get(0, 0)));
    let singular_trace = svd.sigma[0] + d * svd.sigma[1];
    let s = singular_trace / spread;
    if !(s > 0.0) || !s.is_finite() {
        return Err(Error::DegenerateConfiguration("non-positive scale"));
    }
    let t = q_bar - rot.mul_vec(p_bar) * s;
    Ok(ProcrustesSolution {
        transform: SimilarityTransform2D { s, theta, t },
        ground_centroid: p_bar,
        aerial_centroid: q_bar,
        covariance,
        svd,
        ground_spread: spread,
        reflection_corrected: d < 0.0,
        singular_trace,
    })
}

/// Least-squares similarity transform minimizing `sum w |s R p + t - q|^2`.
pub fn solve_similarity(pairs: &[WeightedPointPair]) -> Result<SimilarityTransform2D> {
    solve_similarity_detailed(pairs).map(|sol| sol.transform)
}

/// Scale-unaware (orthogonal) Procrustes: rotation and translation with `s = 1`.
pub fn solve_orthogonal(pairs: &[WeightedPointPair]) -> Result<SimilarityTransform2D> {
    let Centered {
        p_bar,
        q_bar,
        covariance,
        ..
    } = center_and_cross(pairs)?;
    let svd = svd2x2(&covariance);
    let (rot, _) = proper_rotation(&svd);
    let theta = wrap_angle(rot.get(1, 0).atan2(rot.get(0, 0)));
    Ok(SimilarityTransform2D {
        s: 1.0,
        theta,
        t: q_bar - rot.mul_vec(p_bar),
    })
}

/// Rotation angle maximizing `tr(R C)` directly: `atan2(C01 - C10, C00 + C11)`.
pub fn optimal_angle(covariance: &Mat2) -> f64 {
    let m = &covariance.0;
    (m[0][1] - m[1][0]).atan2(m[0][0] + m[1][1])
}

/// Weighted sum of squared alignment residuals.
pub fn alignment_objective(transform: &SimilarityTransform2D, pairs: &[WeightedPointPair]) -> f64 {
    pairs
        .iter()
        .map(|pr| pr.w * (transform.apply(pr.p) - pr.q).norm_sq())
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn uniform(ps: &[Point2], qs: &[Point2]) -> Vec<WeightedPointPair> {
        ps.iter().zip(qs).map(|(&p, &q)| WeightedPointPair::new(p, q, 1.0)).collect()
    }

    fn random_points(rng: &mut ChaCha8Rng, n: usize, spread: f64) -> Vec<Point2> {
        (0..n)
            .map(|_| Point2::new(rng.gen_range(-spread..spread), rng.gen_range(-spread..spread)))
            .collect()
    }

    #[test]
    fn centroid_examples() {
        let pts = [Point2::new(0.0, 0.0), Point2::new(2.0, 0.0)];
        assert_eq!(weighted_centroid(&pts, &[1.0, 1.0]).unwrap(), Point2::new(1.0, 0.0));
        assert_eq!(weighted_centroid(&pts, &[1.0, 3.0]).unwrap(), Point2::new(1.5, 0.0));
        assert!(matches!(weighted_centroid(&pts, &[0.0, 0.0]), Err(Error::ZeroWeightSum)));
        assert!(matches!(
            weighted_centroid(&pts, &[1.0]),
            Err(Error::LengthMismatch { .. })
        ));
    }

    #[test]
    fn centroid_matches_loop_accumulation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts = random_points(&mut rng, 50, 20.0);
        let ws: Vec<f64> = (0..50).map(|_| rng.gen_range(0.0..1.0)).collect();
        let mut acc = [0.0f64; 3];
        for i in 0..50 {
            acc[0] += ws[i] * pts[i].x;
            acc[1] += ws[i] * pts[i].y;
            acc[2] += ws[i];
        }
        let c = weighted_centroid(&pts, &ws).unwrap();
        assert!((c.x - acc[0] / acc[2]).abs() < 1e-12);
        assert!((c.y - acc[1] / acc[2]).abs() < 1e-12);
    }

    #[test]
    fn covariance_examples() {
        let p = [Point2::new(1.0, 0.0), Point2::new(-1.0, 0.0)];
        assert_eq!(weighted_covariance(&p, &p, &[1.0, 1.0]).unwrap(), Mat2::new(2.0, 0.0, 0.0, 0.0));
        let q: Vec<Point2> = p.iter().map(|p| p.rotated(PI / 2.0)).collect();
        let c = weighted_covariance(&p, &q, &[1.0, 1.0]).unwrap();
        assert!((c - Mat2::new(0.0, 2.0, 0.0, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn covariance_matches_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = random_points(&mut rng, 40, 5.0);
        let q = random_points(&mut rng, 40, 5.0);
        let w: Vec<f64> = (0..40).map(|_| rng.gen_range(0.0..2.0)).collect();
        let c = weighted_covariance(&p, &q, &w).unwrap();
        let mut oracle = [[0.0; 2]; 2];
        for n in 0..40 {
            let pv = [p[n].x, p[n].y];
            let qv = [q[n].x, q[n].y];
            for r in 0..2 {
                for k in 0..2 {
                    oracle[r][k] += w[n] * pv[r] * qv[k];
                }
            }
        }
        assert!((c - Mat2(oracle)).norm() < 1e-12);
    }

    #[test]
    fn svd_examples() {
        let id = svd2x2(&Mat2::IDENTITY);
        assert_eq!(id.sigma, [1.0, 1.0]);
        assert!((id.u - Mat2::IDENTITY).norm() < 1e-15);
        assert!((id.v - Mat2::IDENTITY).norm() < 1e-15);

        let d = Mat2::diag(3.0, -2.0);
        let svd = svd2x2(&d);
        assert_eq!(svd.sigma, [3.0, 2.0]);
        let rebuilt = svd.u * Mat2::diag(svd.sigma[0], svd.sigma[1]) * svd.v.transpose();
        assert!((rebuilt - d).norm() < 1e-15);

        let zero = svd2x2(&Mat2::ZERO);
        assert_eq!(zero.sigma, [0.0, 0.0]);
        assert_eq!(zero.u, Mat2::IDENTITY);
        assert_eq!(zero.v, Mat2::IDENTITY);
    }

    #[test]
    fn svd_reconstructs_random_matrices() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let m = Mat2::new(
                rng.gen_range(-10.0..10.0),
                rng.gen_range(-10.0..10.0),
                rng.gen_range(-10.0..10.0),
                rng.gen_range(-10.0..10.0),
            );
            let svd = svd2x2(&m);
            let rebuilt = svd.u * Mat2::diag(svd.sigma[0], svd.sigma[1]) * svd.v.transpose();
            assert!((rebuilt - m).norm() < 1e-12 * m.norm().max(1.0));
            assert!((svd.u * svd.u.transpose() - Mat2::IDENTITY).norm() < 1e-12);
            assert!((svd.v * svd.v.transpose() - Mat2::IDENTITY).norm() < 1e-12);
            assert!(svd.sigma[0] >= svd.sigma[1] && svd.sigma[1] >= 0.0);
        }
    }

    #[test]
    fn similarity_examples() {
        let p = [Point2::new(0.0, 0.0), Point2::new(1.0, 0.0), Point2::new(0.0, 1.0)];
        let t = solve_similarity(&uniform(&p, &p)).unwrap();
        assert!((t.s - 1.0).abs() < 1e-12 && t.theta.abs() < 1e-12 && t.t.norm() < 1e-12);

        let p = [Point2::new(1.0, 0.0), Point2::new(0.0, 1.0), Point2::new(-1.0, 0.0)];
        let q: Vec<Point2> = p.iter().map(|p| p.rotated(PI / 2.0)).collect();
        let t = solve_similarity(&uniform(&p, &q)).unwrap();
        assert!((t.theta - PI / 2.0).abs() < 1e-12);
        assert!((t.s - 1.0).abs() < 1e-12 && t.t.norm() < 1e-12);

        let q: Vec<Point2> = p.iter().map(|&p| p * 3.0).collect();
        let t = solve_similarity(&uniform(&p, &q)).unwrap();
        assert!((t.s - 3.0).abs() < 1e-12 && t.theta.abs() < 1e-12 && t.t.norm() < 1e-12);
    }

    #[test]
    fn similarity_recovers_known_transform() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let truth = SimilarityTransform2D::new(2.5, 0.7, Point2::new(3.0, -1.0));
        for n in [3, 5, 50] {
            let p = random_points(&mut rng, n, 10.0);
            let q = apply_transform(&truth, &p);
            let t = solve_similarity(&uniform(&p, &q)).unwrap();
            assert!((t.s - truth.s).abs() < 1e-9);
            assert!((t.theta - truth.theta).abs() < 1e-9);
            assert!(t.t.distance(truth.t) < 1e-9);
        }
    }

    #[test]
    fn similarity_rejects_degenerate_input() {
        let p = Point2::new(1.0, 2.0);
        let pairs = [
            WeightedPointPair::new(p, Point2::new(0.0, 0.0), 1.0),
            WeightedPointPair::new(p, Point2::new(1.0, 0.0), 1.0),
        ];
        assert!(matches!(solve_similarity(&pairs), Err(Error::DegenerateConfiguration(_))));
        let single = [
            WeightedPointPair::new(Point2::new(0.0, 0.0), Point2::new(0.0, 0.0), 1.0),
            WeightedPointPair::new(Point2::new(1.0, 0.0), Point2::new(1.0, 0.0), 0.0),
        ];
        assert!(matches!(solve_similarity(&single), Err(Error::DegenerateConfiguration(_))));
        let zero = [
            WeightedPointPair::new(Point2::new(0.0, 0.0), Point2::new(0.0, 0.0), 0.0),
            WeightedPointPair::new(Point2::new(1.0, 0.0), Point2::new(1.0, 0.0), 0.0),
        ];
        assert!(matches!(solve_similarity(&zero), Err(Error::ZeroWeightSum)));
    }

    #[test]
    fn reflected_data_still_yields_proper_rotation() {
        let p = [Point2::new(1.0, 0.0), Point2::new(0.0, 2.0), Point2::new(-1.0, -1.0)];
        let q: Vec<Point2> = p.iter().map(|p| Point2::new(p.x, -p.y)).collect();
        let sol = solve_similarity_detailed(&uniform(&p, &q)).unwrap();
        assert!(sol.reflection_corrected);
        assert!(sol.transform.s > 0.0);
        assert!((sol.transform.rotation().det() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn orthogonal_examples() {
        let p = [Point2::new(1.0, 0.0), Point2::new(0.0, 1.0), Point2::new(-1.0, -1.0)];
        let t = solve_orthogonal(&uniform(&p, &p)).unwrap();
        assert!(t.theta.abs() < 1e-12 && t.t.norm() < 1e-12 && t.s == 1.0);

        let q: Vec<Point2> = p.iter().map(|&p| p * 3.0).collect();
        let pairs = uniform(&p, &q);
        let t = solve_orthogonal(&pairs).unwrap();
        assert_eq!(t.s, 1.0);
        assert!(t.theta.abs() < 1e-12 && t.t.norm() < 1e-12);
        assert!(alignment_objective(&t, &pairs) > 1.0);
        let sim = solve_similarity(&pairs).unwrap();
        assert!(alignment_objective(&sim, &pairs) <= alignment_objective(&t, &pairs));
    }

    #[test]
    fn orthogonal_never_beats_similarity_under_scale_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..100 {
            let p = random_points(&mut rng, 12, 8.0);
            let truth = SimilarityTransform2D::new(rng.gen_range(0.2..5.0), rng.gen_range(-3.0..3.0), Point2::new(1.0, 2.0));
            let pairs: Vec<WeightedPointPair> = p
                .iter()
                .map(|&p| {
                    let noise = Point2::new(rng.gen_range(-0.1..0.1), rng.gen_range(-0.1..0.1));
                    WeightedPointPair::new(p, truth.apply(p) + noise, rng.gen_range(0.1..1.0))
                })
                .collect();
            let sim = solve_similarity(&pairs).unwrap();
            let orth = solve_orthogonal(&pairs).unwrap();
            assert!(alignment_objective(&orth, &pairs) >= alignment_objective(&sim, &pairs) - 1e-9);
        }
    }

    #[test]
    fn apply_transform_examples() {
        let pts = [Point2::new(1.0, 1.0), Point2::new(-2.0, 0.5)];
        assert_eq!(apply_transform(&SimilarityTransform2D::IDENTITY, &pts), pts.to_vec());
        let t = SimilarityTransform2D::new(2.0, 0.0, Point2::new(1.0, 0.0));
        assert_eq!(t.apply(Point2::new(1.0, 1.0)), Point2::new(3.0, 2.0));

        let t = SimilarityTransform2D::new(0.37, 2.1, Point2::new(-4.0, 9.5));
        let back = apply_transform(&t.inverse(), &apply_transform(&t, &pts));
        for (a, b) in back.iter().zip(&pts) {
            assert!(a.distance(*b) < 1e-12);
        }
    }

    #[test]
    fn wrap_angle_range() {
        assert_eq!(wrap_angle(PI), -PI);
        assert_eq!(wrap_angle(-PI), -PI);
        assert!((wrap_angle(3.0 * PI / 2.0) + PI / 2.0).abs() < 1e-15);
        assert!(wrap_angle(-1e-300) < 0.0 || wrap_angle(-1e-300) == 0.0);
        for k in -20..20 {
            let a = wrap_angle(0.3 + k as f64 * 0.7);
            assert!((-PI..PI).contains(&a));
        }
    }

    #[test]
    fn atan2_angle_matches_svd_rotation() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        for _ in 0..500 {
            let p = random_points(&mut rng, 6, 5.0);
            let q = random_points(&mut rng, 6, 5.0);
            let sol = solve_similarity_detailed(&uniform(&p, &q)).unwrap();
            let direct = optimal_angle(&sol.covariance);
            assert!(wrap_angle(direct - sol.transform.theta).abs() < 1e-9);
        }
    }
}
