//! Pose error decomposition, summaries and rank correlation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{wrap_angle, Point2, SimilarityTransform2D};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorSample {
    /// Meters.
    pub loc_error: f64,
    /// Degrees in `[0, 180]`.
    pub ori_error: f64,
    pub lateral: f64,
    pub longitudinal: f64,
}

/// Errors of `est` against `gt`; `heading` (radians, aerial frame) splits the
/// translation error into along-track and cross-track parts.
pub fn pose_errors(est: &SimilarityTransform2D, gt: &SimilarityTransform2D, heading: f64) -> ErrorSample {
    let d = est.t - gt.t;
    let along = Point2::new(heading.cos(), heading.sin());
    let normal = Point2::new(-along.y, along.x);
    ErrorSample {
        loc_error: d.norm(),
        ori_error: angle_error_deg(est.theta, gt.theta),
        lateral: d.dot(normal).abs(),
        longitudinal: d.dot(along).abs(),
    }
}

/// Absolute wrapped angle difference in degrees.
pub fn angle_error_deg(a: f64, b: f64) -> f64 {
    let d = wrap_angle(a - b).abs().to_degrees();
    d.min(180.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub meters: Vec<f64>,
    pub degrees: Vec<f64>,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            meters: vec![1.0, 5.0],
            degrees: vec![1.0, 5.0],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanMedian {
    pub mean: f64,
    pub median: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Recall {
    pub threshold: f64,
    /// Percentage in `[0, 100]`.
    pub percent: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub count: usize,
    pub localization: MeanMedian,
    pub orientation: MeanMedian,
    pub lateral: MeanMedian,
    pub longitudinal: MeanMedian,
    pub recall_meters: Vec<Recall>,
    pub recall_degrees: Vec<Recall>,
}

pub fn mean(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::EmptyInput);
    }
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

/// Even-length inputs give the average of the two middle values.
pub fn median(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Ok(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

/// Percentage of values `<= threshold`.
pub fn recall(values: &[f64], threshold: f64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    100.0 * values.iter().filter(|v| **v <= threshold).count() as f64 / values.len() as f64
}

fn mean_median(values: &[f64]) -> Result<MeanMedian> {
    Ok(MeanMedian {
        mean: mean(values)?,
        median: median(values)?,
    })
}

pub fn summarize(samples: &[ErrorSample], thresholds: &Thresholds) -> Result<Summary> {
    if samples.is_empty() {
        return Err(Error::EmptyInput);
    }
    let loc: Vec<f64> = samples.iter().map(|s| s.loc_error).collect();
    let ori: Vec<f64> = samples.iter().map(|s| s.ori_error).collect();
    let lat: Vec<f64> = samples.iter().map(|s| s.lateral).collect();
    let lon: Vec<f64> = samples.iter().map(|s| s.longitudinal).collect();
    Ok(Summary {
        count: samples.len(),
        localization: mean_median(&loc)?,
        orientation: mean_median(&ori)?,
        lateral: mean_median(&lat)?,
        longitudinal: mean_median(&lon)?,
        recall_meters: thresholds
            .meters
            .iter()
            .map(|&t| Recall { threshold: t, percent: recall(&loc, t) })
            .collect(),
        recall_degrees: thresholds
            .degrees
            .iter()
            .map(|&t| Recall { threshold: t, percent: recall(&ori, t) })
            .collect(),
    })
}

/// 1-based ranks, ties receiving the average of the ranks they span.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    let mx = mean(x)?;
    let my = mean(y)?;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::DegenerateConfiguration("constant input has no correlation"));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

/// Spearman rank correlation (Pearson over average ranks).
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::LengthMismatch {
            expected: x.len(),
            got: y.len(),
        });
    }
    if x.len() < 2 {
        return Err(Error::EmptyInput);
    }
    pearson(&average_ranks(x), &average_ranks(y))
}
