//! Coordinate assignment: aerial cells to metric bird's-eye-view points and
//! ground cells, through depth and per-cell ray directions, to 3D points in
//! the camera frame.
//!
//! Frames: the ground camera sits at the origin with `+x` forward, `+y` left
//! and `+z` up; the bird's-eye-view plane is `(x, y)`. The aerial frame is
//! north-up with `+x` east and `+y` north, origin at the aerial image center.
//! A pose angle is the counterclockwise rotation taking camera `+x` onto the
//! aerial frame.

use std::collections::HashMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Point2, Point3};

/// Metric metadata of a geo-referenced aerial grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AerialMeta {
    pub meters_per_cell: f64,
    #[serde(default)]
    pub center_offset: Point2,
}

impl AerialMeta {
    pub fn new(meters_per_cell: f64) -> Self {
        Self {
            meters_per_cell,
            center_offset: Point2::ORIGIN,
        }
    }
}

/// Aerial grid shape plus metadata; converts between cells and metric points.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AerialLayout {
    pub rows: usize,
    pub cols: usize,
    pub meta: AerialMeta,
}

impl AerialLayout {
    pub fn new(rows: usize, cols: usize, meta: AerialMeta) -> Self {
        Self { rows, cols, meta }
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Metric center of the flat (row-major) cell index.
    pub fn center(&self, index: usize) -> Point2 {
        let (row, col) = (index / self.cols, index % self.cols);
        cell_center(row, col, self.rows, self.cols, &self.meta)
    }

    pub fn centers(&self) -> Vec<Point2> {
        (0..self.len()).map(|i| self.center(i)).collect()
    }

    /// Half the side length covered by the grid, per axis.
    pub fn half_extent(&self) -> Point2 {
        Point2::new(
            0.5 * self.cols as f64 * self.meta.meters_per_cell,
            0.5 * self.rows as f64 * self.meta.meters_per_cell,
        )
    }

    /// True when `point` lies on the covered area (edges inclusive).
    pub fn contains(&self, point: Point2) -> bool {
        let rel = point - self.meta.center_offset;
        let half = self.half_extent();
        rel.x.abs() <= half.x && rel.y.abs() <= half.y
    }

    /// Nearest cell center to `point`, or `None` outside the coverage.
    /// Ties go to the lower row-major index.
    pub fn nearest_cell(&self, point: Point2) -> Option<usize> {
        if !self.contains(point) {
            return None;
        }
        let mpc = self.meta.meters_per_cell;
        let rel = point - self.meta.center_offset;
        let col_f = rel.x / mpc + (self.cols as f64 - 1.0) / 2.0;
        let row_f = (self.rows as f64 - 1.0) / 2.0 - rel.y / mpc;
        // Round half down so exact midpoints resolve to the lower index.
        let col = (col_f - 0.5).ceil().clamp(0.0, self.cols as f64 - 1.0) as usize;
        let row = (row_f - 0.5).ceil().clamp(0.0, self.rows as f64 - 1.0) as usize;
        Some(row * self.cols + col)
    }
}

fn cell_center(row: usize, col: usize, rows: usize, cols: usize, meta: &AerialMeta) -> Point2 {
    let mpc = meta.meters_per_cell;
    Point2::new(
        (col as f64 - (cols as f64 - 1.0) / 2.0) * mpc,
        ((rows as f64 - 1.0) / 2.0 - row as f64) * mpc,
    ) + meta.center_offset
}

/// Metric (east, north) position of an aerial cell center.
pub fn aerial_cell_to_metric(cell: (usize, usize), meta: &AerialMeta, rows: usize, cols: usize) -> Result<Point2> {
    let (row, col) = cell;
    if row >= rows || col >= cols {
        return Err(Error::OutOfRange { row, col, rows, cols });
    }
    Ok(cell_center(row, col, rows, cols, meta))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CameraModel {
    Equirectangular,
    Pinhole { fx: f64, fy: f64, cx: f64, cy: f64 },
}

/// Per-cell unit ray directions of the ground camera.
///
/// Directions start from the camera model evaluated at cell centers; a cell
/// may carry a refined direction (an observation off the cell center), which
/// is what the sidecar's override list records.
#[derive(Debug, Clone, PartialEq)]
pub struct RayModel {
    pub model: CameraModel,
    pub rows: usize,
    pub cols: usize,
    dirs: Vec<Point3>,
}

impl RayModel {
    pub fn new(model: CameraModel, rows: usize, cols: usize) -> Self {
        let mut rays = RayModel {
            model,
            rows,
            cols,
            dirs: Vec::with_capacity(rows * cols),
        };
        for r in 0..rows {
            for c in 0..cols {
                let d = rays.direction_at(c as f64 + 0.5, r as f64 + 0.5);
                rays.dirs.push(d);
            }
        }
        rays
    }

    pub fn equirectangular(rows: usize, cols: usize) -> Self {
        Self::new(CameraModel::Equirectangular, rows, cols)
    }

    /// Pinhole with square pixels, principal point at the image center and
    /// the given horizontal field of view.
    pub fn pinhole_fov(rows: usize, cols: usize, hfov: f64) -> Self {
        let fx = 0.5 * cols as f64 / (0.5 * hfov).tan();
        Self::new(
            CameraModel::Pinhole {
                fx,
                fy: fx,
                cx: 0.5 * cols as f64,
                cy: 0.5 * rows as f64,
            },
            rows,
            cols,
        )
    }

    pub fn len(&self) -> usize {
        self.dirs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dirs.is_empty()
    }

    pub fn direction(&self, cell: usize) -> Point3 {
        self.dirs[cell]
    }

    /// Unit direction at continuous image coordinates (`u` along columns,
    /// `v` along rows; the center of cell `(r, c)` is `(c + 0.5, r + 0.5)`).
    pub fn direction_at(&self, u: f64, v: f64) -> Point3 {
        match self.model {
            CameraModel::Equirectangular => {
                let az = 2.0 * PI * u / self.cols as f64 - PI;
                let el = PI / 2.0 - PI * v / self.rows as f64;
                let (se, ce) = el.sin_cos();
                let (sa, ca) = az.sin_cos();
                Point3::new(ce * ca, ce * sa, se)
            }
            CameraModel::Pinhole { fx, fy, cx, cy } => {
                let d = Point3::new(1.0, -(u - cx) / fx, -(v - cy) / fy);
                d.scaled(1.0 / d.norm())
            }
        }
    }

    /// Horizontal image coordinate at which a camera-frame bird's-eye-view
    /// direction is seen, or `None` when it is outside the field of view.
    pub fn column_coordinate(&self, planar: Point2) -> Option<f64> {
        match self.model {
            CameraModel::Equirectangular => {
                let az = planar.y.atan2(planar.x);
                let u = (az + PI) / (2.0 * PI) * self.cols as f64;
                Some(if u >= self.cols as f64 { 0.0 } else { u })
            }
            CameraModel::Pinhole { fx, cx, .. } => {
                if planar.x <= 0.0 {
                    return None;
                }
                let u = cx - fx * planar.y / planar.x;
                (u >= 0.0 && u < self.cols as f64).then_some(u)
            }
        }
    }

    /// Replaces one cell's direction; the vector is normalized.
    pub fn set_direction(&mut self, cell: usize, dir: Point3) -> Result<()> {
        let n = dir.norm();
        if !(n > 0.0) || !n.is_finite() {
            return Err(Error::InvalidConfig(format!("ray direction for cell {cell} has no length")));
        }
        self.restore_direction(cell, dir.scaled(1.0 / n))
    }

    /// Replaces one cell's direction with a stored, already unit vector,
    /// keeping its bits.
    pub(crate) fn restore_direction(&mut self, cell: usize, dir: Point3) -> Result<()> {
        if !((dir.norm() - 1.0).abs() < 1e-9) {
            return Err(Error::Malformed(format!("ray direction for cell {cell} is not unit length")));
        }
        if cell >= self.dirs.len() {
            return Err(Error::OutOfRange {
                row: cell / self.cols.max(1),
                col: cell % self.cols.max(1),
                rows: self.rows,
                cols: self.cols,
            });
        }
        self.dirs[cell] = dir;
        Ok(())
    }

    /// Cells whose direction differs from the bare camera model.
    pub fn overrides(&self) -> Vec<(usize, Point3)> {
        let base = RayModel::new(self.model, self.rows, self.cols);
        self.dirs
            .iter()
            .zip(&base.dirs)
            .enumerate()
            .filter(|(_, (a, b))| a != b)
            .map(|(i, (a, _))| (i, *a))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DepthKind {
    Metric,
    Relative,
}

/// Per-cell depth along the cell's ray. Non-finite or non-positive entries
/// mark cells without a usable depth (sky).
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub rows: usize,
    pub cols: usize,
    pub kind: DepthKind,
    pub data: Vec<f64>,
}

impl DepthMap {
    pub fn new(rows: usize, cols: usize, kind: DepthKind, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::LengthMismatch {
                expected: rows * cols,
                got: data.len(),
            });
        }
        Ok(Self { rows, cols, kind, data })
    }

    /// Every depth multiplied by `k`.
    pub fn scaled(&self, k: f64) -> DepthMap {
        DepthMap {
            data: self.data.iter().map(|d| d * k).collect(),
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjectionMode {
    /// Keep every matched ground point.
    #[default]
    All,
    /// Keep only the highest point per bird's-eye-view bucket.
    Topmost,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LiftConfig {
    pub max_depth: f64,
    pub initial_scale: f64,
    #[serde(default)]
    pub projection: ProjectionMode,
}

impl LiftConfig {
    pub const PANORAMA_MAX_DEPTH: f64 = 35.0;
    pub const FORWARD_MAX_DEPTH: f64 = 40.0;

    pub fn validate(&self) -> Result<()> {
        if !(self.max_depth > 0.0) {
            return Err(Error::InvalidConfig("max_depth must be positive".into()));
        }
        if !(self.initial_scale > 0.0) || !self.initial_scale.is_finite() {
            return Err(Error::InvalidConfig("initial_scale must be positive".into()));
        }
        Ok(())
    }
}

impl Default for LiftConfig {
    fn default() -> Self {
        Self {
            max_depth: Self::PANORAMA_MAX_DEPTH,
            initial_scale: 1.0,
            projection: ProjectionMode::All,
        }
    }
}

/// `(depth * initial_scale) * ray` for one ground cell (flat index).
pub fn lift_ground_cell(cell: usize, depth_map: &DepthMap, rays: &RayModel, initial_scale: f64) -> Result<Point3> {
    let depth = *depth_map.data.get(cell).ok_or(Error::OutOfRange {
        row: cell / depth_map.cols.max(1),
        col: cell % depth_map.cols.max(1),
        rows: depth_map.rows,
        cols: depth_map.cols,
    })?;
    if !(depth > 0.0) || !depth.is_finite() {
        return Err(Error::InvalidDepth { cell, depth });
    }
    Ok(rays.direction(cell).scaled(depth * initial_scale))
}

/// True where the scaled depth is finite, positive and within `max_depth`
/// (inclusive).
pub fn depth_valid_mask(depth_map: &DepthMap, config: &LiftConfig) -> Vec<bool> {
    depth_map
        .data
        .iter()
        .map(|&d| d.is_finite() && d > 0.0 && d * config.initial_scale <= config.max_depth)
        .collect()
}

/// Indices of the points kept by the projection, in input order.
///
/// `Topmost` quantizes the plane into `bucket`-sized squares and keeps the
/// point with the largest `z` per square (first one on ties).
pub fn planar_projection_indices(points: &[Point3], mode: ProjectionMode, bucket: f64) -> Vec<usize> {
    match mode {
        ProjectionMode::All => (0..points.len()).collect(),
        ProjectionMode::Topmost => {
            let mut best: HashMap<(i64, i64), usize> = HashMap::new();
            for (i, p) in points.iter().enumerate() {
                let key = ((p.x / bucket).floor() as i64, (p.y / bucket).floor() as i64);
                best.entry(key)
                    .and_modify(|j| {
                        if p.z > points[*j].z {
                            *j = i;
                        }
                    })
                    .or_insert(i);
            }
            let mut kept: Vec<usize> = best.into_values().collect();
            kept.sort_unstable();
            kept
        }
    }
}

pub fn planar_projection(points: &[Point3], mode: ProjectionMode, bucket: f64) -> Vec<Point2> {
    planar_projection_indices(points, mode, bucket)
        .into_iter()
        .map(|i| points[i].planar())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn aerial_cell_examples() {
        let meta = AerialMeta::new(1.75);
        assert_eq!(aerial_cell_to_metric((20, 20), &meta, 41, 41).unwrap(), Point2::ORIGIN);
        assert_eq!(aerial_cell_to_metric((20, 40), &meta, 41, 41).unwrap(), Point2::new(35.0, 0.0));
        assert_eq!(aerial_cell_to_metric((0, 20), &meta, 41, 41).unwrap(), Point2::new(0.0, 35.0));
        assert!(matches!(
            aerial_cell_to_metric((41, 0), &meta, 41, 41),
            Err(Error::OutOfRange { .. })
        ));
    }

    #[test]
    fn aerial_cells_are_injective_with_exact_spacing_and_invertible() {
        let layout = AerialLayout::new(9, 12, AerialMeta::new(0.5));
        let centers = layout.centers();
        for (i, a) in centers.iter().enumerate() {
            for (j, b) in centers.iter().enumerate().skip(i + 1) {
                assert!(a.distance(*b) >= 0.5 - 1e-12, "cells {i} and {j} collide");
            }
            if i % layout.cols + 1 < layout.cols {
                assert!((centers[i + 1].x - a.x - 0.5).abs() < 1e-12);
            }
            assert_eq!(layout.nearest_cell(*a), Some(i));
        }
        assert_eq!(layout.nearest_cell(Point2::new(100.0, 0.0)), None);
    }

    #[test]
    fn lift_examples() {
        let mut rays = RayModel::equirectangular(2, 2);
        rays.set_direction(0, Point3::new(1.0, 0.0, 0.0)).unwrap();
        rays.set_direction(1, Point3::new(0.0, 1.0, 0.0)).unwrap();
        let depth = DepthMap::new(2, 2, DepthKind::Metric, vec![5.0, 2.0, -1.0, f64::INFINITY]).unwrap();
        assert_eq!(lift_ground_cell(0, &depth, &rays, 1.0).unwrap(), Point3::new(5.0, 0.0, 0.0));
        assert_eq!(lift_ground_cell(1, &depth, &rays, 3.0).unwrap(), Point3::new(0.0, 6.0, 0.0));
        assert!(matches!(lift_ground_cell(2, &depth, &rays, 1.0), Err(Error::InvalidDepth { .. })));
        assert!(matches!(lift_ground_cell(3, &depth, &rays, 1.0), Err(Error::InvalidDepth { .. })));
    }

    #[test]
    fn equirectangular_matches_spherical_oracle() {
        let (rows, cols) = (8, 16);
        let rays = RayModel::equirectangular(rows, cols);
        let depth = DepthMap::new(rows, cols, DepthKind::Metric, (0..rows * cols).map(|i| 1.0 + i as f64 * 0.1).collect()).unwrap();
        for r in 0..rows {
            for c in 0..cols {
                let cell = r * cols + c;
                let az = 2.0 * PI * (c as f64 + 0.5) / cols as f64 - PI;
                let polar = PI * (r as f64 + 0.5) / rows as f64;
                let d = depth.data[cell] * 2.0;
                let oracle = Point3::new(d * polar.sin() * az.cos(), d * polar.sin() * az.sin(), d * polar.cos());
                let p = lift_ground_cell(cell, &depth, &rays, 2.0).unwrap();
                assert!((p.x - oracle.x).abs() < 1e-9 && (p.y - oracle.y).abs() < 1e-9 && (p.z - oracle.z).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn horizontal_rays_keep_planar_range() {
        let rays = RayModel::equirectangular(4, 32);
        let mut rays = rays;
        let dir = Point3::new(0.6, 0.8, 0.0);
        rays.set_direction(5, dir).unwrap();
        let depth = DepthMap::new(4, 32, DepthKind::Relative, vec![3.0; 128]).unwrap();
        let p = lift_ground_cell(5, &depth, &rays, 7.0).unwrap();
        assert!((p.planar().norm() - 21.0).abs() < 1e-9);
    }

    #[test]
    fn rays_are_unit_and_panorama_wraps() {
        let rays = RayModel::equirectangular(6, 24);
        assert!((0..rays.len()).all(|i| (rays.direction(i).norm() - 1.0).abs() < 1e-9));
        // leftmost and rightmost columns sit one column step apart across the seam
        let left = rays.direction(0).planar();
        let right = rays.direction(23).planar();
        let step = 2.0 * PI / 24.0;
        let angle = (left.x * right.x + left.y * right.y) / (left.norm() * right.norm());
        assert!((angle.acos() - step).abs() < 1e-9);
        let pin = RayModel::pinhole_fov(6, 24, PI / 2.0);
        assert!((0..pin.len()).all(|i| (pin.direction(i).norm() - 1.0).abs() < 1e-9));
        assert!(pin.column_coordinate(Point2::new(-1.0, 0.0)).is_none());
        assert!((pin.column_coordinate(Point2::new(1.0, 0.0)).unwrap() - 12.0).abs() < 1e-12);
    }

    #[test]
    fn depth_mask_examples() {
        let cfg = LiftConfig {
            max_depth: 10.0,
            initial_scale: 2.0,
            projection: ProjectionMode::All,
        };
        let d = DepthMap::new(1, 5, DepthKind::Metric, vec![1.0, 5.0, 5.5, f64::NAN, 0.0]).unwrap();
        assert_eq!(depth_valid_mask(&d, &cfg), vec![true, true, false, false, false]);

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let data: Vec<f64> = (0..200).map(|_| rng.gen_range(-1.0..20.0)).collect();
        let d = DepthMap::new(10, 20, DepthKind::Relative, data.clone()).unwrap();
        let mask = depth_valid_mask(&d, &cfg);
        for (m, v) in mask.iter().zip(&data) {
            assert_eq!(*m, *v > 0.0 && v * 2.0 <= 10.0);
        }
        // thresholding commutes with pre-scaling the map
        let unit = LiftConfig { initial_scale: 1.0, ..cfg };
        assert_eq!(mask, depth_valid_mask(&d.scaled(2.0), &unit));
    }

    #[test]
    fn projection_examples() {
        let pts = [Point3::new(1.0, 2.0, 3.0)];
        assert_eq!(planar_projection(&pts, ProjectionMode::All, 1.0), vec![Point2::new(1.0, 2.0)]);
        let pts = [Point3::new(1.2, 2.2, 0.0), Point3::new(1.2, 2.2, 5.0)];
        assert_eq!(planar_projection_indices(&pts, ProjectionMode::Topmost, 1.0), vec![1]);
    }

    #[test]
    fn topmost_matches_group_by_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pts: Vec<Point3> = (0..300)
            .map(|_| Point3::new(rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0), rng.gen_range(0.0..8.0)))
            .collect();
        let kept = planar_projection_indices(&pts, ProjectionMode::Topmost, 1.5);
        let mut oracle = Vec::new();
        for (i, p) in pts.iter().enumerate() {
            let key = |q: &Point3| ((q.x / 1.5).floor(), (q.y / 1.5).floor());
            let is_top = pts
                .iter()
                .enumerate()
                .filter(|(_, q)| key(q) == key(p))
                .all(|(j, q)| q.z < p.z || (q.z == p.z && j >= i));
            if is_top {
                oracle.push(i);
            }
        }
        assert_eq!(kept, oracle);
    }
}
