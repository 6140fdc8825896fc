//! Synthetic cross-view scenes with exact ground truth.
//!
//! Landmarks are vertical poles standing on flat ground. Each carries a
//! latent feature vector that both views observe (plus noise). The ground
//! camera sees a pole in the image column containing its azimuth, in every
//! row whose elevation band overlaps the pole; such cells get a refined ray
//! pointing exactly at the pole, so lifting their depth reproduces the pole's
//! position.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Point2, Point3, SimilarityTransform2D, WeightedPointPair};
use crate::lifting::{AerialLayout, AerialMeta, DepthKind, DepthMap, RayModel};
use crate::matching::{FeatureGrid, GridMeta};

const SCENE_STREAM: u64 = 0;
const AERIAL_STREAM: u64 = 1;
const GROUND_STREAM: u64 = 2;
const DEPTH_STREAM: u64 = 3;
const PLACEMENT_ATTEMPTS: usize = 200;
/// Poles closer than this are not rendered.
const MIN_RANGE: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CameraKind {
    Panorama,
    Pinhole { fov_deg: f64 },
}

/// Range of the true yaw.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PosePrior {
    Fixed,
    Within10Deg,
    Within180Deg,
}

impl PosePrior {
    pub fn half_range(self) -> f64 {
        match self {
            PosePrior::Fixed => 0.0,
            PosePrior::Within10Deg => 10f64.to_radians(),
            PosePrior::Within180Deg => PI,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    /// Side of the square aerial coverage, meters.
    pub aerial_extent: f64,
    /// Aerial grid is `aerial_size x aerial_size`.
    pub aerial_size: usize,
    pub landmarks: usize,
    pub ground_rows: usize,
    pub ground_cols: usize,
    pub feature_dim: usize,
    /// Latents live in the first `signal_dim` coordinates; `None` uses all.
    pub signal_dim: Option<usize>,
    /// Per-component standard deviation of the observation noise.
    pub feature_noise: f64,
    /// Standard deviation of a multiplicative log-normal error on every
    /// rendered depth, drawn independently per cell.
    pub depth_noise: f64,
    /// Fraction of below-horizon background cells that get a valid ground
    /// depth (and a random latent).
    pub clutter: f64,
    /// Fraction of correspondences replaced by `contaminate` in experiments.
    pub outlier_fraction: f64,
    pub camera: CameraKind,
    pub pose_prior: PosePrior,
    pub depth_kind: DepthKind,
    pub camera_height: f64,
    pub max_landmark_height: f64,
    /// Metric range within which landmarks count as visible for placement.
    pub visibility_range: f64,
    pub min_visible: usize,
    pub require_visible: bool,
    /// Put landmarks exactly on distinct aerial cell centers.
    pub snap_landmarks: bool,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            aerial_extent: 72.0,
            aerial_size: 41,
            landmarks: 150,
            ground_rows: 32,
            ground_cols: 128,
            feature_dim: 32,
            signal_dim: None,
            feature_noise: 0.0,
            depth_noise: 0.0,
            clutter: 0.0,
            outlier_fraction: 0.0,
            camera: CameraKind::Panorama,
            pose_prior: PosePrior::Within180Deg,
            depth_kind: DepthKind::Metric,
            camera_height: 1.6,
            max_landmark_height: 8.0,
            visibility_range: 35.0,
            min_visible: 8,
            require_visible: true,
            snap_landmarks: true,
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }

    pub fn signal_dim(&self) -> usize {
        self.signal_dim.unwrap_or(self.feature_dim)
    }

    pub fn meters_per_cell(&self) -> f64 {
        self.aerial_extent / self.aerial_size as f64
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if !(self.aerial_extent > 0.0) {
            return bad("aerial extent must be positive");
        }
        if self.aerial_size < 1 || self.ground_rows < 1 || self.ground_cols < 1 || self.feature_dim < 1 {
            return bad("grid sizes and feature dim must be at least 1");
        }
        if self.landmarks < 1 && self.require_visible {
            return bad("landmark count must be at least 1 when visibility is required");
        }
        let s = self.signal_dim();
        if s < 1 || s > self.feature_dim {
            return bad("signal dim must be in 1..=feature_dim");
        }
        if !(self.feature_noise >= 0.0) || !self.feature_noise.is_finite() {
            return bad("feature noise must be non-negative");
        }
        if !(self.depth_noise >= 0.0) || !self.depth_noise.is_finite() {
            return bad("depth noise must be non-negative");
        }
        for f in [self.clutter, self.outlier_fraction] {
            if !(0.0..=1.0).contains(&f) {
                return bad("fractions must lie in [0, 1]");
            }
        }
        if self.snap_landmarks && self.landmarks > self.aerial_size * self.aerial_size {
            return bad("more snapped landmarks than aerial cells");
        }
        if !(self.camera_height > 0.0) || !(self.max_landmark_height > 0.0) || !(self.visibility_range > 0.0) {
            return bad("heights and visibility range must be positive");
        }
        if let CameraKind::Pinhole { fov_deg } = self.camera {
            if !(fov_deg > 0.0 && fov_deg < 180.0) {
                return bad("pinhole field of view must be in (0, 180) degrees");
            }
        }
        Ok(())
    }

    pub fn base_rays(&self) -> RayModel {
        match self.camera {
            CameraKind::Panorama => RayModel::equirectangular(self.ground_rows, self.ground_cols),
            CameraKind::Pinhole { fov_deg } => RayModel::pinhole_fov(self.ground_rows, self.ground_cols, fov_deg.to_radians()),
        }
    }

    pub fn aerial_layout(&self) -> AerialLayout {
        AerialLayout::new(self.aerial_size, self.aerial_size, AerialMeta::new(self.meters_per_cell()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Landmark {
    pub position: Point2,
    pub latent: Vec<f64>,
    pub height: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub config: SceneConfig,
    pub landmarks: Vec<Landmark>,
    /// Camera frame to aerial frame, unit scale.
    pub pose: SimilarityTransform2D,
    /// Metric depth divided by this gives the rendered depth.
    pub s_gt: f64,
    pub aerial: FeatureGrid,
    pub ground: FeatureGrid,
    pub depth: DepthMap,
    pub rays: RayModel,
    /// Landmark seen by each ground cell.
    pub ground_landmark: Vec<Option<usize>>,
    /// Landmark represented by each aerial cell.
    pub aerial_landmark: Vec<Option<usize>>,
}

impl SyntheticScene {
    /// Driving direction of the camera in the aerial frame.
    pub fn heading(&self) -> f64 {
        self.pose.theta
    }

    /// The transform the estimator should return when lifting with
    /// `initial_scale`.
    pub fn expected_transform(&self, initial_scale: f64) -> SimilarityTransform2D {
        SimilarityTransform2D {
            s: self.s_gt / initial_scale,
            ..self.pose
        }
    }

    pub fn aerial_layout(&self) -> AerialLayout {
        self.config.aerial_layout()
    }

    /// Aerial cell of each landmark, if it won its cell.
    pub fn landmark_cells(&self) -> Vec<Option<usize>> {
        let mut out = vec![None; self.landmarks.len()];
        for (cell, l) in self.aerial_landmark.iter().enumerate() {
            if let Some(l) = l {
                out[*l] = Some(cell);
            }
        }
        out
    }

    /// Ground-truth (ground cell, aerial cell) pairs for every rendered
    /// landmark cell whose landmark has an aerial cell.
    pub fn true_cell_pairs(&self) -> Vec<(usize, usize)> {
        let cells = self.landmark_cells();
        self.ground_landmark
            .iter()
            .enumerate()
            .filter_map(|(g, l)| l.and_then(|l| cells[l]).map(|a| (g, a)))
            .collect()
    }

    /// Correct lifted-to-aerial pairs with unit weights.
    pub fn true_pairs(&self, initial_scale: f64) -> Vec<WeightedPointPair> {
        let layout = self.aerial_layout();
        self.true_cell_pairs()
            .into_iter()
            .map(|(g, a)| {
                let p = self.rays.direction(g).scaled(self.depth.data[g] * initial_scale).planar();
                WeightedPointPair::new(p, layout.center(a), 1.0)
            })
            .collect()
    }

    /// Landmarks with at least one rendered cell within the visibility range.
    pub fn visible_landmarks(&self) -> Vec<usize> {
        visible(&self.ground_landmark, &self.depth.data, self.s_gt, self.config.visibility_range, self.landmarks.len())
    }
}

fn visible(ground_landmark: &[Option<usize>], depth: &[f64], s_gt: f64, range: f64, count: usize) -> Vec<usize> {
    let mut seen = vec![false; count];
    for (l, d) in ground_landmark.iter().zip(depth) {
        if let Some(l) = l {
            if d * s_gt <= range {
                seen[*l] = true;
            }
        }
    }
    (0..count).filter(|&l| seen[l]).collect()
}

fn latent(rng: &mut ChaCha8Rng, dim: usize, signal: usize) -> Vec<f64> {
    loop {
        let mut v = vec![0.0; dim];
        for x in v.iter_mut().take(signal) {
            *x = rng.sample(StandardNormal);
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-12 {
            v.iter_mut().for_each(|x| *x /= n);
            return v;
        }
    }
}

fn add_noise(rng: &mut ChaCha8Rng, v: &mut [f64], sigma: f64) {
    if sigma > 0.0 {
        for x in v {
            *x += sigma * rng.sample::<f64, _>(StandardNormal);
        }
    }
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Elevation (radians) of a direction.
fn elevation(d: Point3) -> f64 {
    d.z.atan2(d.x.hypot(d.y))
}

struct GroundHit {
    landmark: usize,
    /// Horizontal distance, used for the z-buffer.
    distance: f64,
    range: f64,
    dir: Point3,
}

/// Pure ray casting of the poles into the ground image; no randomness.
fn trace_ground(cfg: &SceneConfig, landmarks: &[Landmark], pose: &SimilarityTransform2D) -> Vec<Option<GroundHit>> {
    let rays = cfg.base_rays();
    let (rows, cols) = (cfg.ground_rows, cfg.ground_cols);
    let to_camera = pose.inverse();
    let mut hits: Vec<Option<GroundHit>> = (0..rows * cols).map(|_| None).collect();
    for (l, lm) in landmarks.iter().enumerate() {
        let c = to_camera.apply(lm.position);
        let d = c.norm();
        if d < MIN_RANGE {
            continue;
        }
        let Some(u) = rays.column_coordinate(c) else { continue };
        let col = (u.floor() as usize).min(cols - 1);
        let az = c.y.atan2(c.x);
        let lo = (-cfg.camera_height).atan2(d);
        let hi = (lm.height - cfg.camera_height).atan2(d);
        for r in 0..rows {
            let top = elevation(rays.direction_at(u, r as f64));
            let bottom = elevation(rays.direction_at(u, r as f64 + 1.0));
            if !(bottom.max(lo) < top.min(hi)) {
                continue;
            }
            let el = elevation(rays.direction_at(u, r as f64 + 0.5)).clamp(lo, hi);
            let cell = r * cols + col;
            if hits[cell].as_ref().is_some_and(|h| h.distance <= d) {
                continue;
            }
            let (se, ce) = el.sin_cos();
            let (sa, ca) = az.sin_cos();
            hits[cell] = Some(GroundHit {
                landmark: l,
                distance: d,
                range: d / ce,
                dir: Point3::new(ce * ca, ce * sa, se),
            });
        }
    }
    hits
}

fn draw_pose(rng: &mut ChaCha8Rng, cfg: &SceneConfig) -> SimilarityTransform2D {
    let half = cfg.aerial_extent / 4.0;
    let t = Point2::new(rng.gen_range(-half..=half), rng.gen_range(-half..=half));
    let h = cfg.pose_prior.half_range();
    let theta = if h > 0.0 { rng.gen_range(-h..h) } else { 0.0 };
    SimilarityTransform2D::new(1.0, theta, t)
}

fn draw_landmarks(rng: &mut ChaCha8Rng, cfg: &SceneConfig) -> Vec<Landmark> {
    let layout = cfg.aerial_layout();
    let half = 0.5 * cfg.aerial_extent;
    let positions: Vec<Point2> = if cfg.snap_landmarks {
        rand::seq::index::sample(rng, layout.len(), cfg.landmarks)
            .into_iter()
            .map(|i| layout.center(i))
            .collect()
    } else {
        (0..cfg.landmarks)
            .map(|_| Point2::new(rng.gen_range(-half..half), rng.gen_range(-half..half)))
            .collect()
    };
    positions
        .into_iter()
        .map(|position| {
            let height = rng.gen_range(0.0..cfg.max_landmark_height);
            Landmark {
                position,
                latent: latent(rng, cfg.feature_dim, cfg.signal_dim()),
                height,
            }
        })
        .collect()
}

/// Owner landmark of each aerial cell: among landmarks inside the cell, the
/// one nearest the cell center (lowest index on ties).
fn assign_aerial_cells(cfg: &SceneConfig, landmarks: &[Landmark]) -> Vec<Option<usize>> {
    let layout = cfg.aerial_layout();
    let mut owner: Vec<Option<usize>> = vec![None; layout.len()];
    for (l, lm) in landmarks.iter().enumerate() {
        let Some(cell) = layout.nearest_cell(lm.position) else { continue };
        let center = layout.center(cell);
        let closer = match owner[cell] {
            None => true,
            Some(o) => lm.position.distance(center) < landmarks[o].position.distance(center),
        };
        if closer {
            owner[cell] = Some(l);
        }
    }
    owner
}

/// Draws a scene. The camera pose is redrawn until enough landmarks are
/// visible, up to a fixed number of attempts.
pub fn generate(cfg: &SceneConfig) -> Result<SyntheticScene> {
    cfg.validate()?;
    let mut rng = stream(cfg.seed, SCENE_STREAM);
    let landmarks = draw_landmarks(&mut rng, cfg);
    let s_gt = match cfg.depth_kind {
        DepthKind::Metric => 1.0,
        DepthKind::Relative => 10f64.powf(rng.gen_range(-2.0..=2.0)),
    };
    let needed = cfg.min_visible.max(1);
    let mut pose = draw_pose(&mut rng, cfg);
    if cfg.require_visible {
        let mut attempts = 1;
        loop {
            let hits = trace_ground(cfg, &landmarks, &pose);
            let owner: Vec<Option<usize>> = hits.iter().map(|h| h.as_ref().map(|h| h.landmark)).collect();
            let ranges: Vec<f64> = hits.iter().map(|h| h.as_ref().map_or(f64::INFINITY, |h| h.range)).collect();
            if visible(&owner, &ranges, 1.0, cfg.visibility_range, landmarks.len()).len() >= needed {
                break;
            }
            if attempts == PLACEMENT_ATTEMPTS {
                return Err(Error::PlacementFailure(attempts));
            }
            attempts += 1;
            pose = draw_pose(&mut rng, cfg);
        }
    }
    let aerial_landmark = assign_aerial_cells(cfg, &landmarks);
    let mut scene = SyntheticScene {
        config: cfg.clone(),
        aerial: FeatureGrid::new(0, 0, cfg.feature_dim, Vec::new(), GridMeta::Aerial(AerialMeta::new(cfg.meters_per_cell())))?,
        ground: FeatureGrid::new(0, 0, cfg.feature_dim, Vec::new(), GridMeta::Ground(RayModel::equirectangular(0, 0)))?,
        depth: DepthMap::new(0, 0, cfg.depth_kind, Vec::new())?,
        rays: cfg.base_rays(),
        landmarks,
        pose,
        s_gt,
        ground_landmark: Vec::new(),
        aerial_landmark,
    };
    scene.aerial = render_aerial(&scene)?;
    let ground = render_ground_detailed(&scene)?;
    scene.ground = ground.grid;
    scene.depth = ground.depth;
    scene.rays = ground.rays;
    scene.ground_landmark = ground.landmark;
    Ok(scene)
}

/// Landmark cells carry the landmark latent, other cells a fresh random
/// latent; every cell gets observation noise.
pub fn render_aerial(scene: &SyntheticScene) -> Result<FeatureGrid> {
    let cfg = &scene.config;
    let mut rng = stream(cfg.seed, AERIAL_STREAM);
    let n = cfg.aerial_size * cfg.aerial_size;
    let owner = assign_aerial_cells(cfg, &scene.landmarks);
    let mut data = Vec::with_capacity(n * cfg.feature_dim);
    for o in owner {
        let mut f = match o {
            Some(l) => scene.landmarks[l].latent.clone(),
            None => latent(&mut rng, cfg.feature_dim, cfg.signal_dim()),
        };
        add_noise(&mut rng, &mut f, cfg.feature_noise);
        data.extend(f);
    }
    FeatureGrid::new(cfg.aerial_size, cfg.aerial_size, cfg.feature_dim, data, GridMeta::Aerial(AerialMeta::new(cfg.meters_per_cell())))
}

pub struct GroundRender {
    pub grid: FeatureGrid,
    pub depth: DepthMap,
    pub rays: RayModel,
    pub landmark: Vec<Option<usize>>,
}

/// Ground features, depth along each cell's ray (metric range over `s_gt`)
/// and the refined ray model, plus the landmark seen by each cell.
pub fn render_ground_detailed(scene: &SyntheticScene) -> Result<GroundRender> {
    let cfg = &scene.config;
    let mut rng = stream(cfg.seed, GROUND_STREAM);
    let hits = trace_ground(cfg, &scene.landmarks, &scene.pose);
    let mut rays = cfg.base_rays();
    let n = cfg.ground_rows * cfg.ground_cols;
    let mut data = Vec::with_capacity(n * cfg.feature_dim);
    let mut depth = Vec::with_capacity(n);
    let mut landmark = Vec::with_capacity(n);
    for (cell, hit) in hits.iter().enumerate() {
        let mut f = match hit {
            Some(h) => {
                rays.set_direction(cell, h.dir)?;
                depth.push(h.range / scene.s_gt);
                landmark.push(Some(h.landmark));
                scene.landmarks[h.landmark].latent.clone()
            }
            None => {
                let dir = rays.direction(cell);
                let is_clutter = dir.z < 0.0 && rng.gen_bool(cfg.clutter);
                depth.push(if is_clutter {
                    cfg.camera_height / -dir.z / scene.s_gt
                } else {
                    f64::INFINITY
                });
                landmark.push(None);
                latent(&mut rng, cfg.feature_dim, cfg.signal_dim())
            }
        };
        add_noise(&mut rng, &mut f, cfg.feature_noise);
        data.extend(f);
    }
    if cfg.depth_noise > 0.0 {
        let mut rng = stream(cfg.seed, DEPTH_STREAM);
        for d in depth.iter_mut().filter(|d| d.is_finite()) {
            *d *= (cfg.depth_noise * rng.sample::<f64, _>(StandardNormal)).exp();
        }
    }
    Ok(GroundRender {
        grid: FeatureGrid::new(cfg.ground_rows, cfg.ground_cols, cfg.feature_dim, data, GridMeta::Ground(rays.clone()))?,
        depth: DepthMap::new(cfg.ground_rows, cfg.ground_cols, cfg.depth_kind, depth)?,
        rays,
        landmark,
    })
}

pub fn render_ground(scene: &SyntheticScene) -> Result<(FeatureGrid, DepthMap, RayModel)> {
    let g = render_ground_detailed(scene)?;
    Ok((g.grid, g.depth, g.rays))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Contaminated {
    pub pairs: Vec<WeightedPointPair>,
    /// True where the aerial point was replaced.
    pub outlier: Vec<bool>,
}

/// Replaces the aerial point of `floor(fraction * n)` randomly chosen pairs
/// with a uniform point in the square of side `extent` centered on the
/// origin.
pub fn contaminate(pairs: &[WeightedPointPair], fraction: f64, extent: f64, seed: u64) -> Result<Contaminated> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::InvalidConfig("outlier fraction must lie in [0, 1]".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let count = (fraction * pairs.len() as f64).floor() as usize;
    let mut out = pairs.to_vec();
    let mut outlier = vec![false; pairs.len()];
    let half = 0.5 * extent;
    for i in rand::seq::index::sample(&mut rng, pairs.len(), count) {
        out[i].q = Point2::new(rng.gen_range(-half..=half), rng.gen_range(-half..=half));
        outlier[i] = true;
    }
    Ok(Contaminated { pairs: out, outlier })
}
