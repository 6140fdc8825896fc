//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use xvloc::estimator::{PipelineConfig, RansacConfig};
use xvloc::experiments::{self, AblationMode};
use xvloc::geometry::{solve_similarity, solve_similarity_detailed, wrap_angle};
use xvloc::gradcheck::check_seeds;
use xvloc::io::{self, GridSidecar};
use xvloc::lifting::{AerialMeta, DepthKind, DepthMap, RayModel};
use xvloc::losses::{gt_aerial_targets, gt_ground_targets, pseudo_scale_targets};
use xvloc::matching::{augment_dustbin, dual_softmax, FeatureGrid, GridMeta, Matrix};
use xvloc::metrics::{median, Thresholds};
use xvloc::simulator::{generate, SceneConfig};
use xvloc::trainer::{reference_dataset, smooth, train, TrainConfig, REFERENCE_SCENES};
use xvloc::{Error, Point2, SimilarityTransform2D, WeightedPointPair};

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: String) -> Outcome {
    Outcome { passed, detail }
}

/// Random similarity instance: ground points, weights, and the aerial points
/// they map to exactly.
fn instance(rng: &mut ChaCha8Rng, n: usize, s: f64) -> (SimilarityTransform2D, Vec<WeightedPointPair>) {
    let t = SimilarityTransform2D::new(
        s,
        rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI),
        Point2::new(rng.gen_range(-50.0..50.0), rng.gen_range(-50.0..50.0)),
    );
    let pairs = (0..n)
        .map(|_| {
            let p = Point2::new(rng.gen_range(-20.0..20.0), rng.gen_range(-20.0..20.0));
            WeightedPointPair::new(p, t.apply(p), rng.gen_range(0.1..1.0))
        })
        .collect();
    (t, pairs)
}

fn component_error(a: &SimilarityTransform2D, b: &SimilarityTransform2D) -> f64 {
    [(a.s - b.s).abs(), wrap_angle(a.theta - b.theta).abs(), (a.t.x - b.t.x).abs(), (a.t.y - b.t.y).abs()]
        .into_iter()
        .fold(0.0, f64::max)
}

fn procrustes_exactness() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let n = rng.gen_range(3..=200);
        let s = rng.gen_range(0.1..10.0);
        let (truth, pairs) = instance(&mut rng, n, s);
        worst = worst.max(component_error(&solve_similarity(&pairs).unwrap(), &truth));
    }
    let elapsed = start.elapsed();
    outcome(
        worst < 1e-9 && elapsed < Duration::from_secs(5),
        format!("worst component error {worst:.2e}, {:.2} s", elapsed.as_secs_f64()),
    )
}

fn trace_identity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    let mut worst_oracle = 0.0f64;
    for _ in 0..1000 {
        let n = rng.gen_range(3..=200);
        let (_, pairs) = instance(&mut rng, n, 1.0);
        let sol = solve_similarity_detailed(&pairs).unwrap();
        let rel = (sol.singular_trace - sol.ground_spread).abs() / sol.ground_spread;
        worst = worst.max(rel);

        // Independent evaluation from the raw pairs.
        let w: f64 = pairs.iter().map(|p| p.w).sum();
        let pb = pairs.iter().fold(Point2::new(0.0, 0.0), |a, p| Point2::new(a.x + p.w * p.p.x / w, a.y + p.w * p.p.y / w));
        let qb = pairs.iter().fold(Point2::new(0.0, 0.0), |a, p| Point2::new(a.x + p.w * p.q.x / w, a.y + p.w * p.q.y / w));
        let mut c = [[0.0; 2]; 2];
        let mut spread = 0.0;
        for p in &pairs {
            let (px, py) = (p.p.x - pb.x, p.p.y - pb.y);
            let (qx, qy) = (p.q.x - qb.x, p.q.y - qb.y);
            c[0][0] += p.w * qx * px;
            c[0][1] += p.w * qx * py;
            c[1][0] += p.w * qy * px;
            c[1][1] += p.w * qy * py;
            spread += p.w * (px * px + py * py);
        }
        let fro = c[0][0].powi(2) + c[0][1].powi(2) + c[1][0].powi(2) + c[1][1].powi(2);
        let det = c[0][0] * c[1][1] - c[0][1] * c[1][0];
        let root = (fro * fro - 4.0 * det * det).max(0.0).sqrt();
        let (s1, s2) = (((fro + root) / 2.0).sqrt(), ((fro - root) / 2.0).max(0.0).sqrt());
        let trace = s1 + det.signum() * s2;
        worst_oracle = worst_oracle.max((trace - spread).abs() / spread);
    }
    outcome(
        worst < 1e-9 && worst_oracle < 1e-9,
        format!("worst relative gap {worst:.2e} (solver), {worst_oracle:.2e} (independent)"),
    )
}

fn scale_recovery() -> Outcome {
    let start = Instant::now();
    let factors = experiments::log_factors(1e-3, 1e3, 7).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst_scale = 0.0f64;
    let mut worst_pose = 0.0f64;
    for _ in 0..200 {
        let n = rng.gen_range(3..=200);
        let s = rng.gen_range(0.1..10.0);
        let (_, pairs) = instance(&mut rng, n, s);
        let base = solve_similarity(&pairs).unwrap();
        for f in &factors {
            let scaled: Vec<WeightedPointPair> = pairs
                .iter()
                .map(|p| WeightedPointPair::new(Point2::new(p.p.x / f, p.p.y / f), p.q, p.w))
                .collect();
            let t = solve_similarity(&scaled).unwrap();
            worst_scale = worst_scale.max((t.s / (base.s * f) - 1.0).abs());
            worst_pose = worst_pose
                .max(wrap_angle(t.theta - base.theta).abs())
                .max(t.t.distance(base.t));
        }
    }
    let scene = SceneConfig {
        feature_noise: 0.1,
        depth_noise: 0.05,
        clutter: 0.1,
        ..SceneConfig::default()
    };
    let seeds: Vec<u64> = (0..100).collect();
    let scenes = experiments::scenes(&scene, &seeds).unwrap();
    let sweep = experiments::scale_sweep(&scenes, &factors, &PipelineConfig::default()).unwrap();
    let elapsed = start.elapsed();
    outcome(
        worst_scale < 1e-9 && worst_pose < 1e-9 && sweep.max_translation_deviation < 0.01 && elapsed < Duration::from_secs(30),
        format!(
            "solver: scale {worst_scale:.2e}, pose {worst_pose:.2e}; pipeline over 100 noisy scenes: translation {:.2e} m, scale {:.2e}; {:.2} s",
            sweep.max_translation_deviation,
            sweep.max_scale_error,
            elapsed.as_secs_f64()
        ),
    )
}

fn naive_dual_softmax(m: &Matrix) -> Vec<f64> {
    let (r, c) = (m.rows, m.cols);
    let e: Vec<f64> = m.data.iter().map(|v| v.exp()).collect();
    let row: Vec<f64> = (0..r).map(|i| (0..c).map(|j| e[i * c + j]).sum()).collect();
    let col: Vec<f64> = (0..c).map(|j| (0..r).map(|i| e[i * c + j]).sum()).collect();
    (0..r * c).map(|k| (e[k] / row[k / c]) * (e[k] / col[k % c])).collect()
}

fn dual_softmax_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut worst, mut worst_shift, mut in_range) = (0.0f64, 0.0f64, true);
    for _ in 0..100 {
        let (r, c) = (rng.gen_range(1..=49), rng.gen_range(1..=49));
        let scores = Matrix::from_vec(r, c, (0..r * c).map(|_| rng.gen_range(-10.0..10.0)).collect()).unwrap();
        let z = rng.gen_range(-5.0..5.0);
        let m = augment_dustbin(&scores, z);
        let p = dual_softmax(&m);
        for (a, b) in p.data.iter().zip(naive_dual_softmax(&m)) {
            worst = worst.max((a - b).abs());
        }
        in_range &= p.data.iter().all(|v| (0.0..=1.0).contains(v));
        let shift = rng.gen_range(-100.0..100.0);
        let shifted = Matrix::from_vec(m.rows, m.cols, m.data.iter().map(|v| v + shift).collect()).unwrap();
        for (a, b) in p.data.iter().zip(&dual_softmax(&shifted).data) {
            worst_shift = worst_shift.max((a - b).abs());
        }
    }
    outcome(
        worst < 1e-9 && worst_shift < 1e-12 && in_range,
        format!("oracle gap {worst:.2e}, shift gap {worst_shift:.2e}, probabilities in [0, 1]: {in_range}"),
    )
}

fn gradient_certification() -> Outcome {
    let start = Instant::now();
    let reports = check_seeds(0..50, 1e-5, 1e-4).unwrap();
    let elapsed = start.elapsed();
    let failed = reports.iter().filter(|(_, r)| !r.passed).count();
    let worst = reports.iter().map(|(_, r)| r.max_rel).fold(0.0, f64::max);
    let entries: usize = reports.iter().map(|(_, r)| r.analytic.len()).sum();
    outcome(
        failed == 0 && elapsed < Duration::from_secs(120),
        format!(
            "{} leaf checks ({entries} entries), {failed} failed, worst relative error {worst:.2e}, {:.2} s",
            reports.len(),
            elapsed.as_secs_f64()
        ),
    )
}

fn closure() -> Outcome {
    let seeds: Vec<u64> = (0..100).collect();
    let scenes = experiments::scenes(&SceneConfig::default(), &seeds).unwrap();
    let pipeline = PipelineConfig::default();
    let (mut worst_t, mut worst_theta, mut worst_s, mut failures) = (0.0f64, 0.0f64, 0.0f64, 0);
    for scene in &scenes {
        match experiments::evaluate_scene(scene, &pipeline) {
            Ok((est, _)) => {
                let truth = scene.expected_transform(1.0);
                worst_t = worst_t.max(est.transform.t.distance(truth.t));
                worst_theta = worst_theta.max(wrap_angle(est.transform.theta - truth.theta).abs());
                worst_s = worst_s.max((est.transform.s / truth.s - 1.0).abs());
            }
            Err(_) => failures += 1,
        }
    }
    outcome(
        failures == 0 && worst_t < 1e-6 && worst_theta < 1e-6 && worst_s < 1e-6,
        format!("{failures} failures, worst translation {worst_t:.2e} m, rotation {worst_theta:.2e} rad, scale {worst_s:.2e}"),
    )
}

fn ransac_robustness() -> Outcome {
    let seeds: Vec<u64> = (0..100).collect();
    let scenes = experiments::scenes(&SceneConfig::default(), &seeds).unwrap();
    let cfg = RansacConfig::default();
    let dirty = experiments::ransac_trials(&scenes, 0.3, 0.05, &cfg).unwrap();
    let better = dirty.iter().filter(|t| t.ransac_error < t.direct_error).count();
    let clean = experiments::ransac_trials(&scenes, 0.0, 0.05, &cfg).unwrap();
    let gap = clean.iter().map(|t| t.difference).fold(0.0, f64::max);
    outcome(
        better >= 95 && gap < 1e-9,
        format!("RANSAC better on {better}/100 with 30% outliers; clean-data gap to direct solve {gap:.2e}"),
    )
}

fn inlier_correlation() -> Outcome {
    let seeds: Vec<u64> = (0..100).collect();
    let noise: Vec<f64> = (0..100).map(|k| 0.5 * k as f64 / 99.0).collect();
    let scene = SceneConfig {
        depth_noise: 0.05,
        ..SceneConfig::default()
    };
    let c = experiments::inlier_correlation(&scene, &seeds, &noise, &PipelineConfig::default()).unwrap();
    outcome(c.rho <= -0.5, format!("Spearman rho {:.3} over 100 trials", c.rho))
}

fn median_loc(r: &experiments::VariantResult) -> f64 {
    let e: Vec<f64> = r.errors.iter().map(|e| e.loc_error).collect();
    median(&e).unwrap_or(f64::INFINITY)
}

fn ablation_direction() -> Outcome {
    let seeds: Vec<u64> = (0..100).collect();
    let th = Thresholds::default();
    let pipeline = PipelineConfig::default();
    let scene = experiments::ablation_scene();
    let no_scale = experiments::run_variants(&experiments::ablation_variants(AblationMode::NoScale, &scene, &pipeline), &seeds, &th).unwrap();
    let top = experiments::run_variants(&experiments::ablation_variants(AblationMode::TopPoints, &scene, &pipeline), &seeds, &th).unwrap();
    let (sim, orth) = (median_loc(&no_scale[0]), median_loc(&no_scale[1]));
    let (all, topmost) = (median_loc(&top[0]), median_loc(&top[1]));
    let failures: usize = no_scale.iter().chain(&top).map(|r| r.failures).sum();
    outcome(
        failures == 0 && orth > sim && topmost >= 0.95 * all,
        format!("median error: similarity {sim:.3} m < orthogonal {orth:.3} m; top points {topmost:.3} m vs all points {all:.3} m"),
    )
}

fn toy_training() -> Outcome {
    let start = Instant::now();
    let data = reference_dataset(REFERENCE_SCENES).unwrap();
    let r = train(&data, &TrainConfig::reference()).unwrap();
    let elapsed = start.elapsed();
    let smoothed = smooth(&r.loss_curve, 20);
    let ratio = smoothed.last().unwrap() / r.loss_curve[0];
    let before = r.summary_before.as_ref().map_or(f64::INFINITY, |s| s.localization.median);
    let after = r.summary_after.as_ref().map_or(f64::INFINITY, |s| s.localization.median);
    let counts = r.held_out_before.len() == r.held_out_after.len();
    outcome(
        ratio < 0.5 && after <= before && counts && elapsed < Duration::from_secs(300),
        format!(
            "smoothed loss {:.3} -> {:.3} (ratio {ratio:.3}); held-out median {before:.3} m -> {after:.3} m; {:.1} s",
            r.loss_curve[0],
            smoothed.last().unwrap(),
            elapsed.as_secs_f64()
        ),
    )
}

fn pseudo_scale() -> Outcome {
    let mut worst = 0.0f64;
    let mut flags_equal = true;
    for seed in 0..20 {
        let scene = generate(&SceneConfig {
            depth_kind: DepthKind::Relative,
            seed,
            ..SceneConfig::default()
        })
        .unwrap();
        let layout = scene.aerial_layout();
        let pairs = scene.true_pairs(1.0);
        let ground: Vec<Point2> = pairs.iter().map(|p| p.p).collect();
        let aerial = layout.centers();
        let gt = scene.expected_transform(1.0);
        let pseudo = pseudo_scale_targets(&pairs, &ground, &aerial, &gt, &layout).unwrap();
        let ta = gt_aerial_targets(&ground, &gt, scene.s_gt, &layout);
        let tg = gt_ground_targets(&aerial, &gt, scene.s_gt);
        flags_equal &= pseudo.aerial.valid == ta.valid && pseudo.ground.valid == tg.valid;
        for (a, b) in pseudo.aerial.points.iter().zip(&ta.points).chain(pseudo.ground.points.iter().zip(&tg.points)) {
            worst = worst.max(a.distance(*b) / b.norm().max(1.0));
        }
    }
    outcome(
        worst < 1e-9 && flags_equal,
        format!("20 hidden-scale scenes: worst relative target gap {worst:.2e}, validity flags equal: {flags_equal}"),
    )
}

fn random_grid(rng: &mut ChaCha8Rng, k: usize) -> FeatureGrid {
    let (r, c, d) = (rng.gen_range(1..12), rng.gen_range(1..12), rng.gen_range(1..9));
    let data = (0..r * c * d).map(|_| rng.gen_range(-5.0..5.0)).collect();
    let meta = if k.is_multiple_of(2) {
        GridMeta::Aerial(AerialMeta::new(rng.gen_range(0.1..3.0)))
    } else {
        let mut rays = RayModel::equirectangular(r, c);
        let cell = rng.gen_range(0..r * c);
        rays.set_direction(cell, xvloc::Point3::new(rng.gen_range(0.1..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
            .unwrap();
        GridMeta::Ground(rays)
    };
    FeatureGrid::new(r, c, d, data, meta).unwrap()
}

fn io_round_trip() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut identical = 0;
    for k in 0..20 {
        let grid = random_grid(&mut rng, k);
        let (a, b) = (dir.path().join(format!("a{k}.fgrd")), dir.path().join(format!("b{k}.fgrd")));
        io::write_feature_grid(&grid, &a).unwrap();
        io::write_feature_grid(&io::read_feature_grid(&a).unwrap(), &b).unwrap();
        let depth = DepthMap::new(
            grid.rows,
            grid.cols,
            DepthKind::Metric,
            (0..grid.cells()).map(|_| if rng.gen_bool(0.2) { f64::INFINITY } else { rng.gen_range(0.5..80.0) }).collect(),
        )
        .unwrap();
        let (da, db) = (dir.path().join(format!("a{k}.dpth")), dir.path().join(format!("b{k}.dpth")));
        io::write_depth_map(&depth, &da).unwrap();
        io::write_depth_map(&io::read_depth_map(&da).unwrap(), &db).unwrap();
        let same = |x: &std::path::Path, y: &std::path::Path| std::fs::read(x).unwrap() == std::fs::read(y).unwrap();
        if same(&a, &b) && same(&io::sidecar_path(&a), &io::sidecar_path(&b)) && same(&da, &db) {
            identical += 1;
        }
    }

    let grid = random_grid(&mut rng, 0);
    let bytes = io::encode_feature_grid(&grid).unwrap();
    let side = GridSidecar::of(&grid);
    let mut magic = bytes.clone();
    magic[..4].copy_from_slice(b"FGRX");
    let mut version = bytes.clone();
    version[4..8].copy_from_slice(&7u32.to_le_bytes());
    let bad_magic = matches!(io::decode_feature_grid(&magic, side.clone()), Err(Error::BadMagic { .. }));
    let bad_version = matches!(io::decode_feature_grid(&version, side.clone()), Err(Error::VersionUnsupported(7)));
    let truncated = matches!(io::decode_feature_grid(&bytes[..bytes.len() - 3], side), Err(Error::TruncatedPayload { .. }));
    let lone = dir.path().join("lone.fgrd");
    std::fs::write(&lone, &bytes).unwrap();
    let missing = matches!(io::read_feature_grid(&lone), Err(Error::MetadataMissing(_)));
    let depth_magic = matches!(io::decode_depth_map(&bytes), Err(Error::BadMagic { .. }));
    let errors_ok = bad_magic && bad_version && truncated && missing && depth_magic;
    outcome(
        identical == 20 && errors_ok,
        format!(
            "{identical}/20 byte-identical re-emissions; errors: magic {bad_magic}, version {bad_version}, truncated {truncated}, sidecar {missing}, depth magic {depth_magic}"
        ),
    )
}

type Criterion = (&'static str, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 12] = [
        ("procrustes exactness", procrustes_exactness),
        ("trace identity", trace_identity),
        ("scale recovery", scale_recovery),
        ("dual softmax", dual_softmax_oracle),
        ("gradient certification", gradient_certification),
        ("end-to-end closure", closure),
        ("RANSAC robustness", ransac_robustness),
        ("inlier-error correlation", inlier_correlation),
        ("ablation directionality", ablation_direction),
        ("toy training", toy_training),
        ("pseudo-scale targets", pseudo_scale),
        ("file round trips", io_round_trip),
    ];
    let mut failed = 0;
    for (k, (name, run)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        });
        if !result.passed {
            failed += 1;
        }
        println!(
            "{} {:>2} {name}: {} [{:.2} s]",
            if result.passed { "PASS" } else { "FAIL" },
            k + 1,
            result.detail,
            start.elapsed().as_secs_f64()
        );
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
