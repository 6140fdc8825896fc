//! Subcommand implementations. Every results file echoes the configuration
//! that produced it and holds no timestamps, so reruns are byte-identical.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};

use crate::args::{Factors, SeedRange};
use xvloc::estimator::{estimate_pose, overlay_layout, PipelineConfig, RansacConfig};
use xvloc::experiments::{ablation_scene, ablation_variants, log_factors, run_variants, scale_sweep, scenes, AblationMode, VariantResult};
use xvloc::gradcheck::check_seeds;
use xvloc::io::{read_depth_map, read_feature_grid, read_json, write_atomic, write_depth_map, write_feature_grid, write_json, ResultsFile, SampleRecord};
use xvloc::lifting::{CameraModel, LiftConfig};
use xvloc::metrics::{pose_errors, summarize, Thresholds};
use xvloc::simulator::{generate, SceneConfig};
use xvloc::trainer::{reference_scene_config, smooth, train as run_training, TrainConfig, REFERENCE_SCENES};
use xvloc::{par, SimilarityTransform2D};

/// Experiment config: `[scene]`, `[pipeline]` and `[thresholds]` tables, all
/// optional.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ExperimentFile {
    scene: Option<SceneConfig>,
    pipeline: Option<PipelineConfig>,
    thresholds: Option<Thresholds>,
}

/// Training config: dataset size, scene family and trainer settings.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainFile {
    #[serde(default = "default_scenes")]
    scenes: usize,
    scene: Option<SceneConfig>,
    #[serde(default)]
    train: TrainConfig,
}

fn default_scenes() -> usize {
    REFERENCE_SCENES
}

fn read_toml<T: for<'de> Deserialize<'de>>(path: &Path) -> anyhow::Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn experiment(config: Option<&Path>) -> anyhow::Result<ExperimentFile> {
    config.map(read_toml).transpose().map(Option::unwrap_or_default)
}

fn save(results: &ResultsFile, out: Option<&Path>) -> anyhow::Result<()> {
    if let Some(out) = out {
        write_json(results, out).with_context(|| format!("writing {}", out.display()))?;
    }
    Ok(())
}

/// Ground truth of a simulated scene.
#[derive(Debug, Serialize, Deserialize)]
pub struct Truth {
    pub seed: u64,
    /// Camera frame to aerial frame at unit scale.
    pub pose: SimilarityTransform2D,
    /// Metric depth over stored depth.
    pub s_gt: f64,
    pub config: SceneConfig,
}

impl Truth {
    fn expected(&self, initial_scale: f64) -> SimilarityTransform2D {
        SimilarityTransform2D {
            s: self.s_gt / initial_scale,
            ..self.pose
        }
    }
}

pub fn simulate(config: Option<&Path>, seeds: &SeedRange, out: &Path) -> anyhow::Result<()> {
    let base = experiment(config)?.scene.unwrap_or_default();
    base.validate()?;
    let written = par::map_slice(&seeds.seeds(), |&seed| -> anyhow::Result<PathBuf> {
        let scene = generate(&base.with_seed(seed)).with_context(|| format!("seed {seed}"))?;
        let dir = out.join(format!("seed-{seed}"));
        fs::create_dir_all(&dir)?;
        write_feature_grid(&scene.aerial, &dir.join("aerial.fgrd"))?;
        write_feature_grid(&scene.ground, &dir.join("ground.fgrd"))?;
        write_depth_map(&scene.depth, &dir.join("depth.dpth"))?;
        let truth = Truth {
            seed,
            pose: scene.pose,
            s_gt: scene.s_gt,
            config: scene.config.clone(),
        };
        write_json(&truth, &dir.join("truth.json"))?;
        Ok(dir)
    });
    for dir in written {
        println!("{}", dir?.display());
    }
    Ok(())
}

/// Inputs of `solve`, echoed into the results.
#[derive(Debug, Serialize)]
pub struct SolveArgs {
    pub aerial: PathBuf,
    pub ground: PathBuf,
    pub depth: PathBuf,
    pub truth: Option<PathBuf>,
    pub ransac: bool,
    pub initial_scale: f64,
    pub max_depth: Option<f64>,
    pub n: usize,
    pub tau: f64,
}

pub fn solve(a: &SolveArgs, out: &Path) -> anyhow::Result<()> {
    let aerial = read_feature_grid(&a.aerial).with_context(|| format!("reading {}", a.aerial.display()))?;
    let ground = read_feature_grid(&a.ground).with_context(|| format!("reading {}", a.ground.display()))?;
    let depth = read_depth_map(&a.depth).with_context(|| format!("reading {}", a.depth.display()))?;
    let Some(rays) = ground.rays().cloned() else {
        bail!("{} is not a ground grid", a.ground.display());
    };
    let max_depth = a.max_depth.unwrap_or(match rays.model {
        CameraModel::Equirectangular => LiftConfig::PANORAMA_MAX_DEPTH,
        CameraModel::Pinhole { .. } => LiftConfig::FORWARD_MAX_DEPTH,
    });
    let pipeline = PipelineConfig {
        tau: a.tau,
        n: a.n,
        lift: LiftConfig {
            max_depth,
            initial_scale: a.initial_scale,
            ..LiftConfig::default()
        },
        ransac: a.ransac.then(RansacConfig::default),
        ..PipelineConfig::default()
    };
    let est = estimate_pose(&aerial, &ground, &depth, &rays, &pipeline)?;
    let truth = a
        .truth
        .as_deref()
        .map(|p| read_json::<Truth>(p).with_context(|| format!("reading {}", p.display())))
        .transpose()?;
    let expected = truth.as_ref().map(|t| t.expected(a.initial_scale));
    let errors = truth.as_ref().map(|t| pose_errors(&est.transform, &t.expected(a.initial_scale), t.pose.theta));

    let mut results = ResultsFile::new("solve", &serde_json::json!({ "inputs": a, "pipeline": pipeline }))?;
    results.samples.push(SampleRecord {
        label: a.ground.display().to_string(),
        transform: est.transform,
        correspondences: est.correspondences.len(),
        inlier_count: est.inliers.as_ref().map(|_| est.inlier_count),
        truth: expected,
        errors,
        overlay: overlay_layout(&est.ground_points, &est.transform),
    });
    save(&results, Some(out))?;
    let t = est.transform;
    println!("s {:.9} theta {:.9} t ({:.6}, {:.6})", t.s, t.theta, t.t.x, t.t.y);
    if let Some(e) = errors {
        println!("localization error {:.3e} m, orientation error {:.3e} deg", e.loc_error, e.ori_error);
    }
    Ok(())
}

pub fn sweep_scale(factors: &Factors, steps: usize, seeds: &SeedRange, config: Option<&Path>, out: Option<&Path>) -> anyhow::Result<()> {
    let file = experiment(config)?;
    let scene = file.scene.unwrap_or_default();
    let pipeline = file.pipeline.unwrap_or_default();
    let factors = match factors {
        Factors::Range { lo, hi } => log_factors(*lo, *hi, steps)?,
        Factors::List(list) => list.clone(),
    };
    let seeds = seeds.seeds();
    let report = scale_sweep(&scenes(&scene, &seeds)?, &factors, &pipeline)?;
    println!(
        "{} scenes x {} factors: max translation deviation {:.3e} m, max rotation deviation {:.3e} rad, max relative scale error {:.3e}",
        seeds.len(),
        factors.len(),
        report.max_translation_deviation,
        report.max_theta_deviation,
        report.max_scale_error
    );
    let echo = serde_json::json!({ "factors": factors, "seeds": seeds, "scene": scene, "pipeline": pipeline });
    let mut results = ResultsFile::new("sweep-scale", &echo)?;
    results.report = serde_json::to_value(&report)?;
    save(&results, out)
}

pub fn ablate(mode: AblationMode, seeds: &SeedRange, config: Option<&Path>, out: Option<&Path>) -> anyhow::Result<()> {
    let file = experiment(config)?;
    let scene = file.scene.unwrap_or_else(ablation_scene);
    let pipeline = file.pipeline.unwrap_or_default();
    let thresholds = file.thresholds.unwrap_or_default();
    let seeds = seeds.seeds();
    let variants = ablation_variants(mode, &scene, &pipeline);
    let rows: Vec<VariantResult> = run_variants(&variants, &seeds, &thresholds)?;
    println!("{:<14} {:>8} {:>14} {:>14}", "variant", "failures", "median m", "median deg");
    for r in &rows {
        match &r.summary {
            Some(s) => println!("{:<14} {:>8} {:>14.4} {:>14.4}", r.name, r.failures, s.localization.median, s.orientation.median),
            None => println!("{:<14} {:>8} {:>14} {:>14}", r.name, r.failures, "-", "-"),
        }
    }
    let echo = serde_json::json!({ "mode": mode, "seeds": seeds, "scene": scene, "pipeline": pipeline, "thresholds": thresholds });
    let mut results = ResultsFile::new("ablate", &echo)?;
    results.report = serde_json::to_value(&rows)?;
    save(&results, out)
}

pub fn train(config: &Path, out: Option<&Path>) -> anyhow::Result<()> {
    let file: TrainFile = read_toml(config)?;
    let scene = file.scene.unwrap_or_else(reference_scene_config);
    let seeds: Vec<u64> = (0..file.scenes as u64).collect();
    let dataset = scenes(&scene, &seeds)?;
    let r = run_training(&dataset, &file.train)?;
    let smoothed = smooth(&r.loss_curve, 20);
    let ratio = smoothed.last().copied().unwrap_or(f64::NAN) / r.loss_curve.first().copied().unwrap_or(f64::NAN);
    println!("loss {:.4} -> {:.4} (smoothed ratio {ratio:.3})", r.loss_curve[0], smoothed.last().unwrap_or(&f64::NAN));
    if let (Some(b), Some(a)) = (&r.summary_before, &r.summary_after) {
        println!("held-out median localization {:.3} m -> {:.3} m", b.localization.median, a.localization.median);
    }
    let echo = serde_json::json!({ "scenes": file.scenes, "scene": scene, "train": file.train });
    let mut results = ResultsFile::new("train", &echo)?;
    results.samples = r
        .held_out_after
        .iter()
        .enumerate()
        .map(|(k, e)| SampleRecord {
            label: format!("held-out-{k}"),
            transform: SimilarityTransform2D::default(),
            correspondences: 0,
            inlier_count: None,
            truth: None,
            errors: Some(*e),
            overlay: Vec::new(),
        })
        .collect();
    results.summary = r.summary_after.clone();
    results.loss_curve = r.loss_curve.clone();
    results.report = serde_json::json!({
        "smoothed_ratio": ratio,
        "held_out_before": r.summary_before,
        "held_out_after": r.summary_after,
        "weights": r.weights,
    });
    save(&results, out)
}

pub fn gradcheck(seeds: &SeedRange, tol: f64, eps: f64, out: Option<&Path>) -> anyhow::Result<()> {
    let seeds = seeds.seeds();
    let reports = check_seeds(seeds.iter().copied(), eps, tol)?;
    let failed: Vec<_> = reports.iter().filter(|(_, r)| !r.passed).collect();
    let worst = reports.iter().map(|(_, r)| r.max_rel).fold(0.0, f64::max);
    println!("{} checks, {} failed, worst relative error {worst:.3e}", reports.len(), failed.len());
    for (seed, r) in &failed {
        println!("seed {seed} {:?}: relative error {:.3e} {}", r.leaf, r.max_rel, r.error.as_deref().unwrap_or(""));
    }
    let mut results = ResultsFile::new("gradcheck", &serde_json::json!({ "seeds": seeds, "tol": tol, "eps": eps }))?;
    results.report = serde_json::json!(reports
        .iter()
        .map(|(seed, r)| serde_json::json!({ "seed": seed, "report": r }))
        .collect::<Vec<_>>());
    save(&results, out)?;
    if !failed.is_empty() {
        bail!("{} gradient checks failed", failed.len());
    }
    Ok(())
}

pub fn metrics(results: &Path, meters: Vec<f64>, degrees: Vec<f64>, out: Option<&Path>) -> anyhow::Result<()> {
    let file: ResultsFile = read_json(results).with_context(|| format!("reading {}", results.display()))?;
    let errors = file.errors();
    if errors.is_empty() {
        bail!("{} holds no pose errors", results.display());
    }
    let summary = summarize(&errors, &Thresholds { meters, degrees })?;
    let text = serde_json::to_string_pretty(&summary)? + "\n";
    print!("{text}");
    if let Some(out) = out {
        write_atomic(out, text.as_bytes())?;
    }
    Ok(())
}

pub fn overlay(results: &Path, out: &Path) -> anyhow::Result<()> {
    let file: ResultsFile = read_json(results).with_context(|| format!("reading {}", results.display()))?;
    let mut csv = String::from("label,x,y\n");
    for s in &file.samples {
        for p in &s.overlay {
            writeln!(csv, "{},{},{}", s.label.replace(',', "_"), p.x, p.y)?;
        }
    }
    write_atomic(out, csv.as_bytes())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config(name: &str) -> PathBuf {
        Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
    }

    #[test]
    fn reference_train_config_matches_library() {
        let file: TrainFile = read_toml(&config("reference_train.toml")).unwrap();
        assert_eq!(file.scenes, REFERENCE_SCENES);
        assert_eq!(file.scene.unwrap(), reference_scene_config());
        assert_eq!(file.train, TrainConfig::reference());
    }

    #[test]
    fn noisy_scene_config_parses() {
        let file: ExperimentFile = read_toml(&config("noisy_scenes.toml")).unwrap();
        assert_eq!(file.scene.unwrap().depth_noise, 0.05);
        assert_eq!(file.pipeline.unwrap(), PipelineConfig::default());
    }

    #[test]
    fn unknown_config_keys_are_rejected() {
        assert!(toml::from_str::<ExperimentFile>("[scnee]\nseed = 1\n").is_err());
    }
}
