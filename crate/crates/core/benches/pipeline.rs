//! Parallel against single-threaded execution of the hot paths: the dual
//! softmax, one full pose estimate and a batch of scenes. The single-thread
//! numbers come from a one-worker rayon pool, which runs the same code the
//! sequential build does.

use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use xvloc::estimator::{estimate_pose, PipelineConfig};
use xvloc::experiments::{evaluate_scene, scenes};
use xvloc::matching::{dual_softmax, Matrix};
use xvloc::simulator::SceneConfig;

fn pools() -> Vec<(&'static str, rayon::ThreadPool)> {
    let threads = rayon::current_num_threads();
    vec![
        ("sequential", rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap()),
        ("parallel", rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap()),
    ]
}

fn bench(c: &mut Criterion) {
    let scene_cfg = SceneConfig {
        feature_noise: 0.1,
        clutter: 0.1,
        ..SceneConfig::default()
    };
    let batch = scenes(&scene_cfg, &(0..16).collect::<Vec<_>>()).unwrap();
    let pipeline = PipelineConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let scores = Matrix::from_vec(1682, 1024, (0..1682 * 1024).map(|_| rng.gen_range(-10.0..10.0)).collect()).unwrap();

    let mut g = c.benchmark_group("pipeline");
    g.sample_size(10);
    for (name, pool) in pools() {
        g.bench_function(BenchmarkId::new("dual_softmax", name), |b| pool.install(|| b.iter(|| dual_softmax(black_box(&scores)))));
        let s = &batch[0];
        g.bench_function(BenchmarkId::new("estimate_pose", name), |b| {
            pool.install(|| b.iter(|| estimate_pose(&s.aerial, &s.ground, &s.depth, &s.rays, black_box(&pipeline)).unwrap()))
        });
        g.bench_function(BenchmarkId::new("scene_batch", name), |b| {
            pool.install(|| b.iter(|| xvloc::par::map_slice(&batch, |s| evaluate_scene(s, black_box(&pipeline)).map(|(_, e)| e.loc_error))))
        });
    }
    g.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
