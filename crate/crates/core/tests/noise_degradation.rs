//! Median localization error over 100 seeds does not improve as feature
//! noise grows. Failed estimates count as infinitely wrong, and medians
//! within `TIE` of each other are ties (both exact up to rounding).

use xvloc::estimator::PipelineConfig;
use xvloc::experiments::evaluate_scene;
use xvloc::metrics::median;
use xvloc::par;
use xvloc::simulator::{generate, SceneConfig};

const TIE: f64 = 1e-9;

#[test]
fn median_error_is_monotone_in_feature_noise() {
    let pipeline = PipelineConfig::default();
    let seeds: Vec<u64> = (0..100).collect();
    let medians: Vec<f64> = [0.0, 0.1, 0.3, 0.5]
        .iter()
        .map(|&sigma| {
            let base = SceneConfig {
                feature_noise: sigma,
                ..SceneConfig::default()
            };
            let errors = par::map_slice(&seeds, |&seed| {
                let scene = generate(&base.with_seed(seed)).unwrap();
                evaluate_scene(&scene, &pipeline).map_or(f64::INFINITY, |(_, e)| e.loc_error)
            });
            median(&errors).unwrap()
        })
        .collect();
    println!("median localization error by noise: {medians:?}");
    assert!(medians.windows(2).all(|w| w[0] <= w[1] + TIE), "{medians:?}");
}
