//! Shared fixtures for the benchmarks.

use accnn_core::config::RunConfig;
use accnn_core::head::Detection;
use accnn_core::params::Params;
use accnn_core::synth::{generate_image, Sample};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Default configuration, one generated image and freshly initialized parameters.
pub fn model_fixture(seed: u64) -> (RunConfig, Sample, Params<f32>) {
    let cfg = RunConfig::default();
    let sample = generate_image(seed, &cfg.data.scene).expect("default scene is feasible");
    let params = cfg.model.init_params(&mut ChaCha8Rng::seed_from_u64(seed));
    (cfg, sample, params)
}

/// `n` random detections of one class in a 128×128 image.
pub fn random_detections(n: usize, seed: u64) -> Vec<Detection> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let x0 = rng.random_range(0.0..100.0);
            let y0 = rng.random_range(0.0..100.0);
            let w = rng.random_range(8.0..28.0);
            let h = rng.random_range(8.0..28.0);
            Detection {
                image_id: i % 100,
                class_id: 1,
                score: rng.random(),
                bbox: [x0, y0, x0 + w, y0 + h],
            }
        })
        .collect()
}
