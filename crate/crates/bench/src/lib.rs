//! Shared fixtures for the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sparse_pose_core::synth::synth_dataset;
use sparse_pose_core::{Model, ModelConfig, SynthSample, Tensor};

/// Untrained toy model plus `n` rendered samples.
pub fn toy_fixture(n: usize) -> (Model, Vec<SynthSample>) {
    let cfg = ModelConfig::toy();
    let samples = synth_dataset(1, n, &cfg).expect("toy config renders");
    (Model::new(cfg, 0).expect("toy config is valid"), samples)
}

pub fn random_matrix(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::new(vec![rows, cols], data).expect("shape matches data")
}

pub fn random_scores(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.gen()).collect()
}
