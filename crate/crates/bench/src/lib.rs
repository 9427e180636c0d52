//! Shared fixtures for the criterion benches.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use lgmm_core::{FeatureMatrix, Mat};

pub fn features(seed: u64, rows: usize, dim: usize) -> FeatureMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..rows * dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    FeatureMatrix::new(Mat::new(rows, dim, data)).expect("finite features")
}

pub fn feature_batch(seed: u64, count: usize, rows: usize, dim: usize) -> Vec<FeatureMatrix> {
    (0..count).map(|i| features(seed.wrapping_add(i as u64), rows, dim)).collect()
}
