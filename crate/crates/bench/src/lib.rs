//! Seeded inputs shared by the benchmarks.

use aqade_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// `n × d` standard normal matrix.
pub fn gaussian(seed: u64, n: usize, d: usize) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..n * d).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
    Tensor::new(vec![n, d], data).expect("valid dims")
}

/// `n × 32 × 32 × channels` images with pixels uniform in `[0, 1)`.
pub fn images(seed: u64, n: usize, channels: usize) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len = n * 32 * 32 * channels;
    Tensor::new(vec![n, 32, 32, channels], (0..len).map(|_| rng.random()).collect())
        .expect("valid dims")
}
