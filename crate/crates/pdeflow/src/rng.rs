//! Reproducible randomness. Every stochastic operation takes an explicit
//! generator; independent streams are derived from a root seed so batches
//! can be produced in parallel without sharing state.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Root generator for a 64-bit seed.
pub fn seed_rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent stream derived from (seed, stream). ChaCha exposes 2^64
/// non-overlapping streams per seed, so per-sample generators never collide.
pub fn stream_rng(seed: u64, stream: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// N(0,1) draws into a fresh buffer.
pub fn standard_normal(rng: &mut Rng, n: usize) -> Vec<f64> {
    use rand_distr::{Distribution, StandardNormal};
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}
