//! Seeded random streams.
//!
//! Every stochastic routine takes an explicit `Rng`; nothing reads global
//! state. Independent streams are derived from a `(seed, stream)` pair, so a
//! record or trajectory can be regenerated without replaying its neighbours.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// The concrete generator used throughout the crate.
pub type Rng = ChaCha8Rng;

/// Generator for `seed` on the independent stream `stream`.
pub fn stream(seed: u64, stream: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Vector of `n` independent standard normal draws.
pub fn standard_normal(rng: &mut impl rand::Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

/// One Bernoulli draw that is `true` with probability `prob`.
pub fn bernoulli(rng: &mut impl rand::Rng, prob: f64) -> bool {
    rng.gen::<f64>() < prob
}
