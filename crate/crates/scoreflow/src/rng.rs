//! Seeded, splittable randomness.
//!
//! Every stochastic component draws from its own stream, derived from the
//! experiment seed plus a label path (e.g. `[STREAM_ROLLOUT, iter, env]`).
//! Streams with different labels are statistically independent, so rollout
//! noise, environment resets and network init never share draws and results
//! stay bit-reproducible when one consumer changes how much it draws.

use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};
use rand_xoshiro::Xoshiro256PlusPlus;

pub type StreamRng = Xoshiro256PlusPlus;

pub const STREAM_NET_INIT: u64 = 1;
pub const STREAM_PRETRAIN: u64 = 2;
pub const STREAM_ROLLOUT: u64 = 3;
pub const STREAM_ENV_RESET: u64 = 4;
pub const STREAM_PPO_SHUFFLE: u64 = 5;
pub const STREAM_EVAL: u64 = 6;
pub const STREAM_DEMO: u64 = 7;

/// SplitMix64 finalizer; full-avalanche 64-bit mix.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Hashes a seed and a label path into a derived 64-bit seed.
pub fn derive_seed(seed: u64, labels: &[u64]) -> u64 {
    let mut acc = mix(seed);
    for &label in labels {
        acc = mix(acc ^ label);
    }
    acc
}

/// Independent generator for the stream named by `labels` under `seed`.
pub fn stream_rng(seed: u64, labels: &[u64]) -> StreamRng {
    StreamRng::seed_from_u64(derive_seed(seed, labels))
}

pub fn standard_normal(rng: &mut StreamRng) -> f64 {
    StandardNormal.sample(rng)
}

pub fn standard_normal_vec(rng: &mut StreamRng, n: usize) -> Vec<f64> {
    (0..n).map(|_| standard_normal(rng)).collect()
}
