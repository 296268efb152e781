//! Deterministic RNG derivation.
//!
//! Every stage derives its own ChaCha8 stream from (master seed, stage tag),
//! so stages can be rerun or reordered without perturbing each other.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in s.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// RNG for one named stage of a seeded run.
pub fn seeded(seed: u64, tag: &str) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(fnv1a(tag));
    rng
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

/// Stateless uniform draw in [0, 1) for (seed, index). Used for per-sample
/// missingness thresholds: because the draw does not depend on the rate, the
/// masked sets are nested as the rate grows.
pub fn unit_uniform(seed: u64, index: u64) -> f64 {
    let bits = splitmix64(seed ^ splitmix64(index.wrapping_add(0x243f6a8885a308d3)));
    (bits >> 11) as f64 / (1u64 << 53) as f64
}
