//! Deterministic seed derivation.
//!
//! All randomness in the pipeline funnels through a single user-facing seed.
//! Sub-seeds for independent purposes (preprocing samplers, init, shuffling,
//! dropout, negative sampling) are derived with splitmix64 over a label hash,
//! so adding a new consumer never perturbs the streams of existing ones.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// splitmix64 step; good avalanche, cheap, stable across platforms.
pub fn splitmix64(state: u64) -> u64 {
    let mut z = state.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// FNV-1a over a label, used to fold strings into seed material.
pub fn hash_label(label: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in label.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Derive a sub-seed from a base seed, a purpose label, and extra indices.
pub fn derive_seed(base: u64, label: &str, indices: &[u64]) -> u64 {
    let mut s = splitmix64(base ^ hash_label(label));
    for &ix in indices {
        s = splitmix64(s ^ ix);
    }
    s
}

/// The RNG used everywhere; ChaCha keeps streams portable across platforms.
pub fn rng_from(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Standard normal via Box-Muller; avoids depending on distribution crates
/// whose internals may change between versions.
pub fn normal(rng: &mut ChaCha8Rng, mean: f64, std: f64) -> f64 {
    use rand::Rng;
    let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let v: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    mean + std * (-2.0 * u.ln()).sqrt() * v.cos()
}

/// Fill a buffer with N(mean, std^2) draws.
pub fn normal_vec(rng: &mut ChaCha8Rng, n: usize, mean: f64, std: f64) -> Vec<f64> {
    (0..n).map(|_| normal(rng, mean, std)).collect()
}
