//! Seed derivation. Every random stream is keyed by a base seed plus a
//! short tag path, so results never depend on scheduling order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mix a tag path into a base seed.
pub fn derive(seed: u64, tags: &[u64]) -> u64 {
    tags.iter()
        .fold(splitmix64(seed), |acc, &t| splitmix64(acc ^ splitmix64(t.wrapping_add(GOLDEN))))
}

/// Stable 64-bit hash of a string (FNV-1a, then mixed).
pub fn hash_str(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    splitmix64(h)
}

pub fn stream(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(seed, tags))
}

/// A standard normal draw that is a pure function of its key.
pub fn keyed_normal(seed: u64, tags: &[u64]) -> f64 {
    StandardNormal.sample(&mut stream(seed, tags))
}

pub mod tag {
    pub const FOLDS: u64 = 1;
    pub const FEWSHOT: u64 = 2;
    pub const PREDICTOR: u64 = 3;
    pub const TRIAL: u64 = 4;
    pub const TRUTH: u64 = 5;
    pub const SUP_SIM: u64 = 6;
    pub const REPLICATION: u64 = 7;
    pub const CV: u64 = 8;
    pub const BETA: u64 = 9;
    pub const DEMO_NOISE: u64 = 10;
}
