//! Seed derivation. Every random draw in the crate comes from a generator
//! seeded by `derive_seed(root, tags)`, so independent streams never shift
//! each other and a run can resume from `(root seed, counters)` alone.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

pub fn derive_seed(root: u64, tags: &[u64]) -> u64 {
    tags.iter()
        .fold(splitmix64(root), |acc, &t| splitmix64(acc ^ splitmix64(t)))
}

pub fn stream(root: u64, tags: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(root, tags))
}

/// Stream tags, kept distinct per purpose.
pub mod tag {
    pub const INIT: u64 = 1;
    pub const SHUFFLE: u64 = 2;
    pub const NEGATIVES: u64 = 3;
    pub const SLICES: u64 = 4;
    pub const BANK_INIT: u64 = 5;
    pub const SYNTH: u64 = 6;
    pub const PROBE: u64 = 7;
    pub const CRITIC_INIT: u64 = 8;
}
