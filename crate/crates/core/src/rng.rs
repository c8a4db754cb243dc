//! Seed derivation.
//!
//! All randomness in a run is derived from one `u64` seed. Each consumer
//! (market split, quality rounds, tiebreak keys, ...) gets its own stream so
//! that changing one agent's report never shifts the draws another phase
//! sees.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Purpose tags for derived streams.
pub mod purpose {
    pub const SPLIT: u64 = 0x5350_4c49;
    pub const QUALITY: u64 = 0x5155_414c;
    pub const TIEBREAK: u64 = 0x5449_4542;
    pub const POSTED_PRICE: u64 = 0x5050_4d00;
    pub const DEVIATION: u64 = 0x4445_5649;
    pub const INSTANCE: u64 = 0x494e_5354;
    pub const TASKS: u64 = 0x5441_534b;
    pub const RANKING: u64 = 0x5241_4e4b;
}

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive_seed(seed: u64, parts: &[u64]) -> u64 {
    parts.iter().fold(mix64(seed), |acc, &p| mix64(acc ^ mix64(p)))
}

pub fn stream(seed: u64, parts: &[u64]) -> StreamRng {
    StreamRng::seed_from_u64(derive_seed(seed, parts))
}
