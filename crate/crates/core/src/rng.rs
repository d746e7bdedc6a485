//! Seeded random streams. Every experiment is a pure function of its seed;
//! independent sub-tasks draw from separate ChaCha streams of that seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type ScbmRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> ScbmRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Stream `stream` of `seed`; distinct streams never overlap.
pub fn stream(seed: u64, stream: u64) -> ScbmRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Named streams used by the experiment runners.
pub mod streams {
    pub const MODEL: u64 = 1;
    pub const DATA: u64 = 2;
    pub const ESTIMATE: u64 = 3;
    pub const SCORE: u64 = 4;
    pub const EVAL: u64 = 5;
    pub const AUX: u64 = 6;
}

/// Seed for the `index`-th independent sub-task of `seed` (SplitMix64
/// finalizer over the pair).
pub fn derive(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
