//! Seed splitting: every consumer of randomness gets its own ChaCha stream
//! derived from the single user seed, so adding draws in one place never
//! shifts another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent stream identifiers.
pub mod streams {
    pub const INIT: u64 = 1;
    pub const BATCH_ORDER: u64 = 2;
    pub const SHUFFLE: u64 = 3;
    pub const DP_NOISE: u64 = 4;
    pub const SAMPLE: u64 = 5;
    pub const METRICS: u64 = 6;
    pub const SPLIT: u64 = 7;
}

pub fn derive(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
