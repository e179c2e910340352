//! Deterministic seed derivation.
//!
//! Every random draw in the pipeline comes from a `ChaCha8Rng` whose seed is
//! derived from the master seed by a splitmix64 scramble, so results do not
//! depend on thread scheduling or iteration order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// One round of the splitmix64 output function.
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Seed for the `index`-th independent stream under `seed`.
pub fn derive(seed: u64, index: u64) -> u64 {
    splitmix64(seed ^ splitmix64(index))
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn stream(seed: u64, index: u64) -> ChaCha8Rng {
    rng(derive(seed, index))
}

/// Named sub-seeds of a run's master seed.
pub mod streams {
    pub const SPLIT: u64 = 1;
    pub const BOOTSTRAP: u64 = 2;
    pub const GENERATOR: u64 = 3;
    pub const SUBGROUP: u64 = 4;
}
