//! Seeded random streams.
//!
//! Every random draw in the crate goes through [`stream`], so a run is a pure
//! function of its base seed and the stream labels used to derive sub-seeds.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives an independent seed for sub-stream `index` of `seed`.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    mix(seed.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_add(mix(index ^ 0x5851_f42d_4c95_7f2d)))
}

pub fn stream(seed: u64, index: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, index))
}
