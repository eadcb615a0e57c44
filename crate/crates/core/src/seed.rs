//! Independent RNG streams derived from a base seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes a base seed with a stream tag and index into a fresh seed.
pub fn derive(base: u64, tag: u64, index: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(base) ^ tag) ^ index)
}

pub fn rng(base: u64, tag: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(base, tag, index))
}

pub mod tag {
    pub const MEANS: u64 = 1;
    pub const TRAIN: u64 = 2;
    pub const TEST: u64 = 3;
    pub const PROTOTYPES: u64 = 4;
    pub const PARTITION: u64 = 5;
    pub const LOCAL_TEST: u64 = 6;
    pub const SELECTION: u64 = 7;
    pub const SHUFFLE_P1: u64 = 8;
    pub const SHUFFLE_P2: u64 = 9;
    pub const EVAL_SUBSET: u64 = 10;
}
