//! Named, seedable random streams.
//!
//! Every consumer derives its own ChaCha stream from a tuple of integers, so
//! adding or reordering consumers never shifts another consumer's draws.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Stream purposes, kept distinct so two consumers never share draws.
pub mod purpose {
    pub const TASK: u64 = 1;
    pub const INIT: u64 = 2;
    pub const GATE_NOISE: u64 = 3;
    pub const SHUFFLE: u64 = 4;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes a key path into a single 64-bit seed.
pub fn derive_seed(key: &[u64]) -> u64 {
    key.iter().fold(0x6a09_e667_f3bc_c908, |acc, &k| {
        splitmix64(acc ^ splitmix64(k))
    })
}

pub fn stream(key: &[u64]) -> StreamRng {
    StreamRng::seed_from_u64(derive_seed(key))
}
