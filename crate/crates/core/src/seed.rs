//! Seed derivation.
//!
//! Every random draw in the crate comes from a stream keyed by a base seed
//! and a short path of indices (example index, restart index, ...). Streams
//! are therefore independent of scheduling and thread count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Hashes a base seed together with a path of indices.
pub fn derive(seed: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(seed), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

/// A ChaCha8 stream for `(seed, path...)`.
pub fn stream(seed: u64, path: &[u64]) -> Rng {
    ChaCha8Rng::seed_from_u64(derive(seed, path))
}

/// Domain tags so that different consumers of the same base seed never share
/// a stream.
pub mod tag {
    pub const INIT: u64 = 0x1;
    pub const ATTACK: u64 = 0x2;
    pub const SHUFFLE: u64 = 0x3;
    pub const SPLIT: u64 = 0x4;
    pub const AUGMENT: u64 = 0x5;
    pub const BASELINE: u64 = 0x6;
    pub const PROBE: u64 = 0x7;
    pub const EPOCH: u64 = 0x8;
    pub const PAIRS: u64 = 0x9;
}
