//! Deterministic randomness plumbing.
//!
//! Every random decision in the crate flows from a run seed through
//! [`subseed`], which mixes a domain tag and an index (task, class, sample
//! id, ...) into an independent stream. Keying streams by stable identifiers
//! rather than drawing from one shared generator makes results independent
//! of iteration order and of how work is batched or parallelized.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Domain tags separating the crate's independent random streams.
pub mod domain {
    pub const ASSIGN: u64 = 1;
    pub const STREAM_CLASS: u64 = 2;
    pub const STREAM_TASK: u64 = 3;
    pub const SYNTH_CLASS: u64 = 4;
    pub const MODEL_INIT: u64 = 5;
    pub const SCORE_TASK: u64 = 6;
    pub const SCORE_SAMPLE: u64 = 7;
    pub const REPLAY: u64 = 8;
    pub const RESERVOIR: u64 = 9;
    pub const AUG: u64 = 10;
    pub const MEM_EPOCH: u64 = 11;
    pub const OFFLINE_EPOCH: u64 = 12;
    pub const RANDOM_UPDATE: u64 = 13;
    pub const GREEDY_UPDATE: u64 = 14;
    pub const UPPER_INIT: u64 = 15;
    pub const UPPER_EPOCH: u64 = 16;
    pub const SYNTH_DATA: u64 = 17;
}

/// SplitMix64 finalizer; full-avalanche mixing of a 64-bit value.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives an independent seed for (`seed`, `domain`, `index`).
pub fn subseed(seed: u64, domain: u64, index: u64) -> u64 {
    splitmix64(splitmix64(seed).wrapping_add(splitmix64((domain << 56) ^ index)))
}

/// Fresh generator seeded directly from a 64-bit seed.
pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Fresh generator for the (`seed`, `domain`, `index`) stream.
pub fn keyed(seed: u64, domain: u64, index: u64) -> ChaCha8Rng {
    seeded(subseed(seed, domain, index))
}
