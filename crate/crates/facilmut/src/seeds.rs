//! Deterministic stream derivation. Every random decision in a run comes
//! from a ChaCha8 stream keyed by (master seed, domain tag, indices), so
//! results are independent of scheduling and thread count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const TAG_INIT: u64 = 0x696e_6974; // initial population, per slot
pub const TAG_REPRO: u64 = 0x7265_7072; // reproduction, per (generation, slot)
pub const TAG_SPLIT: u64 = 0x7370_6c74; // dataset splits, per split id
pub const TAG_POSTHOC: u64 = 0x7068_6f63; // post-hoc repetitions, per rep

/// splitmix64-style avalanche over a sequence of words.
pub fn mix(parts: &[u64]) -> u64 {
    let mut acc: u64 = 0xa076_1d64_78bd_642f;
    for &p in parts {
        let mut z = acc ^ p;
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        acc = z ^ (z >> 31);
    }
    acc
}

pub fn stream(parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(parts))
}
