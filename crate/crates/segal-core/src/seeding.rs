//! Deterministic derivation of RNG streams from one master seed.
//!
//! Every stochastic component (scene content, weight init, pool split,
//! per-cycle training) draws from its own ChaCha stream derived from the
//! master seed and a purpose tag, so adding draws to one component never
//! shifts another.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer; the standard 64-bit avalanche mix.
fn splitmix64(state: u64) -> u64 {
    let mut z = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// FNV-1a over the tag bytes, folded with splitmix for avalanche.
fn tag_hash(tag: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    splitmix64(h)
}

/// Stable per-image seed: a pure function of the master seed and index.
pub fn image_seed(master_seed: u64, index: u64) -> u64 {
    splitmix64(master_seed ^ splitmix64(index.wrapping_add(0x5851_f42d_4c95_7f2d)))
}

/// Derive a sub-seed for a named component plus a numeric qualifier
/// (e.g. the cycle index).
pub fn sub_seed(master_seed: u64, tag: &str, k: u64) -> u64 {
    splitmix64(master_seed ^ tag_hash(tag) ^ splitmix64(k.wrapping_add(1)))
}

/// ChaCha stream for a named component.
pub fn stream(master_seed: u64, tag: &str, k: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(sub_seed(master_seed, tag, k))
}

/// ChaCha stream from a raw 64-bit seed.
pub fn stream_from(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
