//! Deterministic sub-seed derivation.
//!
//! Every randomized stage draws from its own ChaCha stream whose seed is a
//! pure function of (root seed, stage label, index). Stages can then run in
//! any order, or in parallel, without perturbing each other's draws.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// FNV-1a over the stage label; stable across platforms and releases,
/// unlike `DefaultHasher`.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive a sub-seed for one indexed stage of a run.
pub fn derive_seed(root: u64, stage: &str, index: u64) -> u64 {
    let mixed =
        root ^ fnv1a(stage.as_bytes()).rotate_left(17) ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    splitmix64(splitmix64(mixed))
}

/// ChaCha stream for one indexed stage of a run.
pub fn stage_rng(root: u64, stage: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(root, stage, index))
}
