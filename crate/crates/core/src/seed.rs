//! Root-seed splitting.
//!
//! A stage seed is `splitmix64(root ^ fnv1a64(stage) ^ splitmix64(item))`,
//! where `stage` names the consumer ("init", "affine", "kmeans", ...) and
//! `item` distinguishes images within a run. Every stage therefore gets an
//! independent, reproducible stream regardless of scheduling order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive(root: u64, stage: &str, item: u64) -> u64 {
    splitmix64(root ^ fnv1a64(stage.as_bytes()) ^ splitmix64(item))
}

pub fn stage_rng(root: u64, stage: &str, item: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(root, stage, item))
}
