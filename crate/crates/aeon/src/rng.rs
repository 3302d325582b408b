//! Deterministic seed derivation.
//!
//! Every random decision in the crate flows from one user-visible seed via
//! [`mix`], so independent consumers (epoch shuffling, view noise, mixup
//! draws, dataset synthesis) get decorrelated streams without sharing
//! mutable RNG state, and any single draw can be reproduced in isolation.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// splitmix64 finalizer; good avalanche, cheap, stable across platforms.
fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Fold a seed with any number of stream tags into a new seed.
pub fn mix(seed: u64, tags: &[u64]) -> u64 {
    let mut acc = splitmix(seed);
    for &t in tags {
        acc = splitmix(acc ^ t.wrapping_mul(0xff51afd7ed558ccd));
    }
    acc
}

/// A seeded generator for one derived stream.
pub fn stream(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(seed, tags))
}

// Stream tags. Values are arbitrary but frozen: changing one changes every
// downstream artifact byte-for-byte.
pub const MODEL_INIT: u64 = 1;
pub const SHUFFLE: u64 = 2;
pub const WEAK_VIEW: u64 = 3;
pub const STRONG_VIEW: u64 = 4;
pub const MIXUP: u64 = 5;
pub const CLASS_MEANS: u64 = 6;
pub const CLASS_SAMPLES: u64 = 7;
pub const POOL_MEANS: u64 = 8;
pub const POOL_SAMPLES: u64 = 9;
pub const FLIP_RATES: u64 = 10;
pub const FLIP_DRAWS: u64 = 11;
pub const TRANSITION_BLOCKS: u64 = 12;
pub const TEST_SAMPLES: u64 = 13;
pub const EMBED_PROJECTION: u64 = 14;

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngCore;

    #[test]
    fn streams_are_deterministic_and_distinct() {
        let a1 = stream(7, &[WEAK_VIEW, 3]).next_u64();
        let a2 = stream(7, &[WEAK_VIEW, 3]).next_u64();
        let b = stream(7, &[WEAK_VIEW, 4]).next_u64();
        let c = stream(7, &[STRONG_VIEW, 3]).next_u64();
        assert_eq!(a1, a2);
        assert_ne!(a1, b);
        assert_ne!(a1, c);
    }

    #[test]
    fn tag_order_matters() {
        assert_ne!(mix(1, &[2, 3]), mix(1, &[3, 2]));
    }
}
