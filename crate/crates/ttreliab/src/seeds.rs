//! Hierarchical, counter-based seed derivation.
//!
//! One root seed is split into per-module and per-sample streams by hashing
//! (seed, label, counter) triples with a SplitMix64-style mixer. Streams are
//! therefore reproducible independent of worker count or evaluation order.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

#[inline]
fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn hash_label(label: &str) -> u64 {
    // FNV-1a, stable across platforms.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// A node in the seed tree.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeedNode(pub u64);

impl SeedNode {
    pub fn new(root: u64) -> Self {
        SeedNode(mix64(root ^ 0x5eed_5eed_5eed_5eed))
    }

    /// Child stream identified by a label (module or phase name).
    pub fn child(&self, label: &str) -> SeedNode {
        SeedNode(mix64(self.0 ^ hash_label(label)))
    }

    /// Child stream identified by a counter (per-sample substream).
    pub fn index(&self, i: u64) -> SeedNode {
        SeedNode(mix64(self.0 ^ mix64(i.wrapping_add(1))))
    }

    /// Materializes the stream as a seeded generator.
    pub fn rng(&self) -> ChaCha12Rng {
        ChaCha12Rng::seed_from_u64(self.0)
    }
}
