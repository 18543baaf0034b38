//! Reproducible random substreams.
//!
//! Every random quantity is drawn from a generator seeded by a [`StreamKey`],
//! and keys are derived hierarchically (master seed → iteration → draw →
//! panel). Results therefore do not depend on how work is scheduled.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StreamKey(pub u64);

impl StreamKey {
    pub fn new(seed: u64) -> Self {
        StreamKey(mix(seed ^ 0x6a09_e667_f3bc_c908))
    }

    /// Child key for position `index` below this key.
    pub fn child(self, index: u64) -> Self {
        StreamKey(mix(self.0 ^ mix(index.wrapping_add(0x9e37_79b9_7f4a_7c15))))
    }

    pub fn rng(self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.0)
    }
}

/// SplitMix64 finalizer.
pub fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
