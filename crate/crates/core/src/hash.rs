//! Stable 64-bit content hashes for dataset fingerprints.

use crate::stream::mix;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

#[derive(Debug, Clone, Copy)]
pub struct Fnv64(u64);

impl Default for Fnv64 {
    fn default() -> Self {
        Fnv64(FNV_OFFSET)
    }
}

impl Fnv64 {
    pub fn write(&mut self, bytes: &[u8]) {
        for b in bytes {
            self.0 ^= u64::from(*b);
            self.0 = self.0.wrapping_mul(FNV_PRIME);
        }
    }

    pub fn write_f64s(&mut self, values: &[f64]) {
        for v in values {
            self.write(&v.to_le_bytes());
        }
    }

    pub fn write_u64(&mut self, v: u64) {
        self.write(&v.to_le_bytes());
    }

    pub fn finish(&self) -> u64 {
        self.0
    }
}

pub fn row_hash(values: &[f64]) -> u64 {
    let mut h = Fnv64::default();
    h.write_f64s(values);
    h.finish()
}

/// Order-independent hash of a multiset of rows.
///
/// Equal for any permutation or chunking of the same rows, so it identifies
/// dataset content rather than layout.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ContentHash {
    sum: u64,
    xor: u64,
    count: u64,
}

impl ContentHash {
    pub fn add_row(&mut self, values: &[f64]) {
        let h = mix(row_hash(values));
        self.sum = self.sum.wrapping_add(h);
        self.xor ^= mix(h);
        self.count += 1;
    }

    pub fn merge(&mut self, other: &ContentHash) {
        self.sum = self.sum.wrapping_add(other.sum);
        self.xor ^= other.xor;
        self.count += other.count;
    }

    pub fn finish(&self) -> u64 {
        mix(self.sum ^ mix(self.xor) ^ mix(self.count.wrapping_mul(FNV_PRIME)))
    }
}
