//! Labeled tree of deterministic random streams.
//!
//! A master seed expands into children addressed by a label path such as
//! `root.child("trial").index(17).child("noise")`. Each node hashes its path
//! into a fresh 64-bit seed, so the draws a stream produces never depend on
//! how many other streams were created before it or on which thread runs it.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

pub type StreamRng = ChaCha12Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SeedTree {
    key: u64,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl SeedTree {
    pub fn new(master_seed: u64) -> Self {
        Self {
            key: splitmix(master_seed ^ 0x6772_6164_6c61_6221),
        }
    }

    pub fn child(&self, label: &str) -> Self {
        // FNV-1a over the label, then mixed with the parent key.
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in label.bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        Self {
            key: splitmix(self.key ^ splitmix(h)),
        }
    }

    pub fn index(&self, i: u64) -> Self {
        Self {
            key: splitmix(self.key.rotate_left(17) ^ splitmix(i ^ 0x5bd1_e995)),
        }
    }

    pub fn seed(&self) -> u64 {
        self.key
    }

    pub fn rng(&self) -> StreamRng {
        StreamRng::seed_from_u64(self.key)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn paths_are_stable_and_distinct() {
        let root = SeedTree::new(7);
        assert_eq!(root.child("a").index(3), SeedTree::new(7).child("a").index(3));
        assert_ne!(root.child("a"), root.child("b"));
        assert_ne!(root.index(0), root.index(1));
        assert_ne!(root.child("a").child("b"), root.child("b").child("a"));
        let x: u64 = root.child("a").rng().random();
        let y: u64 = root.child("a").rng().random();
        assert_eq!(x, y);
    }
}
