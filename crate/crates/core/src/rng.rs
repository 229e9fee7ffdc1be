//! Reproducible random streams.
//!
//! Every stochastic operation takes an explicit [`RngStream`]. Streams are
//! plain 64-bit identifiers; children are derived by mixing a tag into the
//! parent so that the same (parent, tag) pair always yields the same draws.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct RngStream(pub u64);

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        RngStream(seed)
    }

    /// Derived stream for a sub-computation identified by `tag`.
    pub fn child(self, tag: u64) -> Self {
        RngStream(splitmix64(self.0 ^ splitmix64(tag.wrapping_add(0x5851_F42D_4C95_7F2D))))
    }

    /// Derived stream keyed by a string label (layer names and the like).
    pub fn named(self, label: &str) -> Self {
        // FNV-1a
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in label.bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        self.child(h)
    }

    pub fn rng(self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.0)
    }
}
