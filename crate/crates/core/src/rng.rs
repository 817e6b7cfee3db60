//! Keyed random streams.
//!
//! Every random draw in a run comes from a stream identified by a path of
//! integer tags below the scenario's master seed, e.g.
//! `master_seed / replicate / IMPUTE / model / m / visit / slice`. A key is
//! folded through SplitMix64 one tag at a time and the final 64-bit value
//! seeds a ChaCha8 generator. The output of any stream depends only on its
//! path, so results do not depend on how work is scheduled across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Generator type handed out by [`StreamKey::rng`].
pub type StreamRng = ChaCha8Rng;

/// Domain tags used below a replicate key.
pub mod tag {
    pub const COPULA: u64 = 0x636f_7075_6c61;
    pub const IE_SELECTION: u64 = 0x0069_6573_656c;
    pub const WITHDRAWAL: u64 = 0x0077_6974_6864;
    pub const IMPUTE: u64 = 0x696d_7075_7465;
    pub const ORACLE: u64 = 0x6f72_6163_6c65;
}

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Position in the stream tree.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct StreamKey(u64);

impl StreamKey {
    pub fn root(master_seed: u64) -> Self {
        StreamKey(splitmix64(master_seed))
    }

    pub fn child(self, tag: u64) -> Self {
        StreamKey(splitmix64(self.0 ^ splitmix64(tag.wrapping_add(0x5851_f42d_4c95_7f2d))))
    }

    pub fn value(self) -> u64 {
        self.0
    }

    pub fn rng(self) -> StreamRng {
        ChaCha8Rng::seed_from_u64(self.0)
    }
}
