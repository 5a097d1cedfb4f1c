//! Named, splittable random streams.
//!
//! A [`StreamKey`] is a 64-bit key derived from the root seed by folding in
//! labels and indices with the SplitMix64 finalizer. [`StreamKey::rng`] turns a
//! key into a ChaCha8 generator. Both steps are fixed integer arithmetic, so a
//! given path (`root(7).named("batch").indexed(3)`) yields the same stream on
//! every platform and independently of the order in which streams are created.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct StreamKey(u64);

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl StreamKey {
    pub fn root(seed: u64) -> Self {
        StreamKey(splitmix(seed))
    }

    pub fn named(self, label: &str) -> Self {
        // FNV-1a over the label bytes.
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in label.bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0000_0100_0000_01B3);
        }
        StreamKey(splitmix(self.0 ^ splitmix(h)))
    }

    pub fn indexed(self, index: u64) -> Self {
        StreamKey(splitmix(
            self.0.rotate_left(17) ^ splitmix(index ^ 0xA076_1D64_78BD_642F),
        ))
    }

    pub fn value(self) -> u64 {
        self.0
    }

    pub fn rng(self) -> StreamRng {
        ChaCha8Rng::seed_from_u64(self.0)
    }
}
