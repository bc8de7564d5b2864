//! Seeded random streams.
//!
//! Every stochastic operation draws from a [`ChaCha8Rng`] seeded through
//! [`stream`]. ChaCha8 output is specified bit-for-bit by `rand_chacha`
//! independent of platform and pointer width, and normal deviates come from
//! `rand_distr::StandardNormal` (ziggurat), so a given seed reproduces the same
//! numbers everywhere for a fixed dependency lockfile.
//!
//! Sub-streams are keyed by a list of integer tags (purpose, task, class, ...)
//! folded into the base seed with SplitMix64 so unrelated consumers never share
//! a stream.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Stream tags, kept distinct so sub-streams never collide.
pub mod tag {
    pub const CLASS_ORDER: u64 = 1;
    pub const REPLAY: u64 = 2;
    pub const HINGE: u64 = 3;
    pub const SHUFFLE: u64 = 4;
    pub const RANDOM_PAIRS: u64 = 5;
    pub const SYNTH_TEXT: u64 = 6;
    pub const SYNTH_IMAGE: u64 = 7;
}

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a 64-bit seed from a base seed and a tag path.
pub fn derive(seed: u64, tags: &[u64]) -> u64 {
    tags.iter()
        .fold(splitmix64(seed), |acc, &t| splitmix64(acc ^ splitmix64(t)))
}

/// Opens the random stream identified by `seed` and `tags`.
pub fn stream(seed: u64, tags: &[u64]) -> Rng {
    ChaCha8Rng::seed_from_u64(derive(seed, tags))
}
