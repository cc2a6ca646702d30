//! Seed derivation for independent random streams.
//!
//! Every random decision in a run is drawn from a stream whose seed is
//! derived from a base seed plus a path of tags (client id, epoch, ...), so
//! that adding or reordering consumers never perturbs unrelated streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes `tags` into `base`, producing a well-spread child seed.
pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    tags.iter()
        .fold(splitmix64(base), |acc, &t| splitmix64(acc ^ splitmix64(t)))
}

pub fn rng_for(base: u64, tags: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, tags))
}

/// Stream tags, kept distinct so streams never collide.
pub mod tag {
    pub const INIT: u64 = 1;
    pub const SHUFFLE: u64 = 2;
    pub const ORDER: u64 = 3;
    pub const CACHE: u64 = 4;
    pub const INTERLEAVE: u64 = 5;
    pub const SCHEDULER: u64 = 6;
    pub const SERVER: u64 = 7;
    pub const CLIENT: u64 = 8;
    pub const DECODER: u64 = 9;
    pub const QUERY: u64 = 10;
}
