//! Sub-seed derivation.
//!
//! A child seed is `splitmix64(parent ^ fnv1a(tag) ^ splitmix64(index))`,
//! so every component can be re-run on its own from the global seed plus
//! its tag path.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// One round of the SplitMix64 output function.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01B3)
    })
}

pub fn derive(parent: u64, tag: &str) -> u64 {
    splitmix64(parent ^ fnv1a(tag.as_bytes()))
}

pub fn derive_indexed(parent: u64, tag: &str, index: u64) -> u64 {
    splitmix64(parent ^ fnv1a(tag.as_bytes()) ^ splitmix64(index))
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
