//! Seed derivation.
//!
//! Every random draw in the crate comes from a ChaCha8 stream whose seed is
//! derived from a master seed, a domain tag and an index with SplitMix64
//! finalization. Per-item work therefore produces the same values whether it
//! runs serially or on a thread pool.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn tag_hash(tag: &str) -> u64 {
    // FNV-1a
    tag.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

/// `splitmix64(splitmix64(master ^ fnv(tag)) ^ index)`.
pub fn derive(master: u64, tag: &str, index: u64) -> u64 {
    splitmix64(splitmix64(master ^ tag_hash(tag)) ^ index)
}

pub fn rng(master: u64, tag: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(master, tag, index))
}
