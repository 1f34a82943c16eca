//! Seed derivation for reproducible runs.
//!
//! Every random decision in the crate draws from a ChaCha8 stream whose seed
//! is derived here. Derivation is pure, so a fixed top-level seed reproduces
//! the whole pipeline bit for bit regardless of thread scheduling.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Mixes a list of words into one seed (splitmix64 finalizer per word).
pub fn mix(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x9e37_79b9_7f4a_7c15;
    for &p in parts {
        let mut z = h ^ p.wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        h = z ^ (z >> 31);
    }
    h
}

/// A deterministic generator for the given derived seed.
pub fn stream(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Generator for a labelled sub-stream, e.g. per chain or per step.
pub fn substream(seed: u64, label: &str, index: u64) -> ChaCha8Rng {
    let tag = label.bytes().fold(0u64, |acc, b| acc.wrapping_mul(257).wrapping_add(b as u64));
    stream(mix(&[seed, tag, index]))
}
