//! Counter-based deterministic randomness.
//!
//! Every random draw in dataset generation and augmentation comes from a
//! stream keyed by `(seed, purpose, index)`, so any individual sample can be
//! regenerated independently of generation order and the result is identical
//! across platforms.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

/// Stream keyed by `(seed, purpose, index)`.
pub fn keyed_rng(seed: u64, purpose: &str, index: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[0..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&fnv1a(purpose.as_bytes()).to_le_bytes());
    key[16..24].copy_from_slice(&index.to_le_bytes());
    key[24..32].copy_from_slice(&0x4f4d41445f726e67u64.to_le_bytes()); // "OMAD_rng"
    ChaCha8Rng::from_seed(key)
}
