//! Deterministic seed derivation.
//!
//! Every sampling site in the crate draws from its own named stream derived
//! from a root seed. Consuming one stream never shifts another, so adding or
//! removing a consumer (say, the RL pipeline next to a plain baseline) leaves
//! all other random choices bit-identical.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// FNV-1a over the root seed and tag bytes.
pub fn derive_seed(root: u64, tag: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in root.to_le_bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x1000_0000_01b3);
    }
    for b in tag.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x1000_0000_01b3);
    }
    h
}

/// A ChaCha stream keyed by `(root, tag)`.
pub fn stream(root: u64, tag: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(root, tag))
}
