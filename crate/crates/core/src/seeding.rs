//! Deterministic seed derivation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn fnv1a(bytes: impl IntoIterator<Item = u8>, mut hash: u64) -> u64 {
    for b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// Stable 64-bit hash of a string (FNV-1a).
pub fn stable_hash(s: &str) -> u64 {
    fnv1a(s.bytes(), 0xcbf2_9ce4_8422_2325)
}

/// Mixes a seed with a string key.
pub fn derive_seed(seed: u64, key: &str) -> u64 {
    fnv1a(seed.to_le_bytes(), stable_hash(key))
}

/// Generator derived from a global seed and a string key.
pub fn derived_rng(seed: u64, key: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, key))
}

/// Per-clip generator for graph construction.
pub fn clip_rng(seed: u64, clip_id: &str) -> ChaCha8Rng {
    derived_rng(seed, clip_id)
}
