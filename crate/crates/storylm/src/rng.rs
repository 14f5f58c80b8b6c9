//! Seed derivation.
//!
//! Every random decision in the crate flows from one root seed. Sub-streams
//! are derived by hashing the root seed together with a purpose label and an
//! index, so per-item work can run in parallel without the results depending
//! on scheduling order.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// FNV-1a, 64 bit. Stable across platforms and releases, unlike
/// `std::hash::DefaultHasher`.
pub(crate) fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Derives a deterministic rng stream from `(seed, label, index)`.
pub fn derive_rng(seed: u64, label: &str, index: u64) -> ChaCha8Rng {
    let mut bytes = Vec::with_capacity(label.len() + 16);
    bytes.extend_from_slice(&seed.to_le_bytes());
    bytes.extend_from_slice(label.as_bytes());
    bytes.extend_from_slice(&index.to_le_bytes());
    ChaCha8Rng::seed_from_u64(fnv1a64(&bytes))
}

/// Derives a deterministic rng stream from `(seed, label, string key)`,
/// e.g. a story id.
pub fn derive_rng_keyed(seed: u64, label: &str, key: &str) -> ChaCha8Rng {
    let mut bytes = Vec::with_capacity(label.len() + key.len() + 9);
    bytes.extend_from_slice(&seed.to_le_bytes());
    bytes.extend_from_slice(label.as_bytes());
    bytes.push(0);
    bytes.extend_from_slice(key.as_bytes());
    ChaCha8Rng::seed_from_u64(fnv1a64(&bytes))
}
