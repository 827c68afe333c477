//! Deterministic randomness. Every consumer derives its own ChaCha stream
//! from (root seed, purpose label, index), so adding or reordering one
//! consumer never shifts the numbers another one sees.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use sha2::{Digest, Sha256};

/// Stream keyed by a root seed, a purpose label, and an index within that
/// purpose. Identical keys yield identical streams on every platform.
pub fn stream(seed: u64, purpose: &str, index: u64) -> ChaCha12Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update([purpose.len() as u8]);
    h.update(purpose.as_bytes());
    h.update(index.to_le_bytes());
    let digest = h.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha12Rng::from_seed(key)
}
