//! Deterministic stream derivation.
//!
//! Every random draw in the crate flows from one `u64` seed through labelled
//! sub-streams, so a run replays exactly across platforms. Streams are keyed
//! by `(seed, label, index)` hashed into a ChaCha20 key; ChaCha output is
//! platform-independent.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};

/// A labelled deterministic random stream.
pub fn derive_rng(seed: u64, label: &str, index: u64) -> ChaCha20Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update([0u8]);
    hasher.update(label.as_bytes());
    hasher.update([0u8]);
    hasher.update(index.to_le_bytes());
    let digest = hasher.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(digest.as_slice());
    ChaCha20Rng::from_seed(key)
}

/// Hex-encoded SHA-256 of a byte string. Used for config and output hashing.
pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}
