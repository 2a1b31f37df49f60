//! Seed derivation: all randomness flows from one root seed through
//! (root, purpose-tag, index) so independent stages never share streams and
//! results reproduce across platforms.

use sha2::{Digest, Sha256};

/// Derive a child seed from a root seed, a purpose tag, and an index.
pub fn derive_seed(root: u64, tag: &str, index: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(root.to_le_bytes());
    h.update(tag.as_bytes());
    h.update(index.to_le_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}
