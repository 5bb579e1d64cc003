//! Per-stage seed derivation from the single run seed.

use sha2::{Digest, Sha256};

/// First eight bytes (little-endian) of `SHA-256(seed_le ‖ stage)`.
///
/// Each stage gets an independent stream that depends only on the run seed
/// and the stage name, so stages can be rerun in isolation.
pub fn derive_seed(seed: u64, stage: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(stage.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().unwrap())
}
