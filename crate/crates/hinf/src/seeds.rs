//! Named sub-streams of a root seed.

use sha2::{Digest, Sha256};

/// Seed of the sub-stream `name`: the first eight bytes (little endian) of
/// `sha256(root.to_le_bytes() || name)`.
pub fn sub_seed(root: u64, name: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(root.to_le_bytes());
    h.update(name.as_bytes());
    let digest = h.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

pub const COLLECTION: &str = "collection";
pub const CLOSED_LOOP: &str = "closed_loop";
pub const DISTURBANCE: &str = "disturbance";
