use sha2::{Digest, Sha256};

/// Seed of an independent random stream for `(seed, epoch, purpose, key)`.
pub fn stream_seed(seed: u64, epoch: u64, purpose: &str, key: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(epoch.to_le_bytes());
    h.update((purpose.len() as u64).to_le_bytes());
    h.update(purpose.as_bytes());
    h.update(key.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}
