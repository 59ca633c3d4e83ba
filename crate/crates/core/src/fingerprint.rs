use sha2::{Digest, Sha256};

/// Stable 16-hex-digit digest of a float sequence (little-endian IEEE bits).
pub fn fingerprint(tag: &str, values: impl IntoIterator<Item = f64>) -> String {
    let mut hasher = Sha256::new();
    hasher.update(tag.as_bytes());
    for v in values {
        hasher.update(v.to_bits().to_le_bytes());
    }
    let digest = hasher.finalize();
    hex::encode(&digest[..8])
}
