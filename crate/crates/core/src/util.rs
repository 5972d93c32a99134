use sha2::{Digest, Sha256};

/// First 16 hex digits of the SHA-256 of `bytes`.
pub fn short_digest(bytes: &[u8]) -> String {
    let full = Sha256::digest(bytes);
    full.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

pub fn sha256(bytes: &[u8]) -> [u8; 32] {
    let d = Sha256::digest(bytes);
    let mut out = [0u8; 32];
    out.copy_from_slice(&d);
    out
}

/// Whether `VASC_DETERMINISTIC=1` is set.
pub fn deterministic_mode() -> bool {
    std::env::var("VASC_DETERMINISTIC").is_ok_and(|v| v == "1")
}
