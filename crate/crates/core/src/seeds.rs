//! Deterministic seed derivation for independent random streams.

/// FNV-1a mix of the master seed, a stream label, and an index. Distinct
/// labels/indices give independent, reproducible sub-streams.
pub fn derive_seed(master: u64, label: &str, index: u64) -> u64 {
    const OFFSET: u64 = 0xcbf29ce484222325;
    const PRIME: u64 = 0x100000001b3;
    let mut h = OFFSET;
    for byte in master
        .to_le_bytes()
        .iter()
        .chain(label.as_bytes())
        .chain(index.to_le_bytes().iter())
    {
        h ^= *byte as u64;
        h = h.wrapping_mul(PRIME);
    }
    h
}
