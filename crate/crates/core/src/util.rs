use sha2::{Digest, Sha256};

/// Stable 64-bit digest of a sequence of byte fields.
///
/// Fields are separated by a unit separator so `("ab", "c")` and `("a", "bc")`
/// hash differently. Stable across platforms and toolchains, unlike
/// `DefaultHasher`.
pub(crate) fn digest64(fields: &[&[u8]]) -> u64 {
    let mut hasher = Sha256::new();
    for (i, field) in fields.iter().enumerate() {
        if i > 0 {
            hasher.update([0x1f]);
        }
        hasher.update(field);
    }
    let out = hasher.finalize();
    u64::from_le_bytes(out[..8].try_into().expect("sha256 output is 32 bytes"))
}

/// Derives a child seed for a named purpose.
pub(crate) fn derive_seed(seed: u64, purpose: &str, index: u64) -> u64 {
    digest64(&[&seed.to_le_bytes(), purpose.as_bytes(), &index.to_le_bytes()])
}

/// Extracts the outermost JSON object from model output, tolerating code
/// fences and surrounding prose.
pub(crate) fn extract_json_object(text: &str) -> Option<&str> {
    let start = text.find('{')?;
    let end = text.rfind('}')?;
    (end > start).then(|| &text[start..=end])
}
