//! Content hashes of canonical serializations.

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::corpus::Example;

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hash of the compact JSON form of `value`. Struct fields serialize in
/// declaration order and maps are `BTreeMap`s, so the form is canonical.
pub fn hash_json<T: Serialize + ?Sized>(value: &T) -> String {
    sha256_hex(&serde_json::to_vec(value).expect("value serializes"))
}

pub fn hash_examples(examples: &[Example]) -> String {
    hash_json(examples)
}

/// Stable 64-bit value derived from `seed` and `label`, for per-item RNG streams.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(label.as_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().unwrap())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_digest() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn derived_seeds_differ_by_label_and_repeat() {
        assert_eq!(derive_seed(1, "q1"), derive_seed(1, "q1"));
        assert_ne!(derive_seed(1, "q1"), derive_seed(1, "q2"));
        assert_ne!(derive_seed(1, "q1"), derive_seed(2, "q1"));
    }
}
