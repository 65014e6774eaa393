//! Hashes embedded in reports for provenance.

use sha2::{Digest, Sha256};

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hash of a JSON value using serde_json's canonical (insertion-ordered) output.
pub fn json_hash(v: &serde_json::Value) -> String {
    sha256_hex(serde_json::to_string(v).expect("json serializes").as_bytes())
}
