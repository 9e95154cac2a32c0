//! Canonical JSON rendering and content digests.
//!
//! Canonical form: object keys sorted, no insignificant whitespace, floats
//! rendered by shortest round-trip decimal. `serde_json` without the
//! `preserve_order` feature stores objects in a `BTreeMap`, so converting to
//! `Value` and compact-printing yields the canonical byte string directly.

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::Result;

/// Serialize `value` to canonical JSON bytes.
pub fn to_canonical_bytes<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let v = serde_json::to_value(value)?;
    Ok(serde_json::to_vec(&v)?)
}

/// Serialize `value` to a canonical JSON string.
pub fn to_canonical_string<T: Serialize>(value: &T) -> Result<String> {
    let v = serde_json::to_value(value)?;
    Ok(serde_json::to_string(&v)?)
}

/// SHA-256 of a byte string, lowercase hex.
pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    hex::encode(h.finalize())
}

/// SHA-256 of the canonical JSON form of `value`.
pub fn digest_canonical<T: Serialize>(value: &T) -> Result<String> {
    Ok(sha256_hex(&to_canonical_bytes(value)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn keys_are_sorted_and_compact() {
        let v = json!({"b": 1, "a": {"z": 2.5, "y": [1, 2]}});
        let s = to_canonical_string(&v).unwrap();
        assert_eq!(s, r#"{"a":{"y":[1,2],"z":2.5},"b":1}"#);
    }

    #[test]
    fn floats_round_trip_shortest() {
        let v = json!({"x": 0.1_f64, "y": 1.0_f64 / 3.0});
        let s = to_canonical_string(&v).unwrap();
        let back: serde_json::Value = serde_json::from_str(&s).unwrap();
        assert_eq!(to_canonical_string(&back).unwrap(), s);
    }

    #[test]
    fn sha256_known_vector() {
        // sha256("abc"), the FIPS 180-2 test vector.
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
