//! Canonical JSON and content-addressed request digests.
//!
//! Canonical form: object keys sorted by byte order, no whitespace, numbers
//! and strings formatted by `serde_json`. The digest of a request is
//! `hex(sha256(kind || "\n" || canonical_payload))`, where `kind` is the
//! capability name (`detect`, `caption`, `complete`, `similarity`, `embed`).

use serde_json::Value;
use sha2::{Digest, Sha256};

use super::BackendError;

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes).as_slice())
}

pub fn canonical_json(value: &Value) -> String {
    let mut out = String::new();
    write_canonical(value, &mut out);
    out
}

fn write_canonical(value: &Value, out: &mut String) {
    match value {
        Value::Object(map) => {
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            out.push('{');
            for (i, key) in keys.into_iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                out.push_str(&Value::String(key.clone()).to_string());
                out.push(':');
                write_canonical(&map[key], out);
            }
            out.push('}');
        }
        Value::Array(items) => {
            out.push('[');
            for (i, item) in items.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                write_canonical(item, out);
            }
            out.push(']');
        }
        scalar => out.push_str(&scalar.to_string()),
    }
}

/// Digest of an already-canonical payload. Rejects payloads that are not in
/// canonical form.
pub fn request_digest(kind: &str, payload: &str) -> Result<String, BackendError> {
    let parsed: Value = serde_json::from_str(payload)
        .map_err(|e| BackendError::NonCanonical(format!("payload is not JSON: {e}")))?;
    if canonical_json(&parsed) != payload {
        return Err(BackendError::NonCanonical(
            "payload is not in canonical form (sorted keys, no whitespace)".into(),
        ));
    }
    Ok(digest_canonical(kind, payload))
}

pub(crate) fn digest_canonical(kind: &str, canonical: &str) -> String {
    let mut buf = Vec::with_capacity(kind.len() + 1 + canonical.len());
    buf.extend_from_slice(kind.as_bytes());
    buf.push(b'\n');
    buf.extend_from_slice(canonical.as_bytes());
    sha256_hex(&buf)
}

pub fn is_digest(s: &str) -> bool {
    s.len() == 64 && s.bytes().all(|b| b.is_ascii_digit() || (b'a'..=b'f').contains(&b))
}
