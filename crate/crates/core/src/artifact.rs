//! Versioned, checksummed container for persisted artifacts.
//!
//! Layout: one header line
//! `PRESCRIBE <kind> v<version> sha256=<hex digest of body>` followed by a
//! JSON body. Loading checks the kind, rejects newer versions and verifies
//! the digest, so truncated or edited files are refused.

use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

const MAGIC: &str = "PRESCRIBE";

#[derive(Debug, Error)]
pub enum ArtifactError {
    #[error("not a {expected} artifact: {reason}")]
    Header { expected: &'static str, reason: String },
    #[error("{kind} artifact version {found} is newer than supported version {supported}")]
    Version { kind: &'static str, found: u32, supported: u32 },
    #[error("checksum mismatch: header says {expected}, body hashes to {found}")]
    Checksum { expected: String, found: String },
    #[error("artifact body: {0}")]
    Body(#[from] serde_json::Error),
}

pub fn digest(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn encode<T: Serialize>(kind: &'static str, version: u32, body: &T) -> Vec<u8> {
    let json = serde_json::to_vec(body).expect("artifact bodies serialize");
    let mut out = format!("{MAGIC} {kind} v{version} sha256={}\n", digest(&json)).into_bytes();
    out.extend_from_slice(&json);
    out
}

pub fn decode<T: DeserializeOwned>(kind: &'static str, supported: u32, bytes: &[u8]) -> Result<T, ArtifactError> {
    let header_err = |reason: &str| ArtifactError::Header { expected: kind, reason: reason.to_string() };
    let split = bytes.iter().position(|&b| b == b'\n').ok_or_else(|| header_err("no header line"))?;
    let header = std::str::from_utf8(&bytes[..split]).map_err(|_| header_err("header is not UTF-8"))?;
    let body = &bytes[split + 1..];
    let parts: Vec<&str> = header.split(' ').collect();
    let [magic, found_kind, version, sum] = parts[..] else {
        return Err(header_err("malformed header"));
    };
    if magic != MAGIC || found_kind != kind {
        return Err(header_err(&format!("found `{magic} {found_kind}`")));
    }
    let version: u32 =
        version.strip_prefix('v').and_then(|v| v.parse().ok()).ok_or_else(|| header_err("malformed version"))?;
    if version > supported {
        return Err(ArtifactError::Version { kind, found: version, supported });
    }
    let expected = sum.strip_prefix("sha256=").ok_or_else(|| header_err("missing checksum"))?;
    let found = digest(body);
    if expected != found {
        return Err(ArtifactError::Checksum { expected: expected.to_string(), found });
    }
    Ok(serde_json::from_slice(body)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_failures() {
        let bytes = encode("thing", 2, &vec![1, 2, 3]);
        let back: Vec<i32> = decode("thing", 2, &bytes).unwrap();
        assert_eq!(back, [1, 2, 3]);
        assert!(matches!(decode::<Vec<i32>>("thing", 1, &bytes), Err(ArtifactError::Version { found: 2, .. })));
        assert!(matches!(decode::<Vec<i32>>("other", 2, &bytes), Err(ArtifactError::Header { .. })));
        assert!(matches!(
            decode::<Vec<i32>>("thing", 2, &bytes[..bytes.len() - 2]),
            Err(ArtifactError::Checksum { .. })
        ));
    }
}
