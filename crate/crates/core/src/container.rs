//! The `SVEAD1` binary container for trained artifacts.
//!
//! Layout (all integers little-endian):
//!
//! | bytes    | content                                                     |
//! |----------|-------------------------------------------------------------|
//! | 6        | magic `SVEAD1`                                              |
//! | 1        | kind: 1 vae, 2 classifier, 3 stacking, 4 voting, 5 pipeline |
//! | 8        | payload length `n` (u64)                                    |
//! | n        | payload: UTF-8 JSON of the artifact                         |
//! | 32       | SHA-256 of the payload                                      |

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 6] = b"SVEAD1";
const HEADER: usize = 6 + 1 + 8;
const DIGEST: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum ArtifactKind {
    Vae = 1,
    Classifier = 2,
    Stacking = 3,
    Voting = 4,
    Pipeline = 5,
}

impl ArtifactKind {
    fn from_byte(b: u8) -> Result<Self> {
        Ok(match b {
            1 => Self::Vae,
            2 => Self::Classifier,
            3 => Self::Stacking,
            4 => Self::Voting,
            5 => Self::Pipeline,
            other => return Err(Error::Format(format!("unknown artifact kind {other}"))),
        })
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn encode<T: Serialize>(kind: ArtifactKind, value: &T) -> Result<Vec<u8>> {
    let payload = serde_json::to_vec(value)?;
    let mut out = Vec::with_capacity(HEADER + payload.len() + DIGEST);
    out.extend_from_slice(MAGIC);
    out.push(kind as u8);
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(&payload);
    out.extend_from_slice(&Sha256::digest(&payload));
    Ok(out)
}

/// Kind byte and verified payload.
pub fn open(bytes: &[u8]) -> Result<(ArtifactKind, &[u8])> {
    if bytes.len() < HEADER + DIGEST || &bytes[..6] != MAGIC {
        return Err(Error::Format("not an SVEAD1 container".into()));
    }
    let kind = ArtifactKind::from_byte(bytes[6])?;
    let len = u64::from_le_bytes(bytes[7..HEADER].try_into().expect("8 bytes"));
    let len = usize::try_from(len).map_err(|_| Error::Format("payload length overflows".into()))?;
    if bytes.len() != HEADER + len + DIGEST {
        return Err(Error::Format(format!(
            "container is {} bytes, header declares {}",
            bytes.len(),
            HEADER + len.saturating_add(DIGEST)
        )));
    }
    let payload = &bytes[HEADER..HEADER + len];
    if Sha256::digest(payload).as_slice() != &bytes[HEADER + len..] {
        return Err(Error::Format("payload digest mismatch".into()));
    }
    Ok((kind, payload))
}

pub fn decode<T: DeserializeOwned>(bytes: &[u8], expected: ArtifactKind) -> Result<T> {
    let (kind, payload) = open(bytes)?;
    if kind != expected {
        return Err(Error::Format(format!("expected a {expected:?} artifact, found {kind:?}")));
    }
    Ok(serde_json::from_slice(payload)?)
}

pub fn save<T: Serialize>(path: impl AsRef<Path>, kind: ArtifactKind, value: &T) -> Result<()> {
    std::fs::write(path, encode(kind, value)?)?;
    Ok(())
}

pub fn load<T: DeserializeOwned>(path: impl AsRef<Path>, expected: ArtifactKind) -> Result<T> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    decode(&std::fs::read(path)?, expected)
}
