//! `UAPF1` tensor container shared by victim and generator checkpoints.
//!
//! Layout: the five magic bytes `UAPF1`, a little-endian `u64` manifest
//! length, the JSON manifest, then every tensor as little-endian `f64` in
//! manifest order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const MAGIC: &[u8; 5] = b"UAPF1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// byte offset into the payload
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    /// `"victim"` or `"generator"`
    pub kind: String,
    pub config: serde_json::Value,
    pub metadata: serde_json::Value,
    pub seed: u64,
    pub tensors: Vec<TensorEntry>,
    pub payload_bytes: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub config: serde_json::Value,
    pub metadata: serde_json::Value,
    pub seed: u64,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut offset = 0;
        for (name, t) in &self.tensors {
            entries.push(TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
            });
            offset += 8 * t.len();
        }
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            kind: self.kind.clone(),
            config: self.config.clone(),
            metadata: self.metadata.clone(),
            seed: self.seed,
            tensors: entries,
            payload_bytes: offset,
        };
        let json = serde_json::to_vec(&manifest)?;
        let mut out = Vec::with_capacity(MAGIC.len() + 8 + json.len() + offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() || bytes[..4] != MAGIC[..4] {
            return Err(Error::BadMagic);
        }
        if bytes[4] != MAGIC[4] {
            let found = (bytes[4] as char).to_digit(10).unwrap_or(u32::MAX);
            return Err(Error::VersionMismatch {
                found,
                expected: FORMAT_VERSION,
            });
        }
        let header = MAGIC.len() + 8;
        if bytes.len() < header {
            return Err(Error::TruncatedPayload {
                expected: header,
                found: bytes.len(),
            });
        }
        let mlen = u64::from_le_bytes(bytes[MAGIC.len()..header].try_into().unwrap()) as usize;
        let body = header
            .checked_add(mlen)
            .filter(|&e| e <= bytes.len())
            .ok_or(Error::TruncatedPayload {
                expected: header.saturating_add(mlen),
                found: bytes.len(),
            })?;
        let manifest: Manifest = serde_json::from_slice(&bytes[header..body])?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(Error::VersionMismatch {
                found: manifest.format_version,
                expected: FORMAT_VERSION,
            });
        }
        let payload = &bytes[body..];
        let mut expected_offset = 0;
        for e in &manifest.tensors {
            if e.offset != expected_offset {
                return Err(Error::ManifestMismatch(format!(
                    "tensor {} offset {} != {expected_offset}",
                    e.name, e.offset
                )));
            }
            expected_offset += 8 * e.shape.iter().product::<usize>();
        }
        if expected_offset != manifest.payload_bytes {
            return Err(Error::ManifestMismatch(format!(
                "shapes describe {expected_offset} bytes, manifest declares {}",
                manifest.payload_bytes
            )));
        }
        if payload.len() < manifest.payload_bytes {
            return Err(Error::TruncatedPayload {
                expected: manifest.payload_bytes,
                found: payload.len(),
            });
        }
        if payload.len() > manifest.payload_bytes {
            return Err(Error::ManifestMismatch(format!(
                "payload holds {} bytes, manifest declares {}",
                payload.len(),
                manifest.payload_bytes
            )));
        }
        let tensors = manifest
            .tensors
            .iter()
            .map(|e| {
                let n: usize = e.shape.iter().product();
                let data = payload[e.offset..e.offset + 8 * n]
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                Ok((e.name.clone(), Tensor::new(e.shape.clone(), data)?))
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            kind: manifest.kind,
            config: manifest.config,
            metadata: manifest.metadata,
            seed: manifest.seed,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind == kind {
            Ok(())
        } else {
            Err(Error::ManifestMismatch(format!(
                "checkpoint holds a {}, expected a {kind}",
                self.kind
            )))
        }
    }

    /// Copy stored tensors into `targets` by name; every target must be
    /// present with a matching shape.
    pub fn restore<'a>(&self, targets: impl IntoIterator<Item = (&'a str, &'a mut [f64], &'a [usize])>) -> Result<()> {
        for (name, dst, shape) in targets {
            let (_, t) = self
                .tensors
                .iter()
                .find(|(n, _)| n == name)
                .ok_or_else(|| Error::ManifestMismatch(format!("tensor {name} missing")))?;
            if t.shape() != shape {
                return Err(Error::ManifestMismatch(format!(
                    "tensor {name} has shape {:?}, model expects {shape:?}",
                    t.shape()
                )));
            }
            dst.copy_from_slice(t.data());
        }
        Ok(())
    }
}
