//! `OCLCKPT1` files: 8-byte magic, a little-endian `u64` manifest length, the
//! UTF-8 JSON manifest, then the raw little-endian payload.

use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{OclError, Result};
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 8] = b"OCLCKPT1";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    /// Byte offset into the payload.
    pub offset: u64,
}

/// Enough of a ChaCha stream to continue it exactly.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    /// `u128` word position, as a decimal string.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed().iter().map(|b| format!("{b:02x}")).collect(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        use rand::SeedableRng;
        let bad = |reason: &str| OclError::format("checkpoint rng state", reason.to_string());
        if self.seed.len() != 64 {
            return Err(bad("seed must be 32 hex bytes"));
        }
        let mut seed = [0u8; 32];
        for (i, byte) in seed.iter_mut().enumerate() {
            *byte = u8::from_str_radix(&self.seed[2 * i..2 * i + 2], 16).map_err(|_| bad("seed is not hex"))?;
        }
        let word_pos: u128 = self.word_pos.parse().map_err(|_| bad("word_pos is not an integer"))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(word_pos);
        Ok(rng)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config_hash: String,
    /// Optimizer steps completed.
    pub step: u64,
    pub rng: RngState,
    pub config: RunConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Manifest {
    meta: CheckpointMeta,
    arrays: Vec<ArrayEntry>,
    payload_bytes: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub meta: CheckpointMeta,
    pub arrays: Vec<NamedArray<T>>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn get(&self, name: &str) -> Option<&NamedArray<T>> {
        self.arrays.iter().find(|a| a.name == name)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = Vec::with_capacity(self.arrays.len());
        let mut payload = Vec::new();
        for a in &self.arrays {
            if a.shape.iter().product::<usize>() != a.data.len() {
                return Err(OclError::format(
                    format!("checkpoint array {}", a.name),
                    format!("shape {:?} does not hold {} values", a.shape, a.data.len()),
                ));
            }
            entries.push(ArrayEntry {
                name: a.name.clone(),
                dtype: T::NAME.to_string(),
                shape: a.shape.clone(),
                offset: payload.len() as u64,
            });
            for &v in &a.data {
                v.write_le(&mut payload);
            }
        }
        let manifest = Manifest {
            meta: self.meta.clone(),
            arrays: entries,
            payload_bytes: payload.len() as u64,
        };
        let json = serde_json::to_vec(&manifest)?;
        let mut out = Vec::with_capacity(16 + json.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |reason: String| OclError::format("checkpoint", reason);
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("missing OCLCKPT1 magic".into()));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = &bytes[16..];
        if len > body.len() {
            return Err(bad(format!("manifest length {len} exceeds file size")));
        }
        let manifest: Manifest = serde_json::from_slice(&body[..len])
            .map_err(|e| bad(format!("manifest is not valid JSON: {e}")))?;
        let payload = &body[len..];
        if payload.len() as u64 != manifest.payload_bytes {
            return Err(bad(format!(
                "payload is {} bytes, manifest declares {}",
                payload.len(),
                manifest.payload_bytes
            )));
        }
        let mut arrays = Vec::with_capacity(manifest.arrays.len());
        for e in &manifest.arrays {
            if e.dtype != T::NAME {
                return Err(bad(format!("array {} is {}, expected {}", e.name, e.dtype, T::NAME)));
            }
            let count: usize = e.shape.iter().product();
            let start = e.offset as usize;
            let end = start + count * T::BYTES;
            if end > payload.len() {
                return Err(bad(format!("array {} runs past the payload", e.name)));
            }
            let data = payload[start..end].chunks_exact(T::BYTES).map(T::read_le).collect();
            arrays.push(NamedArray {
                name: e.name.clone(),
                shape: e.shape.clone(),
                data,
            });
        }
        Ok(Self {
            meta: manifest.meta,
            arrays,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                std::fs::create_dir_all(dir).map_err(|e| OclError::io(dir, e))?;
            }
        }
        std::fs::write(path, self.to_bytes()?).map_err(|e| OclError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| OclError::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
