//! Checkpoint container.
//!
//! ```text
//! VQLAB-CHECKPOINT\n
//! <manifest length in bytes>\n
//! <JSON manifest>\n
//! <little-endian f64 payload of every array, in manifest order>
//! ```
//!
//! The manifest holds the version tag, the training configuration, the step,
//! the sampling-stream position and each array's name, shape and dtype.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::TrainConfig;
use crate::autograd::Tensor;
use crate::error::{Error, Result};
use crate::heads::Head;

pub const CHECKPOINT_VERSION: &str = "vqlab-checkpoint/1";
const MAGIC: &str = "VQLAB-CHECKPOINT";
/// Prefix of optimizer momentum arrays.
pub const MOMENTUM_PREFIX: &str = "momentum/";

/// Position in the seeded training stream: the next unread item is
/// `cursor` of epoch `epoch`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct StreamState {
    pub seed: u64,
    pub epoch: u64,
    pub cursor: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub feature_dim: usize,
    pub step: usize,
    pub stream: StreamState,
    /// Head parameters, then momentum buffers under [`MOMENTUM_PREFIX`].
    pub arrays: Vec<(String, Tensor)>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ArrayMeta {
    name: String,
    shape: Vec<usize>,
    dtype: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    version: String,
    feature_dim: usize,
    step: usize,
    stream: StreamState,
    config: TrainConfig,
    arrays: Vec<ArrayMeta>,
}

impl Checkpoint {
    /// Rebuilds the head described by the checkpoint with its parameters.
    pub fn head(&self) -> Result<Head> {
        let mut head = Head::new(self.config.effective_head(), self.feature_dim)?;
        head.params_mut()
            .load_from(|name| self.array(name))
            .map_err(Error::CorruptCheckpoint)?;
        Ok(head)
    }

    pub fn array(&self, name: &str) -> Option<&Tensor> {
        self.arrays.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let manifest = Manifest {
            version: CHECKPOINT_VERSION.to_string(),
            feature_dim: self.feature_dim,
            step: self.step,
            stream: self.stream,
            config: self.config.clone(),
            arrays: self
                .arrays
                .iter()
                .map(|(name, t)| ArrayMeta {
                    name: name.clone(),
                    shape: t.shape.clone(),
                    dtype: "f64".to_string(),
                })
                .collect(),
        };
        let json = serde_json::to_string(&manifest).map_err(|e| Error::CorruptCheckpoint(e.to_string()))?;
        let mut out = format!("{MAGIC}\n{}\n{json}\n", json.len()).into_bytes();
        for (_, t) in &self.arrays {
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |m: &str| Error::CorruptCheckpoint(m.to_string());
        let rest = bytes
            .strip_prefix(format!("{MAGIC}\n").as_bytes())
            .ok_or_else(|| corrupt("missing checkpoint header"))?;
        let nl = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| corrupt("missing manifest length"))?;
        let len: usize = std::str::from_utf8(&rest[..nl])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| corrupt("unreadable manifest length"))?;
        let body = &rest[nl + 1..];
        if body.len() < len + 1 || body[len] != b'\n' {
            return Err(corrupt("truncated manifest"));
        }
        let raw: serde_json::Value =
            serde_json::from_slice(&body[..len]).map_err(|e| Error::CorruptCheckpoint(format!("manifest: {e}")))?;
        let found = raw.get("version").and_then(|v| v.as_str()).unwrap_or("");
        if found != CHECKPOINT_VERSION {
            return Err(Error::CheckpointVersion {
                found: found.to_string(),
                expected: CHECKPOINT_VERSION.to_string(),
            });
        }
        let manifest: Manifest =
            serde_json::from_value(raw).map_err(|e| Error::CorruptCheckpoint(format!("manifest: {e}")))?;
        let payload = &body[len + 1..];
        let total: usize = manifest.arrays.iter().map(|a| a.shape.iter().product::<usize>()).sum();
        if payload.len() != total * 8 {
            return Err(Error::CorruptCheckpoint(format!(
                "payload has {} bytes, manifest describes {}",
                payload.len(),
                total * 8
            )));
        }
        let mut values = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")));
        let mut arrays = Vec::with_capacity(manifest.arrays.len());
        for meta in manifest.arrays {
            if meta.dtype != "f64" {
                return Err(Error::CorruptCheckpoint(format!("array {}: unsupported dtype {}", meta.name, meta.dtype)));
            }
            let n = meta.shape.iter().product();
            let data = values.by_ref().take(n).collect();
            arrays.push((meta.name, Tensor::new(meta.shape, data)));
        }
        Ok(Self {
            config: manifest.config,
            feature_dim: manifest.feature_dim,
            step: manifest.step,
            stream: manifest.stream,
            arrays,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}
