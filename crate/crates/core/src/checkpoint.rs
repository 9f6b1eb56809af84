//! Single-file checkpoints.
//!
//! ```text
//! RSRNET-CKPT <header bytes>\n
//! <TOML header: version, step, blob_sha256, [metadata], [config], [[params]]>
//! <blob: every parameter as little-endian f32, in manifest order>
//! ```
//!
//! Each manifest entry gives the parameter name, shape, byte offset into
//! the blob and byte length.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &str = "RSRNET-CKPT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    version: u32,
    step: u64,
    blob_sha256: String,
    metadata: BTreeMap<String, String>,
    config: ModelConfig,
    params: Vec<ManifestEntry>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub step: u64,
    pub metadata: BTreeMap<String, String>,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn corrupt(field: &str, reason: impl Into<String>) -> Error {
    Error::Checkpoint {
        field: field.to_string(),
        reason: reason.into(),
    }
}

impl Checkpoint {
    pub fn from_model(model: &Model, step: u64, metadata: BTreeMap<String, String>) -> Self {
        Checkpoint {
            config: model.config.clone(),
            params: model.store.clone(),
            step,
            metadata,
        }
    }

    /// Manifest entries in storage order.
    pub fn manifest(&self) -> Vec<ManifestEntry> {
        let mut offset = 0;
        self.params
            .iter()
            .map(|(name, t)| {
                let len = t.numel() * 4;
                let e = ManifestEntry {
                    name: name.to_string(),
                    shape: t.shape().to_vec(),
                    offset,
                    len,
                };
                offset += len;
                e
            })
            .collect()
    }

    /// Rebuilds the model. With `requested`, the architecture must match the
    /// stored config; training fields are taken from `requested`.
    pub fn into_model(self, requested: Option<&ModelConfig>) -> Result<Model> {
        let cfg = match requested {
            Some(r) => {
                self.config.check_compatible(r)?;
                r.clone()
            }
            None => self.config.clone(),
        };
        Model::from_store(&cfg, self.params)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut blob = Vec::with_capacity(self.params.total_count() * 4);
        for (_, t) in self.params.iter() {
            for v in t.data() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
        let header = Header {
            version: CHECKPOINT_VERSION,
            step: self.step,
            blob_sha256: hex(&Sha256::digest(&blob)),
            metadata: self.metadata.clone(),
            config: self.config.clone(),
            params: self.manifest(),
        };
        let text = toml::to_string(&header).map_err(|e| corrupt("header", e.to_string()))?;
        let mut out = format!("{MAGIC} {}\n", text.len()).into_bytes();
        out.extend_from_slice(text.as_bytes());
        out.extend_from_slice(&blob);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let nl = bytes.iter().position(|&b| b == b'\n').ok_or_else(|| corrupt("magic", "no header line"))?;
        let first = std::str::from_utf8(&bytes[..nl]).map_err(|_| corrupt("magic", "not text"))?;
        let header_len: usize = first
            .strip_prefix(MAGIC)
            .and_then(|r| r.trim().parse().ok())
            .ok_or_else(|| corrupt("magic", format!("expected `{MAGIC} <len>`, found `{first}`")))?;
        let start = nl + 1;
        let text = bytes
            .get(start..start + header_len)
            .ok_or_else(|| corrupt("header", "file shorter than header"))?;
        let text = std::str::from_utf8(text).map_err(|_| corrupt("header", "not UTF-8"))?;
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| corrupt("header", e.to_string()))?;
        match table.get("version").and_then(|v| v.as_integer()) {
            Some(v) if v == CHECKPOINT_VERSION as i64 => {}
            Some(v) => return Err(corrupt("version", format!("found {v}, supported {CHECKPOINT_VERSION}"))),
            None => return Err(corrupt("version", "missing")),
        }
        let header: Header = toml::from_str(text).map_err(|e| corrupt("header", e.to_string()))?;
        header.config.validate()?;
        let blob = &bytes[start + header_len..];
        let mut params = ParamStore::new();
        for e in &header.params {
            let numel: usize = e.shape.iter().product();
            if e.len != numel * 4 {
                return Err(corrupt(&e.name, format!("length {} does not match shape {:?}", e.len, e.shape)));
            }
            let raw = blob
                .get(e.offset..e.offset + e.len)
                .ok_or_else(|| corrupt(&e.name, "parameter blob missing or truncated"))?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            if params.id(&e.name).is_some() {
                return Err(corrupt(&e.name, "duplicate parameter"));
            }
            params.add(e.name.clone(), Tensor::from_vec(&e.shape, data));
        }
        let expected_len: usize = header.params.iter().map(|e| e.len).sum();
        if blob.len() != expected_len {
            return Err(corrupt("blob", format!("{} bytes, manifest lists {expected_len}", blob.len())));
        }
        if hex(&Sha256::digest(blob)) != header.blob_sha256 {
            return Err(corrupt("blob_sha256", "parameter data does not match its hash"));
        }
        Ok(Checkpoint {
            config: header.config,
            params,
            step: header.step,
            metadata: header.metadata,
        })
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, ckpt.to_bytes()?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}

/// SHA-256 of a file, as lowercase hex.
pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex(&Sha256::digest(&bytes)))
}
