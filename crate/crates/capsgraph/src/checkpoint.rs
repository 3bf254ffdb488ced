//! Binary checkpoints.
//!
//! Layout: the 8-byte magic `CAPSRT1\n`, a little-endian `u64` header length,
//! a UTF-8 JSON header (configs, label map, vocabulary fingerprint, block
//! directory), then every parameter block as little-endian `f32`. The
//! vocabulary sits next to the checkpoint as `<file>.vocab`.

use std::fs;
use std::path::{Path, PathBuf};

use capsgraph_core::{Model, ModelConfig, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::TrainConfig;
use crate::dataset::LabelMap;
use crate::error::{CheckpointError, Error, Result};
use crate::text::Vocabulary;

pub const MAGIC: &[u8; 8] = b"CAPSRT1\n";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset from the start of the data section.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabRef {
    pub size: usize,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub version: u32,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub labels: LabelMap,
    pub vocab: VocabRef,
    pub blocks: Vec<BlockEntry>,
}

/// Everything needed to evaluate a trained model on new text.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Model<f32>,
    pub train: TrainConfig,
    pub labels: LabelMap,
    pub vocab: Vocabulary,
}

pub fn vocab_path(path: &Path) -> PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(".vocab");
    PathBuf::from(name)
}

fn fingerprint(vocab: &Vocabulary) -> VocabRef {
    let digest = Sha256::digest(vocab.to_text().as_bytes());
    VocabRef {
        size: vocab.len(),
        sha256: digest.iter().map(|b| format!("{b:02x}")).collect(),
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut blocks = Vec::new();
        let mut data = Vec::new();
        for p in self.model.store().iter() {
            blocks.push(BlockEntry {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                offset: data.len(),
            });
            for x in p.value.data() {
                data.extend_from_slice(&x.to_le_bytes());
            }
        }
        let header = Header {
            version: VERSION,
            model: self.model.config().clone(),
            train: self.train.clone(),
            labels: self.labels.clone(),
            vocab: fingerprint(&self.vocab),
            blocks,
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(16 + json.len() + data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&data);
        out
    }

    /// Parses checkpoint bytes against an already loaded vocabulary.
    pub fn from_bytes(bytes: &[u8], vocab: Vocabulary) -> Result<Self, CheckpointError> {
        let header = read_header(bytes)?;
        let data = &bytes[16 + header_len(bytes)?..];
        if fingerprint(&vocab) != header.vocab {
            return Err(CheckpointError::Vocabulary(format!(
                "expected {} entries with sha256 {}",
                header.vocab.size, header.vocab.sha256
            )));
        }
        let mut model = Model::<f32>::new(header.model.clone()).map_err(|e| CheckpointError::Header(e.to_string()))?;
        let expected = header.model.block_shapes();
        if let Some(extra) = header.blocks.iter().find(|b| !expected.iter().any(|(n, _)| *n == b.name)) {
            return Err(CheckpointError::ShapeMismatch {
                block: extra.name.clone(),
                detail: "not part of this architecture".into(),
            });
        }
        for (name, shape) in expected {
            let entry = header.blocks.iter().find(|b| b.name == name).ok_or_else(|| CheckpointError::ShapeMismatch {
                block: name.clone(),
                detail: "missing".into(),
            })?;
            if entry.shape != shape {
                return Err(CheckpointError::ShapeMismatch {
                    block: name,
                    detail: format!("file has {:?}, model expects {:?}", entry.shape, shape),
                });
            }
            let numel: usize = shape.iter().product();
            let raw = entry
                .offset
                .checked_add(numel * 4)
                .and_then(|end| data.get(entry.offset..end))
                .ok_or_else(|| CheckpointError::Truncated(format!("block `{name}` runs past the end of the file")))?;
            let values = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            let id = model.store().find(&name).expect("block registered");
            model.store_mut().get_mut(id).value = Tensor::new(shape, values).expect("length checked");
        }
        Ok(Self {
            model,
            train: header.train,
            labels: header.labels,
            vocab,
        })
    }

    /// Writes the checkpoint and its vocabulary sidecar.
    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))?;
        self.vocab.save(&vocab_path(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let vocab = Vocabulary::load(&vocab_path(path))?;
        Ok(Self::from_bytes(&bytes, vocab)?)
    }
}

fn header_len(bytes: &[u8]) -> Result<usize, CheckpointError> {
    let len = bytes
        .get(8..16)
        .ok_or_else(|| CheckpointError::Truncated("missing header length".into()))?;
    let len = u64::from_le_bytes(len.try_into().unwrap()) as usize;
    if bytes.len() - 16 < len {
        return Err(CheckpointError::Truncated(format!("header needs {len} bytes")));
    }
    Ok(len)
}

/// Validates the magic and version and parses the JSON header.
pub fn read_header(bytes: &[u8]) -> Result<Header, CheckpointError> {
    if bytes.len() < MAGIC.len() {
        return Err(if MAGIC.starts_with(bytes) {
            CheckpointError::Truncated("shorter than the magic".into())
        } else {
            CheckpointError::BadMagic
        });
    }
    if &bytes[..8] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let len = header_len(bytes)?;
    let value: serde_json::Value =
        serde_json::from_slice(&bytes[16..16 + len]).map_err(|e| CheckpointError::Header(e.to_string()))?;
    let version = value.get("version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
    if version != VERSION {
        return Err(CheckpointError::Version {
            found: version,
            expected: VERSION,
        });
    }
    serde_json::from_value(value).map_err(|e| CheckpointError::Header(e.to_string()))
}

/// Replaces the JSON header, keeping the data section; for tooling and tests.
pub fn rewrite_header(bytes: &[u8], edit: impl FnOnce(&mut serde_json::Value)) -> Result<Vec<u8>, CheckpointError> {
    let len = header_len(bytes)?;
    let mut value: serde_json::Value =
        serde_json::from_slice(&bytes[16..16 + len]).map_err(|e| CheckpointError::Header(e.to_string()))?;
    edit(&mut value);
    let json = serde_json::to_vec(&value).expect("json value serializes");
    let mut out = bytes[..8].to_vec();
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&bytes[16 + len..]);
    Ok(out)
}
