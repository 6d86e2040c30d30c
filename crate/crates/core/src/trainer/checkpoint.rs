//! Single-file checkpoint container.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` header length, a JSON
//! header, the tensor payload as little-endian `f64` in header order, and a
//! SHA-256 digest of everything before it. All integers are little-endian.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::optim::AdamW;
use crate::corpus::Vocabulary;
use crate::encoders::{is_lm_param, Model};
use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::tensor::{Matrix, ParamStore};

pub const MAGIC: &[u8; 8] = b"KGALIGN\0";
pub const FORMAT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArtifactKind {
    /// Everything needed to resume training.
    Full,
    /// Text encoder only.
    Lm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Role {
    Param,
    AdamM,
    AdamV,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    role: Role,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    kind: ArtifactKind,
    step: usize,
    model: Model,
    config: serde_json::Value,
    config_hash: String,
    vocab: Vocabulary,
    dtype: String,
    tensors: Vec<TensorEntry>,
    adam_counts: Option<BTreeMap<String, u64>>,
    rng: Option<RngState>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub kind: ArtifactKind,
    /// Completed optimizer steps.
    pub step: usize,
    pub model: Model,
    /// Snapshot of the run configuration that produced the parameters.
    pub config: serde_json::Value,
    pub config_hash: String,
    pub vocab: Vocabulary,
    pub params: ParamStore,
    pub optimizer: Option<AdamW>,
    pub rng: Option<RngState>,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn integrity(msg: impl Into<String>) -> Error {
    Error::Integrity(msg.into())
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut tensors = Vec::new();
        let mut payload: Vec<&Matrix> = Vec::new();
        let mut add = |role: Role, store: &'_ ParamStore| {
            for (name, m) in store.iter() {
                tensors.push(TensorEntry {
                    name: name.clone(),
                    role,
                    rows: m.nrows(),
                    cols: m.ncols(),
                });
            }
        };
        add(Role::Param, &self.params);
        if let Some(opt) = &self.optimizer {
            add(Role::AdamM, &opt.m);
            add(Role::AdamV, &opt.v);
        }
        payload.extend(self.params.iter().map(|(_, m)| m));
        if let Some(opt) = &self.optimizer {
            payload.extend(opt.m.iter().map(|(_, m)| m));
            payload.extend(opt.v.iter().map(|(_, m)| m));
        }
        let header = Header {
            kind: self.kind,
            step: self.step,
            model: self.model.clone(),
            config: self.config.clone(),
            config_hash: self.config_hash.clone(),
            vocab: self.vocab.clone(),
            dtype: "f64le".into(),
            tensors,
            adam_counts: self.optimizer.as_ref().map(|o| o.counts.clone()),
            rng: self.rng.clone(),
        };
        let header = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(header.len() + 64);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for m in payload {
            for x in m.iter() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 12 + DIGEST_LEN || &bytes[..MAGIC.len()] != MAGIC {
            return Err(integrity("not a checkpoint file"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
        if Sha256::digest(body).as_slice() != digest {
            return Err(integrity("checksum mismatch"));
        }
        let version = u32::from_le_bytes(body[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "format version {version} is not supported (expected {FORMAT_VERSION})"
            )));
        }
        let hlen = u64::from_le_bytes(body[12..20].try_into().expect("8 bytes")) as usize;
        let header_end = 20usize
            .checked_add(hlen)
            .filter(|&e| e <= body.len())
            .ok_or_else(|| integrity("header length exceeds file"))?;
        let header: Header = serde_json::from_slice(&body[20..header_end])
            .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
        if header.dtype != "f64le" {
            return Err(Error::Checkpoint(format!("unsupported dtype {}", header.dtype)));
        }

        let mut cursor = header_end;
        let mut params = ParamStore::new();
        let (mut m, mut v) = (ParamStore::new(), ParamStore::new());
        for t in &header.tensors {
            let n = t.rows * t.cols;
            let end = cursor + n * 8;
            if end > body.len() {
                return Err(integrity(format!("tensor `{}` runs past the payload", t.name)));
            }
            let data: Vec<f64> = body[cursor..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            cursor = end;
            let mat = Matrix::from_shape_vec((t.rows, t.cols), data).expect("length matches shape");
            match t.role {
                Role::Param => params.insert(t.name.clone(), mat),
                Role::AdamM => m.insert(t.name.clone(), mat),
                Role::AdamV => v.insert(t.name.clone(), mat),
            }
        }
        if cursor != body.len() {
            return Err(integrity("trailing bytes after payload"));
        }
        let optimizer = header.adam_counts.map(|counts| AdamW { m, v, counts });
        Ok(Self {
            kind: header.kind,
            step: header.step,
            model: header.model,
            config: header.config,
            config_hash: header.config_hash,
            vocab: header.vocab,
            params,
            optimizer,
            rng: header.rng,
        })
    }

    /// Writes through a temporary file so an interrupted save never
    /// clobbers the previous checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Text-encoder parameters, vocabulary and configuration only.
    pub fn export_lm(&self) -> Checkpoint {
        Checkpoint {
            kind: ArtifactKind::Lm,
            step: self.step,
            model: self.model.clone(),
            config: self.config.clone(),
            config_hash: self.config_hash.clone(),
            vocab: self.vocab.clone(),
            params: self.params.filtered(is_lm_param),
            optimizer: None,
            rng: None,
        }
    }
}

/// Loads a checkpoint and writes its LM-only export next to `out`.
pub fn export_lm(checkpoint: &Path, out: &Path) -> Result<Checkpoint> {
    let lm = Checkpoint::load(checkpoint)?.export_lm();
    lm.save(out)?;
    Ok(lm)
}

/// Short identifier of a checkpoint file: the leading hex digits of its
/// embedded digest.
pub fn checkpoint_id(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < DIGEST_LEN {
        return Err(integrity("not a checkpoint file"));
    }
    Ok(hex(&bytes[bytes.len() - DIGEST_LEN..])[..16].to_string())
}

/// Hex SHA-256 of arbitrary bytes.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}
