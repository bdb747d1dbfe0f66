//! Checkpoint persistence.
//!
//! Layout: magic `DPTT`, format version (u16 LE), header length (u32 LE),
//! a UTF-8 JSON header (model config, PEFT state, parameter manifest with
//! name/shape/offset/trainable), the tensor payload as little-endian f32
//! in manifest order, and a trailing FNV-1a 64-bit digest over the payload
//! bytes. Round trips are bit-exact.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Model, ModelConfig, Parameter};
use crate::peft::PeftState;
use crate::rng::fnv1a64;
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"DPTT";
pub const FORMAT_VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint: bad magic bytes")]
    BadMagic,
    #[error("unsupported checkpoint format version {found} (expected {expected})")]
    VersionMismatch { found: u16, expected: u16 },
    #[error("checkpoint truncated: {context}")]
    Truncated { context: &'static str },
    #[error("payload digest mismatch: stored {stored:#018x}, computed {computed:#018x}")]
    DigestMismatch { stored: u64, computed: u64 },
    #[error("header: {0}")]
    Header(String),
    #[error("manifest inconsistent: {0}")]
    Manifest(String),
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    peft: PeftState,
    manifest: Vec<ManifestEntry>,
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: [usize; 2],
    /// Offset into the payload, in f32 elements.
    offset: u64,
    trainable: bool,
}

/// Serializes the model. Deterministic: manifest order is parameter-name
/// order and the header JSON has a fixed field layout.
pub fn save(model: &Model, path: &Path) -> Result<(), CheckpointError> {
    let mut manifest = Vec::new();
    let mut offset = 0u64;
    for p in model.parameters() {
        manifest.push(ManifestEntry {
            name: p.name.clone(),
            shape: p.tensor.shape(),
            offset,
            trainable: p.trainable,
        });
        offset += p.tensor.len() as u64;
    }
    let header = Header {
        config: model.config().clone(),
        peft: model.peft().clone(),
        manifest,
    };
    let header_bytes =
        serde_json::to_vec(&header).map_err(|e| CheckpointError::Header(e.to_string()))?;

    let mut payload = Vec::with_capacity(offset as usize * 4);
    for p in model.parameters() {
        for &v in p.tensor.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = fnv1a64(&payload);

    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(header_bytes.len() as u32).to_le_bytes())?;
    w.write_all(&header_bytes)?;
    w.write_all(&payload)?;
    w.write_all(&digest.to_le_bytes())?;
    w.flush()?;
    Ok(())
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], context: &'static str) -> Result<(), CheckpointError> {
    r.read_exact(buf).map_err(|_| CheckpointError::Truncated { context })
}

/// Restores a model, verifying magic, version, manifest consistency and
/// the payload digest.
pub fn load(path: &Path) -> Result<Model, CheckpointError> {
    let mut r = BufReader::new(File::open(path)?);

    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic, "magic")?;
    if magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let mut v2 = [0u8; 2];
    read_exact(&mut r, &mut v2, "version")?;
    let version = u16::from_le_bytes(v2);
    if version != FORMAT_VERSION {
        return Err(CheckpointError::VersionMismatch { found: version, expected: FORMAT_VERSION });
    }
    let mut l4 = [0u8; 4];
    read_exact(&mut r, &mut l4, "header length")?;
    let header_len = u32::from_le_bytes(l4) as usize;
    let mut header_bytes = vec![0u8; header_len];
    read_exact(&mut r, &mut header_bytes, "header")?;
    let header: Header =
        serde_json::from_slice(&header_bytes).map_err(|e| CheckpointError::Header(e.to_string()))?;

    let total_elems: u64 = header.manifest.iter().map(|m| (m.shape[0] * m.shape[1]) as u64).sum();
    let mut payload = vec![0u8; total_elems as usize * 4];
    read_exact(&mut r, &mut payload, "tensor payload")?;
    let mut d8 = [0u8; 8];
    read_exact(&mut r, &mut d8, "digest")?;
    let stored = u64::from_le_bytes(d8);
    let computed = fnv1a64(&payload);
    if stored != computed {
        return Err(CheckpointError::DigestMismatch { stored, computed });
    }

    let mut params = BTreeMap::new();
    for entry in &header.manifest {
        let n = entry.shape[0] * entry.shape[1];
        let start = entry.offset as usize * 4;
        let end = start + n * 4;
        if end > payload.len() {
            return Err(CheckpointError::Manifest(format!(
                "`{}` extends past payload end",
                entry.name
            )));
        }
        let data: Vec<f32> = payload[start..end]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        params.insert(
            entry.name.clone(),
            Parameter {
                name: entry.name.clone(),
                tensor: Tensor::new(entry.shape[0], entry.shape[1], data),
                trainable: entry.trainable,
            },
        );
    }
    if params.len() != header.manifest.len() {
        return Err(CheckpointError::Manifest("duplicate parameter names".to_string()));
    }
    header
        .config
        .validate()
        .map_err(|e| CheckpointError::Manifest(e.to_string()))?;
    Ok(Model::from_parts(header.config, params, header.peft))
}

/// FNV-1a digest of an entire file, for determinism checks.
pub fn file_digest(path: &Path) -> Result<u64, CheckpointError> {
    let bytes = std::fs::read(path)?;
    Ok(fnv1a64(&bytes))
}
