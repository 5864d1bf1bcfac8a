//! `AIRC` checkpoint container.
//!
//! Layout, all integers little-endian `u32`:
//!
//! ```text
//! "AIRC" | version | meta_len | meta JSON (UTF-8) | record_count |
//!   record_count x { name_len | name (UTF-8) | rank | dims[rank] | f32 LE data, row-major }
//! ```

use std::fs;
use std::path::Path;

use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::binio::{put_f32s, put_u32, ByteReader, Truncated};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"AIRC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("not an AIRC checkpoint (magic {0:?})")]
    BadMagic([u8; 4]),
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error(transparent)]
    Truncated(#[from] Truncated),
    #[error("invalid UTF-8 in record name at byte offset {0}")]
    BadName(usize),
    #[error("checkpoint metadata: {0}")]
    Metadata(#[from] serde_json::Error),
    #[error("record {name}: dims {shape:?} do not describe {len} values")]
    BadRecord {
        name: String,
        shape: Vec<usize>,
        len: usize,
    },
    #[error("{0} trailing bytes after last record")]
    TrailingBytes(usize),
    #[error("checkpoint is missing record {0}")]
    MissingRecord(String),
    #[error("checkpoint incompatible with model: {0}")]
    Incompatible(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub metadata: Value,
    pub records: Vec<Record>,
}

impl Checkpoint {
    pub fn new(metadata: Value) -> Self {
        Self {
            metadata,
            records: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, shape: &[usize], data: Vec<f32>) {
        self.records.push(Record {
            name: name.into(),
            shape: shape.to_vec(),
            data,
        });
    }

    pub fn get(&self, name: &str) -> Option<&Record> {
        self.records.iter().find(|r| r.name == name)
    }

    pub fn require(&self, name: &str) -> Result<&Record, CheckpointError> {
        self.get(name)
            .ok_or_else(|| CheckpointError::MissingRecord(name.to_string()))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, CheckpointError> {
        let meta = serde_json::to_vec(&self.metadata)?;
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        put_u32(&mut out, CHECKPOINT_VERSION);
        put_u32(&mut out, meta.len() as u32);
        out.extend_from_slice(&meta);
        put_u32(&mut out, self.records.len() as u32);
        for r in &self.records {
            put_u32(&mut out, r.name.len() as u32);
            out.extend_from_slice(r.name.as_bytes());
            put_u32(&mut out, r.shape.len() as u32);
            for &d in &r.shape {
                put_u32(&mut out, d as u32);
            }
            put_f32s(&mut out, r.data.iter().copied());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut rd = ByteReader::new(bytes);
        let magic = rd.take(4)?;
        if magic != CHECKPOINT_MAGIC {
            return Err(CheckpointError::BadMagic([
                magic[0], magic[1], magic[2], magic[3],
            ]));
        }
        let version = rd.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::UnsupportedVersion(version));
        }
        let meta_len = rd.u32()? as usize;
        let metadata: Value = serde_json::from_slice(rd.take(meta_len)?)?;
        let count = rd.u32()? as usize;
        let mut records = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let name_len = rd.u32()? as usize;
            let at = rd.offset();
            let name = std::str::from_utf8(rd.take(name_len)?)
                .map_err(|_| CheckpointError::BadName(at))?
                .to_string();
            let rank = rd.u32()? as usize;
            let mut shape = Vec::with_capacity(rank.min(16));
            for _ in 0..rank {
                shape.push(rd.u32()? as usize);
            }
            let numel = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
            let Some(numel) = numel.filter(|&n| n > 0) else {
                return Err(CheckpointError::BadRecord {
                    name,
                    shape,
                    len: 0,
                });
            };
            let data = rd.f32_vec(numel)?;
            records.push(Record { name, shape, data });
        }
        if rd.remaining() > 0 {
            return Err(CheckpointError::TrailingBytes(rd.remaining()));
        }
        Ok(Self { metadata, records })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CheckpointError> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Hex SHA-256 of the serialized bytes.
    pub fn digest(&self) -> Result<String, CheckpointError> {
        Ok(hex::encode(Sha256::digest(self.to_bytes()?)))
    }
}
