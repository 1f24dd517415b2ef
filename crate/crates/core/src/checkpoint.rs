//! Head checkpoints: `KDVH` magic, u32 version, u32 metadata length, JSON
//! metadata, then the five parameter blocks as little-endian f64, each
//! preceded by its u64 length.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::head::{HeadConfig, HeadParams};

pub const KDVH_MAGIC: &[u8; 4] = b"KDVH";
pub const KDVH_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a head checkpoint (bad magic)")]
    BadMagic,
    #[error("checkpoint version {found}, expected {KDVH_VERSION}")]
    VersionMismatch { found: u32 },
    #[error("checkpoint truncated")]
    Truncated,
    #[error("trailing bytes after checkpoint")]
    TrailingBytes,
    #[error("bad checkpoint metadata: {0}")]
    Metadata(String),
    #[error("checkpoint shapes disagree with metadata: {0}")]
    Shape(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Serialize, Deserialize)]
struct Meta {
    config: HeadConfig,
    expert_concepts: usize,
}

pub fn encode_checkpoint(params: &HeadParams) -> Vec<u8> {
    let meta = serde_json::to_vec(&Meta {
        config: params.config.clone(),
        expert_concepts: params.expert_concepts,
    })
    .expect("metadata serializes");
    let mut out = Vec::with_capacity(16 + meta.len() + 8 * params.blocks().iter().map(|b| b.len() + 1).sum::<usize>());
    out.extend_from_slice(KDVH_MAGIC);
    out.extend_from_slice(&KDVH_VERSION.to_le_bytes());
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(&meta);
    for block in params.blocks() {
        out.extend_from_slice(&(block.len() as u64).to_le_bytes());
        for v in block {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.buf.len() < n {
            return Err(CheckpointError::Truncated);
        }
        let (head, rest) = self.buf.split_at(n);
        self.buf = rest;
        Ok(head)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<HeadParams, CheckpointError> {
    let mut c = Cursor { buf: bytes };
    if c.take(4).map_err(|_| CheckpointError::BadMagic)? != KDVH_MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = c.u32()?;
    if version != KDVH_VERSION {
        return Err(CheckpointError::VersionMismatch { found: version });
    }
    let meta_len = c.u32()? as usize;
    let meta: Meta = serde_json::from_slice(c.take(meta_len)?).map_err(|e| CheckpointError::Metadata(e.to_string()))?;
    let mut params = HeadParams::init(&meta.config, meta.expert_concepts)
        .map_err(|e| CheckpointError::Metadata(e.to_string()))?;
    for block in params.blocks_mut() {
        let n = c.u64()?;
        if n != block.len() as u64 {
            return Err(CheckpointError::Shape(format!("block of {n} values, expected {}", block.len())));
        }
        let raw = c.take(block.len().checked_mul(8).ok_or(CheckpointError::Truncated)?)?;
        for (v, chunk) in block.iter_mut().zip(raw.chunks_exact(8)) {
            *v = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
        }
    }
    if !c.buf.is_empty() {
        return Err(CheckpointError::TrailingBytes);
    }
    Ok(params)
}

pub fn save_checkpoint(params: &HeadParams, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
    std::fs::write(path, encode_checkpoint(params))?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<HeadParams, CheckpointError> {
    decode_checkpoint(&std::fs::read(path)?)
}
