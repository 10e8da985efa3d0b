//! Versioned binary snapshot: a fixed header followed by a bincode payload.
//!
//! Header layout (little endian): magic `SSRECIDX`, version `u32`, table size `u64`,
//! fanout `u32`, block threshold `f64`, block count `u64`.

use std::fs;
use std::path::Path;

use super::CppseIndex;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"SSRECIDX";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 8 + 4 + 8 + 4 + 8 + 8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SnapshotHeader {
    pub version: u32,
    pub table_size: u64,
    pub fanout: u32,
    pub block_threshold: f64,
    pub blocks: u64,
}

impl SnapshotHeader {
    fn of(index: &CppseIndex) -> Self {
        Self {
            version: VERSION,
            table_size: index.config.hash.table_size,
            fanout: index.config.fanout as u32,
            block_threshold: index.config.block_threshold,
            blocks: index.blocks.len() as u64,
        }
    }

    fn write(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.extend_from_slice(&self.table_size.to_le_bytes());
        out.extend_from_slice(&self.fanout.to_le_bytes());
        out.extend_from_slice(&self.block_threshold.to_le_bytes());
        out.extend_from_slice(&self.blocks.to_le_bytes());
    }

    pub fn read(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN || &bytes[..8] != MAGIC {
            return Err(Error::Integrity("not an index snapshot".into()));
        }
        let u32_at = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
        let u64_at = |i: usize| u64::from_le_bytes(bytes[i..i + 8].try_into().unwrap());
        let header = Self {
            version: u32_at(8),
            table_size: u64_at(12),
            fanout: u32_at(20),
            block_threshold: f64::from_bits(u64_at(24)),
            blocks: u64_at(32),
        };
        if header.version != VERSION {
            return Err(Error::Integrity(format!(
                "snapshot version {} is not supported (expected {VERSION})",
                header.version
            )));
        }
        Ok(header)
    }
}

impl CppseIndex {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(HEADER_LEN);
        SnapshotHeader::of(self).write(&mut out);
        bincode::serialize_into(&mut out, self)?;
        Ok(out)
    }

    /// Decodes a snapshot; with `verify` every structural invariant is replayed.
    pub fn from_bytes(bytes: &[u8], verify: bool) -> Result<Self> {
        let header = SnapshotHeader::read(bytes)?;
        let index: CppseIndex = bincode::deserialize(&bytes[HEADER_LEN..])
            .map_err(|e| Error::Integrity(format!("corrupt snapshot payload: {e}")))?;
        if SnapshotHeader::of(&index) != header {
            return Err(Error::Integrity("snapshot header disagrees with its payload".into()));
        }
        if verify {
            index.verify()?;
        }
        Ok(index)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path, verify: bool) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, verify)
    }
}
