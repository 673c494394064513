//! Attention dump files. One file per scene: a single JSON header line, then
//! for every group, block and head the `L × L` attention matrix as row-major
//! little-endian `f32`.

use std::io::{BufRead, Read};
use std::path::Path;

use relpose_core::inter::AttentionExport;
use relpose_core::scenes::write_atomic;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DumpError {
    #[error("attention dump header: {0}")]
    Header(String),
    #[error("attention dump holds {found} bytes of matrices, header implies {expected}")]
    Length { found: usize, expected: usize },
    #[error("groups of scene {0} disagree on blocks, heads or tokens")]
    Inconsistent(u64),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Layout of one group inside a dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupLayout {
    /// Person index per slot, `null` for padding.
    pub slots: Vec<Option<usize>>,
    /// Token grid `(rows, cols)` per slot.
    pub grid: (usize, usize),
    /// Validity per token.
    pub mask: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DumpHeader {
    pub scene_id: u64,
    pub blocks: usize,
    pub heads: usize,
    pub tokens: usize,
    pub groups: Vec<GroupLayout>,
}

impl DumpHeader {
    fn floats(&self) -> usize {
        self.groups.len() * self.blocks * self.heads * self.tokens * self.tokens
    }
}

pub fn encode_dump(scene_id: u64, exports: &[AttentionExport]) -> Result<Vec<u8>, DumpError> {
    let first = exports.first();
    let header = DumpHeader {
        scene_id,
        blocks: first.map_or(0, |e| e.blocks),
        heads: first.map_or(0, |e| e.heads),
        tokens: first.map_or(0, |e| e.tokens),
        groups: exports.iter().map(|e| GroupLayout { slots: e.slots.clone(), grid: e.grid, mask: e.mask.clone() }).collect(),
    };
    if exports.iter().any(|e| (e.blocks, e.heads, e.tokens) != (header.blocks, header.heads, header.tokens)) {
        return Err(DumpError::Inconsistent(scene_id));
    }
    let mut out = serde_json::to_vec(&header).map_err(|e| DumpError::Header(e.to_string()))?;
    out.push(b'\n');
    for e in exports {
        for v in &e.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn write_dump(path: &Path, scene_id: u64, exports: &[AttentionExport]) -> Result<(), DumpError> {
    write_atomic(path, &encode_dump(scene_id, exports)?)?;
    Ok(())
}

/// Header and the matrices in file order.
pub fn read_dump(path: &Path) -> Result<(DumpHeader, Vec<f32>), DumpError> {
    let mut reader = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut line = String::new();
    reader.read_line(&mut line)?;
    let header: DumpHeader = serde_json::from_str(line.trim_end()).map_err(|e| DumpError::Header(e.to_string()))?;
    let mut raw = Vec::new();
    reader.read_to_end(&mut raw)?;
    let expected = header.floats() * 4;
    if raw.len() != expected {
        return Err(DumpError::Length { found: raw.len(), expected });
    }
    let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    Ok((header, data))
}
