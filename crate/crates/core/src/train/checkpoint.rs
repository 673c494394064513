//! Binary parameter files: `I2RK`, a `u32` version, a `u32` parameter count,
//! then per parameter the name length and UTF-8 bytes, the rank, the
//! extents and the values as little-endian `f32`. Every integer is a
//! little-endian `u32`.

use std::path::Path;

use num_traits::ToPrimitive;

use crate::numcore::{ParamStore, Scalar, Tensor};
use crate::scenes::write_atomic;

use super::TrainError;

pub const MAGIC: &[u8; 4] = b"I2RK";
pub const VERSION: u32 = 1;

pub fn encode_checkpoint<T: Scalar>(store: &ParamStore<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + store.element_count() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (_, p) in store.iter() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.extend_from_slice(&(p.value.rank() as u32).to_le_bytes());
        for &e in p.value.shape() {
            out.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for &v in p.value.data() {
            out.extend_from_slice(&ToPrimitive::to_f32(&v).unwrap_or(f32::NAN).to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], TrainError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(TrainError::Truncated { offset: self.pos })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, TrainError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("four bytes")))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ParamStore<f32>, TrainError> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4)?;
    if magic != MAGIC {
        return Err(TrainError::Format(format!("bad magic bytes {magic:?}")));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(TrainError::Format(format!("version {version}, expected {VERSION}")));
    }
    let count = r.u32()?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?).map_err(|e| TrainError::Format(format!("parameter name: {e}")))?.to_string();
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u32().map(|e| e as usize)).collect::<Result<Vec<_>, _>>()?;
        let numel = shape.iter().try_fold(1usize, |a, &e| a.checked_mul(e)).ok_or_else(|| TrainError::Format(format!("{name}: extents overflow")))?;
        let raw = r.take(numel.checked_mul(4).ok_or(TrainError::Truncated { offset: r.pos })?)?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("four bytes"))).collect();
        store.insert(name, Tensor::from_vec(&shape, data)?)?;
    }
    if r.pos != bytes.len() {
        return Err(TrainError::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(store)
}

pub fn save_checkpoint<T: Scalar>(store: &ParamStore<T>, path: &Path) -> Result<(), TrainError> {
    write_atomic(path, &encode_checkpoint(store))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ParamStore<f32>, TrainError> {
    decode_checkpoint(&std::fs::read(path)?)
}

/// Copies `loaded` into `target` by name. Every parameter of `target` must be
/// present with the same shape; with `strict`, extra names are rejected too.
pub fn restore_into<T: Scalar>(target: &mut ParamStore<T>, loaded: &ParamStore<f32>, strict: bool) -> Result<(), TrainError> {
    if strict {
        if let Some((_, extra)) = loaded.iter().find(|(_, p)| target.id(&p.name).is_none()) {
            return Err(TrainError::UnknownParameter(extra.name.clone()));
        }
    }
    for p in target.iter_mut() {
        let src = loaded.by_name(&p.name).ok_or_else(|| TrainError::MissingParameter(p.name.clone()))?;
        if src.value.shape() != p.value.shape() {
            return Err(TrainError::ShapeMismatch {
                name: p.name.clone(),
                found: src.value.shape().to_vec(),
                expected: p.value.shape().to_vec(),
            });
        }
        p.value = src.value.cast();
    }
    Ok(())
}
