//! `NMCW` parameter checkpoints.
//!
//! Layout (all little-endian): magic `NMCW`, version `u16 = 1`, entry count
//! `u32`, then per entry: name length `u32`, UTF-8 name, rank `u32`, `rank`
//! dims as `u32`, and `prod(dims)` `f32` values in row-major order.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use super::{ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::io_util::Reader;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"NMCW";
const VERSION: u16 = 1;

/// Writes every entry (parameters and buffers) of `store`.
pub fn write_checkpoint(store: &ParamStore<f32>, path: &Path) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut put = |bytes: &[u8]| w.write_all(bytes).map_err(|e| Error::io(path, e));
    put(CHECKPOINT_MAGIC)?;
    put(&VERSION.to_le_bytes())?;
    put(&(store.len() as u32).to_le_bytes())?;
    for p in store.iter() {
        put(&(p.name.len() as u32).to_le_bytes())?;
        put(p.name.as_bytes())?;
        put(&(p.value.rank() as u32).to_le_bytes())?;
        for &d in p.value.shape() {
            put(&(d as u32).to_le_bytes())?;
        }
        for v in p.value.data() {
            put(&v.to_le_bytes())?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a checkpoint. Every entry comes back as a plain parameter; load it
/// into a model-built store with [`ParamStore::load_matching`] to recover
/// buffer flags.
pub fn read_checkpoint(path: &Path) -> Result<ParamStore<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader::new(&bytes);
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::Format(format!("{}: bad checkpoint magic", path.display())));
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let count = r.u32()? as usize;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Corruption("checkpoint name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()? as usize;
        let dims = (0..rank)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = dims.iter().product();
        let data = (0..n).map(|_| r.f32()).collect::<Result<Vec<_>>>()?;
        store.insert_param(&name, Tensor::new(dims, data)?);
    }
    if !r.is_empty() {
        return Err(Error::Corruption(format!(
            "{} trailing bytes after checkpoint entries",
            r.remaining()
        )));
    }
    Ok(store)
}
