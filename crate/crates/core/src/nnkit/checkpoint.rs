//! Binary parameter checkpoints.
//!
//! Layout (all integers little-endian): magic `FTCK`, `u32` version, then one
//! record per parameter in name order: `u32` name length, UTF-8 name, `u32`
//! rank, `rank x u32` dims, `f64` values.

use std::io::{Read, Write};
use std::path::Path;

use super::{NnError, ParameterSet, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"FTCK";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn write_checkpoint<W: Write>(params: &ParameterSet, mut w: W) -> Result<(), NnError> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    for (name, t) in params.iter() {
        let bytes = name.as_bytes();
        w.write_all(&(bytes.len() as u32).to_le_bytes())?;
        w.write_all(bytes)?;
        w.write_all(&(t.rank() as u32).to_le_bytes())?;
        for d in t.shape() {
            w.write_all(&(*d as u32).to_le_bytes())?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn checkpoint_bytes(params: &ParameterSet) -> Vec<u8> {
    let mut out = Vec::new();
    write_checkpoint(params, &mut out).expect("writing to a Vec cannot fail");
    out
}

fn take<'a>(buf: &mut &'a [u8], n: usize, what: &str) -> Result<&'a [u8], NnError> {
    if buf.len() < n {
        return Err(NnError::Checkpoint(format!("truncated while reading {what}")));
    }
    let (head, tail) = buf.split_at(n);
    *buf = tail;
    Ok(head)
}

fn take_u32(buf: &mut &[u8], what: &str) -> Result<u32, NnError> {
    let b = take(buf, 4, what)?;
    Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
}

/// Parses a checkpoint; all parameters come back trainable.
pub fn parse_checkpoint(mut buf: &[u8]) -> Result<ParameterSet, NnError> {
    let magic = take(&mut buf, 4, "magic")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(NnError::Checkpoint("bad magic".into()));
    }
    let version = take_u32(&mut buf, "version")?;
    if version != CHECKPOINT_VERSION {
        return Err(NnError::Checkpoint(format!("unsupported version {version}")));
    }
    let mut params = ParameterSet::new();
    while !buf.is_empty() {
        let len = take_u32(&mut buf, "name length")? as usize;
        let name = std::str::from_utf8(take(&mut buf, len, "name")?)
            .map_err(|e| NnError::Checkpoint(format!("name is not UTF-8: {e}")))?
            .to_string();
        let rank = take_u32(&mut buf, "rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(take_u32(&mut buf, "dims")? as usize);
        }
        let count: usize = shape.iter().product();
        let raw = take(&mut buf, count * 8, "values")?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        params.insert(name, Tensor::new(shape, data)?)?;
    }
    Ok(params)
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<ParameterSet, NnError> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    parse_checkpoint(&buf)
}

pub fn save_checkpoint(params: &ParameterSet, path: &Path) -> Result<(), NnError> {
    std::fs::write(path, checkpoint_bytes(params))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ParameterSet, NnError> {
    parse_checkpoint(&std::fs::read(path)?)
}
