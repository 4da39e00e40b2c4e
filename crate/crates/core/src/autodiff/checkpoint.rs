//! Flat binary parameter checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   [u8; 4] = b"TVDC"
//! version u32
//! count   u32
//! count × { name_len u32, name [u8; name_len], rank u32, dims [u64; rank], values [f64; Π dims] }
//! ```

use std::io::{self, Read, Write};

use super::{ParamStore, Tensor};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"TVDC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointEntry {
    pub name: String,
    pub value: Tensor,
}

pub fn write_checkpoint<W: Write>(mut w: W, params: &ParamStore) -> io::Result<()> {
    w.write_all(&CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(params.len() as u32).to_le_bytes())?;
    for p in params.iter() {
        let name = p.name.as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name)?;
        let shape = p.value.shape();
        w.write_all(&(shape.len() as u32).to_le_bytes())?;
        for &d in shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in p.value.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()
}

fn invalid(msg: impl Into<String>) -> io::Error {
    io::Error::new(io::ErrorKind::InvalidData, msg.into())
}

fn read_u32<R: Read>(r: &mut R) -> io::Result<u32> {
    let mut b = [0; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> io::Result<u64> {
    let mut b = [0; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub fn read_checkpoint<R: Read>(mut r: R) -> io::Result<Vec<CheckpointEntry>> {
    let mut magic = [0; 4];
    r.read_exact(&mut magic)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(invalid("not a checkpoint file (bad magic)"));
    }
    let version = read_u32(&mut r)?;
    if version != CHECKPOINT_VERSION {
        return Err(invalid(format!("unsupported checkpoint version {version}")));
    }
    let count = read_u32(&mut r)?;
    let mut entries = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        let mut name = vec![0; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| invalid("parameter name is not UTF-8"))?;
        let rank = read_u32(&mut r)? as usize;
        if rank > 2 {
            return Err(invalid(format!("parameter `{name}` has rank {rank}")));
        }
        let shape = (0..rank).map(|_| read_u64(&mut r).map(|d| d as usize)).collect::<io::Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        let mut b = [0; 8];
        for _ in 0..n {
            r.read_exact(&mut b)?;
            data.push(f64::from_le_bytes(b));
        }
        let value = Tensor::new(shape, data).map_err(|e| invalid(e.to_string()))?;
        entries.push(CheckpointEntry { name, value });
    }
    Ok(entries)
}

impl ParamStore {
    /// Overwrite values from checkpoint entries; names and shapes must match.
    pub fn load_entries(&mut self, entries: &[CheckpointEntry]) -> io::Result<()> {
        if entries.len() != self.len() {
            return Err(invalid(format!(
                "checkpoint has {} parameters, model expects {}",
                entries.len(),
                self.len()
            )));
        }
        for (i, e) in entries.iter().enumerate() {
            let p = self.get_mut(i);
            if p.name != e.name || p.value.shape() != e.value.shape() {
                return Err(invalid(format!(
                    "checkpoint entry `{}` {:?} does not match `{}` {:?}",
                    e.name,
                    e.value.shape(),
                    p.name,
                    p.value.shape()
                )));
            }
            p.value = e.value.clone();
        }
        Ok(())
    }
}
