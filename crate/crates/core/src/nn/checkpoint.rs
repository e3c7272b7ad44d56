//! Named-tensor weight archives.
//!
//! A checkpoint is the model's parameter visitation serialized by name:
//! little-endian binary, magic `MVWT`, format version, then one record per
//! tensor (length-prefixed name, rank, dimensions, raw `f64` data). Loading
//! is strict: every tensor the model visits must be present with the exact
//! shape, no archive entry may be left over, and trailing bytes are an
//! error. Round-trips are bit-exact because values never leave `f64`.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

use super::Params;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"MVWT";
pub const CHECKPOINT_VERSION: u16 = 1;

/// Longest accepted tensor name, a sanity bound against corrupt archives.
const MAX_NAME_LEN: u32 = 1 << 12;
/// Largest accepted tensor rank.
const MAX_RANK: u32 = 8;

pub fn write_checkpoint<M: Params + ?Sized>(model: &mut M, mut w: impl Write) -> Result<()> {
    let mut tensors: Vec<(String, Vec<usize>, Vec<f64>)> = Vec::new();
    model.visit_params("", &mut |t| {
        tensors.push((t.name.clone(), t.shape.clone(), t.value.to_vec()));
    });
    {
        let mut seen = HashMap::new();
        for (i, (name, ..)) in tensors.iter().enumerate() {
            if let Some(prev) = seen.insert(name.as_str(), i) {
                return Err(Error::Checkpoint(format!(
                    "model visits tensor `{name}` twice (positions {prev} and {i})"
                )));
            }
        }
    }
    w.write_all(&CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, shape, data) in &tensors {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(shape.len() as u32).to_le_bytes())?;
        for &d in shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint<M: Params + ?Sized>(model: &mut M, mut r: impl Read) -> Result<()> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint(format!("bad magic {magic:?}")));
    }
    let version = read_u16(&mut r)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {version} (expected {CHECKPOINT_VERSION})"
        )));
    }
    let count = read_u32(&mut r)? as usize;
    let mut tensors: HashMap<String, (Vec<usize>, Vec<f64>)> = HashMap::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u32(&mut r)?;
        if name_len > MAX_NAME_LEN {
            return Err(Error::Checkpoint(format!("tensor name of {name_len} bytes")));
        }
        let mut name_bytes = vec![0u8; name_len as usize];
        r.read_exact(&mut name_bytes)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|e| Error::Checkpoint(format!("tensor name is not UTF-8: {e}")))?;
        let rank = read_u32(&mut r)?;
        if rank > MAX_RANK {
            return Err(Error::Checkpoint(format!("tensor `{name}` has rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank as usize);
        for _ in 0..rank {
            shape.push(read_u64(&mut r)? as usize);
        }
        let len: usize = shape.iter().product();
        let mut data = vec![0.0f64; len];
        let mut buf = [0u8; 8];
        for v in &mut data {
            r.read_exact(&mut buf)?;
            *v = f64::from_le_bytes(buf);
        }
        if tensors.insert(name.clone(), (shape, data)).is_some() {
            return Err(Error::Checkpoint(format!("archive lists `{name}` twice")));
        }
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(Error::Checkpoint("trailing bytes after the last tensor".into()));
    }

    // Assign into the model, strictly.
    let mut problem: Option<Error> = None;
    model.visit_params("", &mut |t| {
        if problem.is_some() {
            return;
        }
        match tensors.remove(&t.name) {
            None => {
                problem = Some(Error::Checkpoint(format!(
                    "archive is missing tensor `{}`",
                    t.name
                )));
            }
            Some((shape, data)) => {
                if shape != t.shape {
                    problem = Some(Error::Checkpoint(format!(
                        "tensor `{}` is {:?} in the archive but {:?} in the model",
                        t.name, shape, t.shape
                    )));
                } else {
                    t.value.copy_from_slice(&data);
                }
            }
        }
    });
    if let Some(e) = problem {
        return Err(e);
    }
    if let Some(name) = tensors.keys().next() {
        return Err(Error::Checkpoint(format!(
            "archive has {} tensor(s) the model does not, e.g. `{name}`",
            tensors.len()
        )));
    }
    Ok(())
}

pub fn save_checkpoint<M: Params + ?Sized>(model: &mut M, path: impl AsRef<Path>) -> Result<()> {
    write_checkpoint(model, BufWriter::new(File::create(path)?))
}

pub fn load_checkpoint<M: Params + ?Sized>(model: &mut M, path: impl AsRef<Path>) -> Result<()> {
    read_checkpoint(model, BufReader::new(File::open(path)?))
}

fn read_u16(r: &mut impl Read) -> Result<u16> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}
