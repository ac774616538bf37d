//! Model checkpoints: parameters with Adam moments, the optimizer step and
//! free-form metadata, little-endian.

use std::io::{self, Cursor, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use thiserror::Error;

use super::{Param, ParamStore, Real};

const MAGIC: &[u8; 4] = b"TCKP";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o: {0}")]
    Io(#[from] io::Error),
    #[error("not a checkpoint (bad magic bytes)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checkpoint stores dtype tag {found}, expected {expected}")]
    Dtype { found: u8, expected: u8 },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    /// Epochs completed.
    pub epoch: u64,
    /// Optimizer steps taken.
    pub step: u64,
    /// Ordered `key = value` pairs describing the run.
    pub meta: Vec<(String, String)>,
    pub params: ParamStore<T>,
}

impl<T> Checkpoint<T> {
    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }
}

fn write_str(w: &mut impl Write, s: &str) -> io::Result<()> {
    w.write_u32::<LE>(s.len() as u32)?;
    w.write_all(s.as_bytes())
}

fn read_str(r: &mut Cursor<&[u8]>) -> Result<String, CheckpointError> {
    let n = r.read_u32::<LE>()? as usize;
    if n as u64 > r.get_ref().len() as u64 - r.position() {
        return Err(CheckpointError::Corrupt("string length exceeds file".into()));
    }
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|_| CheckpointError::Corrupt("string is not utf-8".into()))
}

fn write_reals<T: Real>(w: &mut impl Write, v: &[T]) -> io::Result<()> {
    for x in v {
        match T::DTYPE {
            1 => w.write_f32::<LE>(x.as_f64() as f32)?,
            _ => w.write_f64::<LE>(x.as_f64())?,
        }
    }
    Ok(())
}

fn read_reals<T: Real>(r: &mut Cursor<&[u8]>, n: usize) -> Result<Vec<T>, CheckpointError> {
    let width = if T::DTYPE == 1 { 4 } else { 8 };
    if (n as u128) * width > (r.get_ref().len() as u64 - r.position()) as u128 {
        return Err(CheckpointError::Corrupt("array length exceeds file".into()));
    }
    (0..n)
        .map(|_| {
            Ok(match T::DTYPE {
                1 => T::from_f64(r.read_f32::<LE>()? as f64),
                _ => T::from_f64(r.read_f64::<LE>()?),
            })
        })
        .collect()
}

pub fn encode_checkpoint<T: Real>(ck: &Checkpoint<T>) -> Vec<u8> {
    let mut w = Vec::new();
    let res: io::Result<()> = (|| {
        w.write_all(MAGIC)?;
        w.write_u32::<LE>(VERSION)?;
        w.write_u8(T::DTYPE)?;
        w.write_u64::<LE>(ck.epoch)?;
        w.write_u64::<LE>(ck.step)?;
        w.write_u32::<LE>(ck.meta.len() as u32)?;
        for (k, v) in &ck.meta {
            write_str(&mut w, k)?;
            write_str(&mut w, v)?;
        }
        w.write_u32::<LE>(ck.params.len() as u32)?;
        for (_, p) in ck.params.iter() {
            write_str(&mut w, &p.name)?;
            w.write_u64::<LE>(p.rows as u64)?;
            w.write_u64::<LE>(p.cols as u64)?;
            write_reals(&mut w, &p.value)?;
            write_reals(&mut w, &p.m)?;
            write_reals(&mut w, &p.v)?;
        }
        Ok(())
    })();
    res.expect("writing to a vec");
    w
}

pub fn decode_checkpoint<T: Real>(bytes: &[u8]) -> Result<Checkpoint<T>, CheckpointError> {
    let mut r = Cursor::new(bytes);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| CheckpointError::BadMagic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.read_u32::<LE>()?;
    if version != VERSION {
        return Err(CheckpointError::Version(version));
    }
    let dtype = r.read_u8()?;
    if dtype != T::DTYPE {
        return Err(CheckpointError::Dtype {
            found: dtype,
            expected: T::DTYPE,
        });
    }
    let epoch = r.read_u64::<LE>()?;
    let step = r.read_u64::<LE>()?;
    let n_meta = r.read_u32::<LE>()?;
    let mut meta = Vec::new();
    for _ in 0..n_meta {
        meta.push((read_str(&mut r)?, read_str(&mut r)?));
    }
    let n_params = r.read_u32::<LE>()?;
    let mut params = ParamStore::new();
    for _ in 0..n_params {
        let name = read_str(&mut r)?;
        let rows = r.read_u64::<LE>()? as usize;
        let cols = r.read_u64::<LE>()? as usize;
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| CheckpointError::Corrupt("parameter size overflows".into()))?;
        if params.find(&name).is_some() {
            return Err(CheckpointError::Corrupt(format!("duplicate parameter {name}")));
        }
        let mut p = Param::new(name, rows, cols, read_reals(&mut r, n)?);
        p.m = read_reals(&mut r, n)?;
        p.v = read_reals(&mut r, n)?;
        params.add(p);
    }
    if r.position() as usize != bytes.len() {
        return Err(CheckpointError::Corrupt("trailing bytes".into()));
    }
    Ok(Checkpoint {
        epoch,
        step,
        meta,
        params,
    })
}

pub fn write_checkpoint<T: Real>(path: &Path, ck: &Checkpoint<T>) -> Result<(), CheckpointError> {
    std::fs::write(path, encode_checkpoint(ck))?;
    Ok(())
}

pub fn read_checkpoint<T: Real>(path: &Path) -> Result<Checkpoint<T>, CheckpointError> {
    decode_checkpoint(&std::fs::read(path)?)
}
