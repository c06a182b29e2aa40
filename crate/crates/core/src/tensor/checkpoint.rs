//! Parameter checkpoint file.
//!
//! Layout (all integers little-endian):
//!   magic "MRCK", version u8, count u32,
//!   then per parameter: name-length u16, UTF-8 name, rank u8, dims u32...,
//!   f32 data.
//! An optional trailer (length u32 + UTF-8 JSON) carries run metadata such
//! as the model configuration.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{ParamSet, Scalar, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"MRCK";
pub const VERSION: u8 = 1;

/// A parameter as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct RawParam {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

pub fn write_checkpoint<S: Scalar, W: Write>(
    mut w: W,
    ps: &ParamSet<S>,
    meta_json: Option<&str>,
) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&[VERSION])?;
    w.write_all(&(ps.len() as u32).to_le_bytes())?;
    for (_, p) in ps.iter() {
        let name = p.name.as_bytes();
        if name.len() > u16::MAX as usize {
            return Err(Error::Contract(format!("parameter name too long: {}", p.name)));
        }
        w.write_all(&(name.len() as u16).to_le_bytes())?;
        w.write_all(name)?;
        let shape = p.value.shape();
        w.write_all(&[shape.len() as u8])?;
        for &d in shape {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for &x in p.value.data() {
            w.write_all(&(x.to_f64() as f32).to_le_bytes())?;
        }
    }
    if let Some(meta) = meta_json {
        let bytes = meta.as_bytes();
        w.write_all(&(bytes.len() as u32).to_le_bytes())?;
        w.write_all(bytes)?;
    }
    Ok(())
}

pub fn write_checkpoint_file<S: Scalar>(
    path: &Path,
    ps: &ParamSet<S>,
    meta_json: Option<&str>,
) -> Result<()> {
    let f = File::create(path)?;
    let mut w = BufWriter::new(f);
    write_checkpoint(&mut w, ps, meta_json)?;
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<(Vec<RawParam>, Option<String>)> {
    let mut offset = 0u64;
    let mut magic = [0u8; 4];
    read_exact_at(&mut r, &mut magic, &mut offset, "magic")?;
    if &magic != MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: format!("bad magic {:?}, expected {:?}", magic, MAGIC),
        });
    }
    let mut vb = [0u8; 1];
    read_exact_at(&mut r, &mut vb, &mut offset, "version")?;
    if vb[0] != VERSION {
        return Err(Error::Format {
            offset: 4,
            message: format!("unsupported version {}, expected {}", vb[0], VERSION),
        });
    }
    let mut cb = [0u8; 4];
    read_exact_at(&mut r, &mut cb, &mut offset, "count")?;
    let count = u32::from_le_bytes(cb) as usize;

    let mut params = Vec::with_capacity(count);
    for _ in 0..count {
        let mut lb = [0u8; 2];
        read_exact_at(&mut r, &mut lb, &mut offset, "name length")?;
        let name_len = u16::from_le_bytes(lb) as usize;
        let mut name_bytes = vec![0u8; name_len];
        read_exact_at(&mut r, &mut name_bytes, &mut offset, "name")?;
        let name = String::from_utf8(name_bytes).map_err(|_| Error::Format {
            offset,
            message: "parameter name is not UTF-8".into(),
        })?;
        let mut rb = [0u8; 1];
        read_exact_at(&mut r, &mut rb, &mut offset, "rank")?;
        let rank = rb[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let mut db = [0u8; 4];
            read_exact_at(&mut r, &mut db, &mut offset, "dim")?;
            shape.push(u32::from_le_bytes(db) as usize);
        }
        let numel: usize = shape.iter().product();
        let mut bytes = vec![0u8; numel * 4];
        read_exact_at(&mut r, &mut bytes, &mut offset, "tensor data")?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        params.push(RawParam { name, shape, data });
    }

    // optional metadata trailer
    let mut lb = [0u8; 4];
    let meta = match r.read(&mut lb)? {
        0 => None,
        4 => {
            let len = u32::from_le_bytes(lb) as usize;
            let mut bytes = vec![0u8; len];
            offset += 4;
            read_exact_at(&mut r, &mut bytes, &mut offset, "metadata")?;
            Some(String::from_utf8(bytes).map_err(|_| Error::Format {
                offset,
                message: "metadata is not UTF-8".into(),
            })?)
        }
        _ => {
            return Err(Error::Format {
                offset,
                message: "truncated metadata length".into(),
            })
        }
    };
    Ok((params, meta))
}

pub fn read_checkpoint_file(path: &Path) -> Result<(Vec<RawParam>, Option<String>)> {
    let f = File::open(path)?;
    read_checkpoint(BufReader::new(f))
}

fn read_exact_at<R: Read>(r: &mut R, buf: &mut [u8], offset: &mut u64, what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| Error::Format {
        offset: *offset,
        message: format!("truncated while reading {what}: {e}"),
    })?;
    *offset += buf.len() as u64;
    Ok(())
}

/// Loads raw parameters into an existing set. The name set must match the
/// model exactly; shape or name drift is an error.
pub fn load_into<S: Scalar>(raw: &[RawParam], ps: &mut ParamSet<S>) -> Result<()> {
    if raw.len() != ps.len() {
        return Err(Error::Config(format!(
            "checkpoint has {} parameters, model expects {}",
            raw.len(),
            ps.len()
        )));
    }
    for rp in raw {
        let id = ps.by_name(&rp.name).ok_or_else(|| {
            Error::Config(format!("checkpoint parameter {:?} unknown to the model", rp.name))
        })?;
        let p = ps.get_mut(id);
        if p.value.shape() != rp.shape.as_slice() {
            return Err(Error::Config(format!(
                "checkpoint parameter {:?} has shape {:?}, model expects {:?}",
                rp.name,
                rp.shape,
                p.value.shape()
            )));
        }
        let data = rp.data.iter().map(|&x| S::from_f64(x as f64)).collect();
        p.value = Tensor::new(rp.shape.clone(), data)?;
    }
    Ok(())
}
