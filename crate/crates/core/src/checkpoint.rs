//! Shared binary layout for parameter checkpoints.
//!
//! A checkpoint is a 6-byte magic, a `u32` format version, a list of `u32`
//! header fields owned by the caller, then every parameter tensor in
//! declaration order as a `u64` element count followed by little-endian `f32`s.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::nn::Parameters;

pub const FORMAT_VERSION: u32 = 1;

fn io_err(e: std::io::Error) -> Error {
    Error::Checkpoint(e.to_string())
}

pub fn write_header<W: Write>(w: &mut W, magic: &[u8; 6], fields: &[u32]) -> Result<()> {
    w.write_all(magic).map_err(io_err)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes()).map_err(io_err)?;
    w.write_all(&(fields.len() as u32).to_le_bytes()).map_err(io_err)?;
    for f in fields {
        w.write_all(&f.to_le_bytes()).map_err(io_err)?;
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(io_err)?;
    Ok(u32::from_le_bytes(b))
}

/// Reads and checks the magic and version; returns the header fields.
pub fn read_header<R: Read>(r: &mut R, magic: &[u8; 6]) -> Result<Vec<u32>> {
    let mut m = [0u8; 6];
    r.read_exact(&mut m).map_err(io_err)?;
    if &m != magic {
        return Err(Error::Checkpoint(format!(
            "bad magic: expected {:?}",
            String::from_utf8_lossy(magic)
        )));
    }
    let version = read_u32(r)?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {version}")));
    }
    let n = read_u32(r)? as usize;
    if n > 4096 {
        return Err(Error::Checkpoint(format!("implausible header length {n}")));
    }
    (0..n).map(|_| read_u32(r)).collect()
}

pub fn write_tensors<W: Write, P: Parameters>(w: &mut W, params: &P) -> Result<()> {
    for (_, m) in params.params() {
        w.write_all(&(m.len() as u64).to_le_bytes()).map_err(io_err)?;
        let mut buf = Vec::with_capacity(m.len() * 4);
        for v in &m.data {
            buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        w.write_all(&buf).map_err(io_err)?;
    }
    Ok(())
}

/// Fills an already-shaped parameter container from the stream.
pub fn read_tensors<R: Read, P: Parameters>(r: &mut R, params: &mut P) -> Result<()> {
    for (name, m) in params.params_mut() {
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b8).map_err(io_err)?;
        let n = u64::from_le_bytes(b8) as usize;
        if n != m.len() {
            return Err(Error::Checkpoint(format!(
                "tensor `{name}`: expected {} values, found {n}",
                m.len()
            )));
        }
        let mut buf = vec![0u8; n * 4];
        r.read_exact(&mut buf).map_err(io_err)?;
        for (v, chunk) in m.data.iter_mut().zip(buf.chunks_exact(4)) {
            *v = f32::from_le_bytes(chunk.try_into().expect("4-byte chunk")) as f64;
        }
        if !m.is_finite() {
            return Err(Error::Checkpoint(format!("tensor `{name}` holds non-finite values")));
        }
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest).map_err(io_err)? != 0 {
        return Err(Error::Checkpoint("trailing bytes after last tensor".into()));
    }
    Ok(())
}

/// Rounds every parameter to the nearest `f32`, matching what a save/load
/// cycle would produce.
pub fn snap_to_f32<P: Parameters>(params: &mut P) {
    for (_, m) in params.params_mut() {
        m.data.iter_mut().for_each(|v| *v = *v as f32 as f64);
    }
}
