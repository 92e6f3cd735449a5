//! `STRVOL1` volume container.
//!
//! Little-endian layout: 8-byte magic `STRVOL1\0`, `u32` nx ny nz, `f32`
//! sx sy sz, `f32` ox oy oz, `u32` dtype (0 = f32), then `nx*ny*nz` f32
//! values in x-fastest order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::Volume;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"STRVOL1\0";
pub const DTYPE_F32: u32 = 0;

pub fn write_volume<W: Write>(v: &Volume, mut w: W) -> Result<()> {
    w.write_all(MAGIC)?;
    for n in v.shape() {
        let n = u32::try_from(n).map_err(|_| Error::Shape(format!("axis length {n} exceeds u32")))?;
        w.write_all(&n.to_le_bytes())?;
    }
    for s in v.spacing() {
        w.write_all(&s.to_le_bytes())?;
    }
    for o in v.origin() {
        w.write_all(&o.to_le_bytes())?;
    }
    w.write_all(&DTYPE_F32.to_le_bytes())?;
    let mut buf = Vec::with_capacity(v.len() * 4);
    for x in v.data() {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f32<R: Read>(r: &mut R) -> Result<f32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(f32::from_le_bytes(b))
}

fn truncated(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::Format("truncated STRVOL1 stream".into())
    } else {
        Error::Io(e)
    }
}

pub fn read_volume<R: Read>(mut r: R) -> Result<Volume> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(truncated)?;
    if &magic != MAGIC {
        return Err(Error::Format("bad STRVOL1 magic".into()));
    }
    let shape = [read_u32(&mut r)? as usize, read_u32(&mut r)? as usize, read_u32(&mut r)? as usize];
    let spacing = [read_f32(&mut r)?, read_f32(&mut r)?, read_f32(&mut r)?];
    let origin = [read_f32(&mut r)?, read_f32(&mut r)?, read_f32(&mut r)?];
    let dtype = read_u32(&mut r)?;
    if dtype != DTYPE_F32 {
        return Err(Error::Format(format!("unsupported STRVOL1 dtype code {dtype}")));
    }
    let n = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Format("STRVOL1 shape overflows".into()))?;
    let mut bytes = vec![0u8; n.checked_mul(4).ok_or_else(|| Error::Format("STRVOL1 too large".into()))?];
    r.read_exact(&mut bytes).map_err(truncated)?;
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::Format("trailing bytes after STRVOL1 payload".into()));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Volume::new(shape, spacing, origin, data).map_err(|e| match e {
        Error::Shape(m) => Error::Format(m),
        other => other,
    })
}

pub fn save_volume(v: &Volume, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_volume(v, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_volume(path: impl AsRef<Path>) -> Result<Volume> {
    read_volume(BufReader::new(File::open(path)?))
}
