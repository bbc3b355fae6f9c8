//! Flat binary parameter archive.
//!
//! Byte layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes   b"CTXSEG\x00\x01"
//! count    u32       number of parameters
//! repeated per parameter, in model order:
//!   name_len  u32
//!   name      name_len bytes, UTF-8
//!   dtype     u8        1 = f32, 2 = f64
//!   ndim      u32
//!   dims      ndim x u32
//!   payload   numel x dtype-width bytes, raw little-endian scalars
//! ```
//!
//! Writing the same parameter set twice yields byte-identical files, and a
//! load followed by a save round-trips bit-exactly.

use std::io::{Read, Write};
use std::path::Path;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::param::Parameter;
use crate::scalar::{DType, Scalar};

const MAGIC: &[u8; 8] = b"CTXSEG\x00\x01";

/// Serialize parameters in their given (stable) order.
pub fn save<T: Scalar>(params: &[Rc<Parameter<T>>], path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for p in params {
        let name = p.name().as_bytes();
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name);
        buf.push(T::DTYPE.tag());
        let shape = p.shape();
        buf.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &d in &shape {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in p.data() {
            v.write_le(&mut buf);
        }
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

/// One parameter record read back from an archive.
pub struct Entry<T: Scalar> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

/// Read an archive written with the same scalar type.
pub fn load<T: Scalar>(path: &Path) -> Result<Vec<Entry<T>>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?
        .read_to_end(&mut bytes)?;
    let mut cur = Cursor { bytes: &bytes, pos: 0 };

    if cur.take(8)? != MAGIC {
        return Err(Error::data(format!(
            "{}: not a checkpoint (bad magic)",
            path.display()
        )));
    }
    let count = cur.u32()? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = cur.u32()? as usize;
        let name = String::from_utf8(cur.take(name_len)?.to_vec())
            .map_err(|_| Error::data("checkpoint parameter name is not UTF-8".to_string()))?;
        let dtype = DType::from_tag(cur.u8()?)
            .ok_or_else(|| Error::data(format!("unknown dtype tag in '{name}'")))?;
        if dtype != T::DTYPE {
            return Err(Error::data(format!(
                "parameter '{name}' stored as {dtype}, requested {}",
                T::DTYPE
            )));
        }
        let ndim = cur.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(cur.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let width = dtype.byte_width();
        let payload = cur.take(numel * width)?;
        let data = payload.chunks_exact(width).map(T::read_le).collect();
        entries.push(Entry { name, shape, data });
    }
    Ok(entries)
}

/// Restore parameter values by name; every parameter must be present with
/// a matching shape, and unknown entries are rejected.
pub fn restore<T: Scalar>(params: &[Rc<Parameter<T>>], path: &Path) -> Result<()> {
    let entries = load::<T>(path)?;
    if entries.len() != params.len() {
        return Err(Error::data(format!(
            "checkpoint holds {} parameters, model has {}",
            entries.len(),
            params.len()
        )));
    }
    for p in params {
        let entry = entries
            .iter()
            .find(|e| e.name == p.name())
            .ok_or_else(|| Error::data(format!("checkpoint is missing '{}'", p.name())))?;
        if entry.shape != p.shape() {
            return Err(Error::data(format!(
                "'{}' has shape {:?} in checkpoint, model expects {:?}",
                p.name(),
                entry.shape,
                p.shape()
            )));
        }
        p.assign(entry.data.clone())?;
    }
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::data("checkpoint truncated".to_string()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn save_restore_round_trips_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("params.ckpt");

        let a = Parameter::new("enc.w", vec![1.5f64, -2.25, 0.1, 1e-17], &[2, 2]).unwrap();
        let b = Parameter::new("alpha", vec![0.0f64; 4], &[4]).unwrap();
        save(&[a.clone(), b.clone()], &path).unwrap();

        let a2 = Parameter::new("enc.w", vec![0.0f64; 4], &[2, 2]).unwrap();
        let b2 = Parameter::new("alpha", vec![9.0f64; 4], &[4]).unwrap();
        restore(&[a2.clone(), b2.clone()], &path).unwrap();

        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.data()), bits(&a2.data()));
        assert_eq!(bits(&b.data()), bits(&b2.data()));

        // Saving the restored set reproduces the same bytes.
        let path2 = dir.path().join("params2.ckpt");
        save(&[a2, b2], &path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn dtype_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("params.ckpt");
        let p = Parameter::new("w", vec![1.0f32], &[1]).unwrap();
        save(&[p], &path).unwrap();
        assert!(load::<f64>(&path).is_err());
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("params.ckpt");
        let p = Parameter::new("w", vec![1.0f64, 2.0], &[2]).unwrap();
        save(&[p], &path).unwrap();
        let q = Parameter::new("w", vec![0.0f64], &[1]).unwrap();
        assert!(restore(&[q], &path).is_err());
    }
}
