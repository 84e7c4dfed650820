//! Binary `.gnpc` parameter checkpoints.
//!
//! Layout (little-endian): magic `GNPC`, u32 version, u32 parameter count,
//! then per parameter u16 name length, UTF-8 name, u8 rank, u32 dims, f64
//! data. A CRC32 of everything before it closes the file.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::ParameterStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"GNPC";
pub const VERSION: u32 = 1;

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

pub fn to_bytes(store: &ParameterStore) -> Result<Vec<u8>> {
    let mut buf = Vec::with_capacity(16 + store.size() * 8);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    let count = u32::try_from(store.len()).map_err(|_| bad("too many parameters"))?;
    buf.extend_from_slice(&count.to_le_bytes());
    for (name, t) in store.iter() {
        let len = u16::try_from(name.len()).map_err(|_| bad(format!("parameter name too long: {name}")))?;
        buf.extend_from_slice(&len.to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        let ndim = u8::try_from(t.ndim()).map_err(|_| bad(format!("{name}: rank too large")))?;
        buf.push(ndim);
        for &d in t.shape() {
            let d = u32::try_from(d).map_err(|_| bad(format!("{name}: dimension too large")))?;
            buf.extend_from_slice(&d.to_le_bytes());
        }
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    Ok(buf)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| bad("truncated file"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<ParameterStore> {
    if bytes.len() < 16 {
        return Err(bad("truncated file"));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    let actual = crc32fast::hash(body);
    if stored != actual {
        return Err(bad(format!("CRC mismatch: stored {stored:08x}, computed {actual:08x}")));
    }
    let mut c = Cursor { buf: body, pos: 0 };
    if c.take(4)? != MAGIC {
        return Err(bad("bad magic"));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let count = c.u32()?;
    let mut store = ParameterStore::new();
    for _ in 0..count {
        let len = c.u16()? as usize;
        let name = std::str::from_utf8(c.take(len)?)
            .map_err(|_| bad("parameter name is not UTF-8"))?
            .to_string();
        let ndim = c.u8()? as usize;
        let shape = (0..ndim)
            .map(|_| c.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = c.take(n.checked_mul(8).ok_or_else(|| bad("tensor too large"))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        if store.get(&name).is_some() {
            return Err(bad(format!("duplicate parameter {name}")));
        }
        store.insert(name, Tensor::new(shape, data)?);
    }
    if c.pos != body.len() {
        return Err(bad(format!("{} trailing bytes", body.len() - c.pos)));
    }
    Ok(store)
}

pub fn write<W: Write>(store: &ParameterStore, mut w: W) -> Result<()> {
    w.write_all(&to_bytes(store)?)?;
    w.flush()?;
    Ok(())
}

pub fn read<R: Read>(mut r: R) -> Result<ParameterStore> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    from_bytes(&buf)
}

pub fn save(store: &ParameterStore, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(store)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<ParameterStore> {
    from_bytes(&std::fs::read(path)?)
}
