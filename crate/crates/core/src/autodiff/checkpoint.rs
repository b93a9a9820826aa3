//! Binary parameter checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "DLAW" | version u32 | count u32
//! count × entry            (parameter values)
//! count × entry            (Adam first moments, same names and order)
//! count × entry            (Adam second moments)
//! adam_step u64
//! entry = name_len u16 | name (UTF-8) | dtype u8 | rank u8 | dims u64 × rank | values
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::autodiff::{DType, ParamStore, Real, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"DLAW";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointEntry<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub adam_m: Tensor<T>,
    pub adam_v: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub entries: Vec<CheckpointEntry<T>>,
    pub step: u64,
}

fn write_entry<T: Real>(out: &mut Vec<u8>, name: &str, t: &Tensor<T>) -> Result<()> {
    let name_len = u16::try_from(name.len())
        .map_err(|_| Error::invalid(format!("parameter name too long: {name}")))?;
    out.extend_from_slice(&name_len.to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(T::DTYPE.tag());
    out.push(t.shape().len() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(out);
    }
    Ok(())
}

pub fn encode<T: Real>(store: &ParamStore<T>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (_, p) in store.iter() {
        write_entry(&mut out, &p.name, &p.value)?;
    }
    for (_, p) in store.iter() {
        write_entry(&mut out, &p.name, &p.adam_m)?;
    }
    for (_, p) in store.iter() {
        write_entry(&mut out, &p.name, &p.adam_v)?;
    }
    out.extend_from_slice(&store.step.to_le_bytes());
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a str,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::format(
                self.path,
                format!("truncated at byte offset {} (wanted {n} more bytes)", self.pos),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
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

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn entry<T: Real>(&mut self) -> Result<(String, Tensor<T>)> {
        let at = self.pos;
        let len = self.u16()? as usize;
        let name = std::str::from_utf8(self.take(len)?)
            .map_err(|_| Error::format(self.path, format!("invalid UTF-8 name at offset {at}")))?
            .to_string();
        let tag = self.u8()?;
        let dtype = DType::from_tag(tag)
            .ok_or_else(|| Error::format(self.path, format!("unknown dtype tag {tag} for `{name}`")))?;
        if dtype != T::DTYPE {
            return Err(Error::format(
                self.path,
                format!("`{name}` stored as {dtype:?}, expected {:?}", T::DTYPE),
            ));
        }
        let rank = self.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u64()? as usize);
        }
        let count: usize = shape.iter().product();
        let bytes = self.take(count * dtype.size())?;
        let data = bytes.chunks_exact(dtype.size()).map(T::read_le).collect();
        Ok((name, Tensor::new(shape, data)?))
    }
}

pub fn decode<T: Real>(buf: &[u8], path: &str) -> Result<Checkpoint<T>> {
    let mut cur = Cursor { buf, pos: 0, path };
    if cur.take(4)? != MAGIC {
        return Err(Error::format(path, "bad magic, expected DLAW"));
    }
    let version = cur.u32()?;
    if version != VERSION {
        return Err(Error::format(path, format!("unsupported checkpoint version {version}")));
    }
    let count = cur.u32()? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let (name, value) = cur.entry::<T>()?;
        let shape = value.shape().to_vec();
        entries.push(CheckpointEntry {
            name,
            value,
            adam_m: Tensor::zeros(&shape),
            adam_v: Tensor::zeros(&shape),
        });
    }
    for section in 0..2 {
        for e in entries.iter_mut() {
            let (name, t) = cur.entry::<T>()?;
            if name != e.name || t.shape() != e.value.shape() {
                return Err(Error::format(path, format!("optimizer state for `{name}` does not match `{}`", e.name)));
            }
            if section == 0 {
                e.adam_m = t;
            } else {
                e.adam_v = t;
            }
        }
    }
    let step = cur.u64()?;
    if cur.pos != buf.len() {
        return Err(Error::format(path, format!("{} trailing bytes", buf.len() - cur.pos)));
    }
    Ok(Checkpoint { entries, step })
}

impl<T: Real> Checkpoint<T> {
    /// Copies values and optimizer state into a store built for the same model.
    /// Every store entry must be present with an identical shape.
    pub fn load_into(&self, store: &mut ParamStore<T>) -> Result<()> {
        if let Some((_, p)) = store.iter().find(|(_, p)| !self.entries.iter().any(|e| e.name == p.name)) {
            return Err(Error::Parameter { name: p.name.clone(), reason: "missing from the checkpoint".into() });
        }
        for e in &self.entries {
            let id = store.id(&e.name).ok_or_else(|| Error::Parameter {
                name: e.name.clone(),
                reason: "not present in the model".into(),
            })?;
            let p = store.get_mut(id);
            if p.value.shape() != e.value.shape() {
                return Err(Error::Parameter {
                    name: e.name.clone(),
                    reason: format!("checkpoint shape {:?} != model shape {:?}", e.value.shape(), p.value.shape()),
                });
            }
            p.value = e.value.clone();
            p.adam_m = e.adam_m.clone();
            p.adam_v = e.adam_v.clone();
        }
        store.step = self.step;
        Ok(())
    }
}

pub fn save<T: Real>(store: &ParamStore<T>, path: &Path) -> Result<()> {
    let bytes = encode(store)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load<T: Real>(path: &Path) -> Result<Checkpoint<T>> {
    let mut buf = Vec::new();
    fs::File::open(path)?.read_to_end(&mut buf)?;
    decode(&buf, &path.display().to_string())
}

/// Reads only the dtype of the first entry, to choose a precision before decoding.
pub fn peek_dtype(path: &Path) -> Result<DType> {
    let buf = fs::read(path)?;
    let p = path.display().to_string();
    if buf.len() < 14 || &buf[..4] != MAGIC {
        return Err(Error::format(&p, "not a DLAW checkpoint"));
    }
    let count = u32::from_le_bytes(buf[8..12].try_into().unwrap());
    if count == 0 {
        return Ok(DType::F32);
    }
    let name_len = u16::from_le_bytes(buf[12..14].try_into().unwrap()) as usize;
    let tag = *buf
        .get(14 + name_len)
        .ok_or_else(|| Error::format(&p, "truncated header"))?;
    DType::from_tag(tag).ok_or_else(|| Error::format(&p, format!("unknown dtype tag {tag}")))
}
