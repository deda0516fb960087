//! Named-tensor binary container shared by datasets ("BAID") and checkpoints ("BAIC").
//!
//! Layout, all little-endian: 4-byte magic, u32 version (1), u32 entry count,
//! then per entry: u32 name length, UTF-8 name, u8 dtype (0 = f32, 1 = raw
//! bytes), u32 ndim, ndim × u32 dims, payload.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::{ParamStore, Tensor};

pub const DATASET_MAGIC: &[u8; 4] = b"BAID";
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"BAIC";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum Entry {
    F32 { shape: Vec<usize>, data: Vec<f32> },
    Bytes(Vec<u8>),
}

/// Insertion-ordered table of named entries.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Table {
    names: Vec<String>,
    entries: BTreeMap<String, Entry>,
}

impl Table {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, e: Entry) -> Result<()> {
        let name = name.into();
        if let Entry::F32 { shape, data } = &e {
            if shape.iter().product::<usize>() != data.len() {
                return Err(Error::Format(format!("entry {name}: shape {shape:?} vs {} values", data.len())));
            }
        }
        if self.entries.insert(name.clone(), e).is_some() {
            return Err(Error::Format(format!("duplicate entry {name}")));
        }
        self.names.push(name);
        Ok(())
    }

    pub fn put_f32(&mut self, name: impl Into<String>, shape: &[usize], data: Vec<f32>) -> Result<()> {
        self.insert(name, Entry::F32 { shape: shape.to_vec(), data })
    }

    pub fn put_json<S: serde::Serialize>(&mut self, name: impl Into<String>, v: &S) -> Result<()> {
        let bytes = serde_json::to_vec(v).map_err(|e| Error::Format(e.to_string()))?;
        self.insert(name, Entry::Bytes(bytes))
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, name: &str) -> Result<&Entry> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::Format(format!("missing entry {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn f32(&self, name: &str) -> Result<(&[usize], &[f32])> {
        match self.get(name)? {
            Entry::F32 { shape, data } => Ok((shape, data)),
            Entry::Bytes(_) => Err(Error::Format(format!("entry {name} is not f32"))),
        }
    }

    pub fn json<D: serde::de::DeserializeOwned>(&self, name: &str) -> Result<D> {
        match self.get(name)? {
            Entry::Bytes(b) => serde_json::from_slice(b).map_err(|e| Error::Format(format!("{name}: {e}"))),
            Entry::F32 { .. } => Err(Error::Format(format!("entry {name} is not bytes"))),
        }
    }

    /// Stores every parameter under `prefix`, in name order.
    pub fn put_params(&mut self, prefix: &str, store: &ParamStore<f32>) -> Result<()> {
        self.put_params_where(prefix, store, |_| true)
    }

    /// Stores the parameters whose names satisfy `keep`, in name order.
    pub fn put_params_where(&mut self, prefix: &str, store: &ParamStore<f32>, keep: impl Fn(&str) -> bool) -> Result<()> {
        let mut all: Vec<_> = store.iter().filter(|(_, n, _)| keep(n)).collect();
        all.sort_by(|a, b| a.1.cmp(b.1));
        for (_, name, t) in all {
            self.put_f32(format!("{prefix}{name}"), t.shape(), t.data().to_vec())?;
        }
        Ok(())
    }

    /// Overwrites every parameter of `store` from entries under `prefix`.
    pub fn load_params(&self, prefix: &str, store: &mut ParamStore<f32>) -> Result<()> {
        self.load_params_where(prefix, store, |_| true)
    }

    /// Overwrites the parameters whose names satisfy `keep`.
    pub fn load_params_where(&self, prefix: &str, store: &mut ParamStore<f32>, keep: impl Fn(&str) -> bool) -> Result<()> {
        let ids: Vec<_> = store.ids().filter(|&id| keep(store.name(id))).collect();
        for id in ids {
            let name = format!("{prefix}{}", store.name(id));
            let (shape, data) = self.f32(&name)?;
            store
                .set(id, Tensor::new(shape.to_vec(), data.to_vec())?)
                .map_err(|e| Error::Format(format!("{name}: {e}")))?;
        }
        Ok(())
    }

    pub fn to_bytes(&self, magic: &[u8; 4]) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(magic);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.names.len() as u32).to_le_bytes());
        for name in &self.names {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            match &self.entries[name] {
                Entry::F32 { shape, data } => {
                    out.push(0);
                    out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
                    for d in shape {
                        out.extend_from_slice(&(*d as u32).to_le_bytes());
                    }
                    for v in data {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
                Entry::Bytes(b) => {
                    out.push(1);
                    out.extend_from_slice(&1u32.to_le_bytes());
                    out.extend_from_slice(&(b.len() as u32).to_le_bytes());
                    out.extend_from_slice(b);
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], magic: &[u8; 4]) -> Result<Self> {
        let mut cur = Cursor { b: bytes, pos: 0 };
        let m = cur.take(4)?;
        if m != magic {
            return Err(Error::Format(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(m),
                String::from_utf8_lossy(magic)
            )));
        }
        let version = cur.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let count = cur.u32()?;
        let mut t = Table::new();
        for _ in 0..count {
            let nlen = cur.u32()? as usize;
            let name = std::str::from_utf8(cur.take(nlen)?)
                .map_err(|_| Error::Format("entry name is not UTF-8".into()))?
                .to_string();
            let dtype = cur.take(1)?[0];
            let ndim = cur.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(cur.u32()? as usize);
            }
            let n: usize = shape.iter().product();
            let e = match dtype {
                0 => {
                    let raw = cur.take(n.checked_mul(4).ok_or_else(|| Error::Format("size overflow".into()))?)?;
                    Entry::F32 {
                        shape,
                        data: raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect(),
                    }
                }
                1 => Entry::Bytes(cur.take(n)?.to_vec()),
                d => return Err(Error::Format(format!("entry {name}: unknown dtype {d}"))),
            };
            t.insert(name, e)?;
        }
        if cur.pos != bytes.len() {
            return Err(Error::Format("trailing bytes after last entry".into()));
        }
        Ok(t)
    }

    pub fn save(&self, path: &Path, magic: &[u8; 4]) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes(magic))?;
        Ok(())
    }

    pub fn load(path: &Path, magic: &[u8; 4]) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut buf)?;
        Self::from_bytes(&buf, magic)
    }
}

struct Cursor<'a> {
    b: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.b.len() {
            return Err(Error::Format("truncated container".into()));
        }
        let s = &self.b[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let s = self.take(4)?;
        Ok(u32::from_le_bytes([s[0], s[1], s[2], s[3]]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut t = Table::new();
        t.put_f32("a/b", &[2, 2], vec![1.0, -0.0, f32::MIN_POSITIVE, 3.5]).unwrap();
        t.put_json("manifest", &serde_json::json!({"k": 1})).unwrap();
        let bytes = t.to_bytes(CHECKPOINT_MAGIC);
        let back = Table::from_bytes(&bytes, CHECKPOINT_MAGIC).unwrap();
        assert_eq!(back.to_bytes(CHECKPOINT_MAGIC), bytes);
        assert!(Table::from_bytes(&bytes, DATASET_MAGIC).is_err());
        assert!(Table::from_bytes(&bytes[..bytes.len() - 1], CHECKPOINT_MAGIC).is_err());
    }
}
