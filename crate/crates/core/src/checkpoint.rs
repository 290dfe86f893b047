//! Single-file container of named tensors, integer arrays and text.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    8 bytes  "SNDCRCKP"
//! version  u32      1
//! count    u32      number of entries
//! entry*   kind u8 (0 = f64 tensor, 1 = u64 array, 2 = UTF-8 text)
//!          name_len u32, name bytes
//!          tensor: ndim u32, dims u64 × ndim, f64 × prod(dims)
//!          array:  len u64, u64 × len
//!          text:   len u64, bytes × len
//! ```

use std::fs;
use std::path::Path;

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"SNDCRCKP";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum Entry {
    Tensor(Tensor),
    Words(Vec<u64>),
    Text(String),
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Container {
    entries: IndexMap<String, Entry>,
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn insert(&mut self, name: impl Into<String>, e: Entry) {
        self.entries.insert(name.into(), e);
    }

    pub fn put_tensor(&mut self, name: impl Into<String>, t: Tensor) {
        self.insert(name, Entry::Tensor(t));
    }

    pub fn put_words(&mut self, name: impl Into<String>, w: Vec<u64>) {
        self.insert(name, Entry::Words(w));
    }

    pub fn put_text(&mut self, name: impl Into<String>, s: impl Into<String>) {
        self.insert(name, Entry::Text(s.into()));
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        match self.entries.get(name) {
            Some(Entry::Tensor(t)) => Some(t),
            _ => None,
        }
    }

    pub fn words(&self, name: &str) -> Result<&[u64]> {
        match self.entries.get(name) {
            Some(Entry::Words(w)) => Ok(w),
            _ => Err(Error::Checkpoint(format!("missing integer entry `{name}`"))),
        }
    }

    pub fn text(&self, name: &str) -> Result<&str> {
        match self.entries.get(name) {
            Some(Entry::Text(s)) => Ok(s),
            _ => Err(Error::Checkpoint(format!("missing text entry `{name}`"))),
        }
    }

    pub fn require_tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensor(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, e) in &self.entries {
            let kind: u8 = match e {
                Entry::Tensor(_) => 0,
                Entry::Words(_) => 1,
                Entry::Text(_) => 2,
            };
            out.push(kind);
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            match e {
                Entry::Tensor(t) => {
                    out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
                    for &d in t.shape() {
                        out.extend_from_slice(&(d as u64).to_le_bytes());
                    }
                    for v in t.data() {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
                Entry::Words(w) => {
                    out.extend_from_slice(&(w.len() as u64).to_le_bytes());
                    for v in w {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
                Entry::Text(s) => {
                    out.extend_from_slice(&(s.len() as u64).to_le_bytes());
                    out.extend_from_slice(s.as_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { b: bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint(
                "not a checkpoint file (bad magic)".into(),
            ));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let count = r.u32()?;
        let mut c = Container::new();
        for _ in 0..count {
            let kind = r.take(1)?[0];
            let nlen = r.u32()? as usize;
            let name = String::from_utf8(r.take(nlen)?.to_vec())
                .map_err(|_| Error::Checkpoint("entry name is not UTF-8".into()))?;
            let e = match kind {
                0 => {
                    let ndim = r.u32()? as usize;
                    let dims = (0..ndim)
                        .map(|_| r.u64().map(|d| d as usize))
                        .collect::<Result<Vec<_>>>()?;
                    let n = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
                    let n = n.ok_or_else(|| Error::Checkpoint(format!("`{name}` too large")))?;
                    let raw = r.take(
                        n.checked_mul(8)
                            .ok_or_else(|| Error::Checkpoint(format!("`{name}` too large")))?,
                    )?;
                    let data = raw
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                        .collect();
                    Entry::Tensor(Tensor::new(&dims, data)?)
                }
                1 => {
                    let n = r.u64()? as usize;
                    Entry::Words((0..n).map(|_| r.u64()).collect::<Result<_>>()?)
                }
                2 => {
                    let n = r.u64()? as usize;
                    let s = String::from_utf8(r.take(n)?.to_vec())
                        .map_err(|_| Error::Checkpoint(format!("`{name}` is not UTF-8")))?;
                    Entry::Text(s)
                }
                k => return Err(Error::Checkpoint(format!("unknown entry kind {k}"))),
            };
            c.entries.insert(name, e);
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes after last entry".into()));
        }
        Ok(c)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes())?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::Load {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
        Self::from_bytes(&bytes).map_err(|e| Error::Load {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })
    }
}

struct Reader<'a> {
    b: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.b.len())
            .ok_or_else(|| Error::Checkpoint("truncated checkpoint".into()))?;
        let s = &self.b[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bytes_round_trip() {
        let mut c = Container::new();
        c.put_tensor("w", Tensor::from_fn(&[2, 3], |i| i as f64 * -0.5));
        c.put_tensor("s", Tensor::scalar(f64::MIN_POSITIVE));
        c.put_words("rng", vec![1, u64::MAX, 0]);
        c.put_text("config", "lr = 0.0002\n");
        let back = Container::from_bytes(&c.to_bytes()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn rejects_corruption() {
        let mut c = Container::new();
        c.put_tensor("w", Tensor::ones(&[4]));
        let mut b = c.to_bytes();
        assert!(Container::from_bytes(&b[..b.len() - 1]).is_err());
        b[0] = b'X';
        assert!(Container::from_bytes(&b).is_err());
    }
}
