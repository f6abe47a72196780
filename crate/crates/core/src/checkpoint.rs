//! Self-describing binary container for named `f64` tensors plus string metadata.
//!
//! Layout (little endian): 8-byte magic, `u32` version, kind string, `u32`
//! metadata count and `(key, value)` strings, `u32` tensor count and for each
//! tensor its name, `u32` rank, `u64` extents and raw `f64` values. Strings
//! are a `u32` byte length followed by UTF-8.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::diff::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"BMICKPT\0";
pub const CONTAINER_VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Container {
    pub kind: String,
    pub meta: BTreeMap<String, String>,
    pub tensors: Vec<(String, Tensor)>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.at + n > self.bytes.len() {
            return Err(Error::Checkpoint(format!(
                "truncated: need {n} bytes at offset {}, file has {}",
                self.at,
                self.bytes.len()
            )));
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| Error::Checkpoint(format!("bad utf-8: {e}")))
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend((s.len() as u32).to_le_bytes());
    out.extend(s.as_bytes());
}

impl Container {
    pub fn new(kind: impl Into<String>) -> Self {
        Self {
            kind: kind.into(),
            ..Self::default()
        }
    }

    pub fn set_meta(&mut self, key: impl Into<String>, value: impl ToString) {
        self.meta.insert(key.into(), value.to_string());
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.tensors.push((name.into(), tensor));
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Checkpoint(format!("missing metadata key {key}")))
    }

    pub fn meta_parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let v = self.meta(key)?;
        v.parse()
            .map_err(|_| Error::Checkpoint(format!("metadata {key}='{v}' does not parse")))
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))
    }

    /// Tensor `name` with the exact expected shape.
    pub fn tensor_shaped(&self, name: &str, shape: &[usize]) -> Result<&Tensor> {
        let t = self.tensor(name)?;
        if t.shape() != shape {
            return Err(Error::Checkpoint(format!(
                "tensor {name} has shape {:?}, expected {shape:?}",
                t.shape()
            )));
        }
        Ok(t)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend(MAGIC);
        out.extend(CONTAINER_VERSION.to_le_bytes());
        put_str(&mut out, &self.kind);
        out.extend((self.meta.len() as u32).to_le_bytes());
        for (k, v) in &self.meta {
            put_str(&mut out, k);
            put_str(&mut out, v);
        }
        out.extend((self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            put_str(&mut out, name);
            out.extend((t.shape().len() as u32).to_le_bytes());
            for d in t.shape() {
                out.extend((*d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend(v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, at: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != CONTAINER_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported container version {version}, expected {CONTAINER_VERSION}"
            )));
        }
        let kind = r.string()?;
        let mut meta = BTreeMap::new();
        for _ in 0..r.u32()? {
            let k = r.string()?;
            let v = r.string()?;
            meta.insert(k, v);
        }
        let mut tensors = Vec::new();
        for _ in 0..r.u32()? {
            let name = r.string()?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let len: usize = shape.iter().product();
            let raw = r.take(len * 8)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            tensors.push((name, Tensor::new(shape, data)?));
        }
        if r.at != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.at)));
        }
        Ok(Self { kind, meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Load and require `kind`.
    pub fn load_kind(path: &Path, kind: &str) -> Result<Self> {
        let c = Self::load(path)?;
        if c.kind != kind {
            return Err(Error::Checkpoint(format!(
                "{} holds a '{}' checkpoint, expected '{kind}'",
                path.display(),
                c.kind
            )));
        }
        Ok(c)
    }
}
