//! Versioned binary container of named tensors plus a JSON metadata header.
//!
//! Layout: `b"TSGL"`, 4-byte kind tag, `u32` version, `u64` header length,
//! UTF-8 JSON header, then the raw little-endian tensor data in header order.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use tsgl_tensor::{Scalar, Tensor};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"TSGL";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    dtype: String,
    meta: Value,
    tensors: Vec<Entry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Container<T> {
    pub kind: [u8; 4],
    pub meta: Value,
    pub tensors: Vec<(String, Tensor<T>)>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl<T: Scalar> Container<T> {
    pub fn new(kind: &[u8; 4], meta: Value) -> Self {
        Container { kind: *kind, meta, tensors: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.tensors.push((name.into(), t));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn take(&mut self, name: &str) -> Result<Tensor<T>> {
        let i = self.tensors.iter().position(|(n, _)| n == name).ok_or_else(|| bad(format!("missing tensor {name}")))?;
        Ok(self.tensors.remove(i).1)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            dtype: T::DTYPE.name().to_string(),
            meta: self.meta.clone(),
            tensors: self.tensors.iter().map(|(n, t)| Entry { name: n.clone(), shape: t.shape().to_vec() }).collect(),
        };
        let hj = serde_json::to_vec(&header).map_err(|e| bad(e.to_string()))?;
        let payload: usize = self.tensors.iter().map(|(_, t)| t.numel()).sum::<usize>() * T::DTYPE.size();
        let mut out = Vec::with_capacity(20 + hj.len() + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.kind);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(hj.len() as u64).to_le_bytes());
        out.extend_from_slice(&hj);
        for (_, t) in &self.tensors {
            for &v in t.data() {
                v.write_le(&mut out);
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], kind: &[u8; 4]) -> Result<Self> {
        if bytes.len() < 20 || &bytes[..4] != MAGIC {
            return Err(bad("not a TSGL container"));
        }
        if &bytes[4..8] != kind {
            return Err(bad(format!(
                "container kind {:?}, expected {:?}",
                String::from_utf8_lossy(&bytes[4..8]),
                String::from_utf8_lossy(kind)
            )));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(bad(format!("format version {version}, expected {FORMAT_VERSION}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let hend = 20usize.checked_add(hlen).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(&bytes[20..hend]).map_err(|e| bad(e.to_string()))?;
        if header.dtype != T::DTYPE.name() {
            return Err(bad(format!("stored dtype {}, expected {}", header.dtype, T::DTYPE.name())));
        }
        let sz = T::DTYPE.size();
        let mut pos = hend;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in header.tensors {
            let n: usize = e.shape.iter().product();
            let end = pos + n * sz;
            if end > bytes.len() {
                return Err(bad(format!("truncated data for {}", e.name)));
            }
            let data = bytes[pos..end].chunks_exact(sz).map(T::read_le).collect();
            tensors.push((e.name, Tensor::new(&e.shape, data)?));
            pos = end;
        }
        if pos != bytes.len() {
            return Err(bad("trailing bytes after tensor data"));
        }
        Ok(Container { kind: *kind, meta: header.meta, tensors })
    }

    /// Writes atomically through a temporary sibling file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path, kind: &[u8; 4]) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?, kind)
    }
}
