//! Self-describing binary container shared by checkpoints, datasets and filter traces.
//!
//! Layout (all integers little-endian):
//!
//! | bytes        | content                                              |
//! |--------------|------------------------------------------------------|
//! | 0..8         | magic `b"DVSMCBIN"`                                  |
//! | 8..12        | `u32` format version (currently 1)                   |
//! | 12..20       | `u64` header length `H` in bytes                     |
//! | 20..20+H     | UTF-8 JSON header                                    |
//! | 20+H..       | payload: concatenated row-major `f64` LE arrays       |
//!
//! The header is `{"kind": str, "metadata": any, "entries": [{"name", "shape",
//! "offset"}]}` where `offset` counts `f64` elements from the payload start.
//! Entries appear in payload order with no padding.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"DVSMCBIN";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct EntryHeader {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    kind: String,
    metadata: serde_json::Value,
    entries: Vec<EntryHeader>,
}

/// Named tensors plus free-form JSON metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub kind: String,
    pub metadata: serde_json::Value,
    pub entries: Vec<(String, Tensor)>,
}

impl Container {
    pub fn new(kind: impl Into<String>, metadata: serde_json::Value) -> Self {
        Self {
            kind: kind.into(),
            metadata,
            entries: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.entries.push((name.into(), tensor));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::Format(format!("{} container has no entry {name}", self.kind)))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0;
        let entries = self
            .entries
            .iter()
            .map(|(name, t)| {
                let e = EntryHeader {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                    offset,
                };
                offset += t.numel();
                e
            })
            .collect();
        let header = serde_json::to_vec(&Header {
            kind: self.kind.clone(),
            metadata: self.metadata.clone(),
            entries,
        })?;
        let mut out = Vec::with_capacity(20 + header.len() + offset * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, t) in &self.entries {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(Error::Format("not a DVSMCBIN container".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported container version {version} (expected {FORMAT_VERSION})"
            )));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let payload_start = 20usize
            .checked_add(hlen)
            .filter(|&end| end <= bytes.len())
            .ok_or_else(|| Error::Format("truncated container header".into()))?;
        let header: Header = serde_json::from_slice(&bytes[20..payload_start])?;
        let payload = &bytes[payload_start..];
        let mut entries = Vec::with_capacity(header.entries.len());
        for e in header.entries {
            let n: usize = e.shape.iter().product();
            let (start, end) = (e.offset * 8, (e.offset + n) * 8);
            if end > payload.len() {
                return Err(Error::Format(format!("entry {} runs past the payload", e.name)));
            }
            let data = payload[start..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            entries.push((e.name, Tensor::new(e.shape, data)?));
        }
        Ok(Self {
            kind: header.kind,
            metadata: header.metadata,
            entries,
        })
    }

    pub fn write_to(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes()?)?;
        Ok(())
    }

    pub fn read_from(path: impl AsRef<Path>) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn roundtrip(values in proptest::collection::vec(-1e6f64..1e6, 0..40), rows in 1usize..4) {
            let n = values.len() / rows * rows;
            let t = Tensor::new([rows, n / rows], values[..n].to_vec()).unwrap();
            let mut c = Container::new("test", serde_json::json!({"seed": 3}));
            c.push("a", t);
            c.push("b", Tensor::scalar(2.5));
            let back = Container::from_bytes(&c.to_bytes().unwrap()).unwrap();
            prop_assert_eq!(back, c);
        }
    }

    #[test]
    fn rejects_bad_magic_and_version() {
        assert!(Container::from_bytes(b"nonsense-bytes-here-xx").is_err());
        let mut bytes = Container::new("k", serde_json::Value::Null).to_bytes().unwrap();
        bytes[8] = 9;
        assert!(Container::from_bytes(&bytes).is_err());
    }

    #[test]
    fn header_layout_is_documented_one() {
        let mut c = Container::new("k", serde_json::Value::Null);
        c.push("x", Tensor::from_vec(vec![1.0, -2.0]));
        let bytes = c.to_bytes().unwrap();
        assert_eq!(&bytes[..8], MAGIC);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 1);
        let h = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        assert_eq!(bytes.len(), 20 + h + 16);
        assert_eq!(&bytes[20 + h..20 + h + 8], &1.0f64.to_le_bytes());
    }
}
