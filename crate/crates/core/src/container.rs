//! Binary container shared by checkpoints and feature caches.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "SKIPFRG\0"
//! version  u32
//! kind     u32 length + UTF-8
//! header   u64 length + canonical JSON {"meta": .., "tensors": [{"name", "shape"}, ..]}
//! data     f32 values of every tensor, in header order
//! ```

use std::io::{Read, Write};
use std::path::Path;

use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"SKIPFRG\0";
pub const FORMAT_VERSION: u32 = 1;

/// Serialises with object keys sorted and no insignificant whitespace.
pub fn canonical_json<T: Serialize + ?Sized>(value: &T) -> Result<String> {
    let v = serde_json::to_value(value)?;
    Ok(serde_json::to_string(&sort_keys(v))?)
}

fn sort_keys(v: Value) -> Value {
    match v {
        Value::Object(map) => {
            let mut entries: Vec<_> = map.into_iter().map(|(k, v)| (k, sort_keys(v))).collect();
            entries.sort_by(|a, b| a.0.cmp(&b.0));
            Value::Object(entries.into_iter().collect())
        }
        Value::Array(items) => Value::Array(items.into_iter().map(sort_keys).collect()),
        other => other,
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub kind: String,
    pub meta: Value,
    pub tensors: Vec<(String, Tensor)>,
}

impl Container {
    pub fn new(kind: impl Into<String>, meta: Value) -> Self {
        Self { kind: kind.into(), meta, tensors: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.push((name.into(), t));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Tensors whose name starts with `prefix`, with the prefix stripped.
    pub fn with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = (&'a str, &'a Tensor)> + 'a {
        self.tensors.iter().filter_map(move |(n, t)| n.strip_prefix(prefix).map(|s| (s, t)))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let index: Vec<Value> =
            self.tensors.iter().map(|(n, t)| serde_json::json!({ "name": n, "shape": t.shape() })).collect();
        let header = canonical_json(&serde_json::json!({ "meta": self.meta, "tensors": index }))?;
        let floats: usize = self.tensors.iter().map(|(_, t)| t.len()).sum();
        let mut out = Vec::with_capacity(32 + self.kind.len() + header.len() + 4 * floats);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.kind.len() as u32).to_le_bytes());
        out.extend_from_slice(self.kind.as_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| "truncated magic".to_string())?;
        if &magic != MAGIC {
            return Err("not a skipforge container".into());
        }
        let version = read_u32(&mut r)?;
        if version != FORMAT_VERSION {
            return Err(format!("format version {version}, expected {FORMAT_VERSION}"));
        }
        let kind_len = read_u32(&mut r)? as usize;
        let kind = String::from_utf8(take(&mut r, kind_len)?.to_vec()).map_err(|e| e.to_string())?;
        let header_len = read_u64(&mut r)? as usize;
        let header: Value = serde_json::from_slice(take(&mut r, header_len)?).map_err(|e| e.to_string())?;
        let meta = header.get("meta").cloned().unwrap_or(Value::Null);
        let index = header.get("tensors").and_then(Value::as_array).ok_or("header has no tensor index")?;
        let mut tensors = Vec::with_capacity(index.len());
        for entry in index {
            let name = entry.get("name").and_then(Value::as_str).ok_or("tensor without name")?;
            let shape: Vec<usize> = serde_json::from_value(entry.get("shape").cloned().unwrap_or(Value::Null))
                .map_err(|e| e.to_string())?;
            let n: usize = shape.iter().product();
            let raw = take(&mut r, 4 * n)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            tensors.push((name.to_string(), Tensor::new(shape, data).map_err(|e| e.to_string())?));
        }
        if !r.is_empty() {
            return Err(format!("{} trailing bytes", r.len()));
        }
        Ok(Self { kind, meta, tensors })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("partial");
        {
            let mut f = std::fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes).map_err(|message| Error::Checkpoint { path: path.to_path_buf(), message })
    }
}

fn take<'a>(r: &mut &'a [u8], n: usize) -> std::result::Result<&'a [u8], String> {
    if r.len() < n {
        return Err("truncated container".into());
    }
    let (head, tail) = r.split_at(n);
    *r = tail;
    Ok(head)
}

fn read_u32(r: &mut &[u8]) -> std::result::Result<u32, String> {
    let b = take(r, 4)?;
    Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
}

fn read_u64(r: &mut &[u8]) -> std::result::Result<u64, String> {
    let b = take(r, 8)?;
    Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn canonical_json_sorts_nested_keys() {
        let v = serde_json::json!({"b": 1, "a": {"z": 1, "y": [ {"d": 1, "c": 2} ]}});
        assert_eq!(canonical_json(&v).unwrap(), r#"{"a":{"y":[{"c":2,"d":1}],"z":1},"b":1}"#);
    }

    #[test]
    fn rejects_other_versions_and_garbage() {
        let c = Container::new("x", Value::Null);
        let mut bytes = c.to_bytes().unwrap();
        bytes[8] = 2;
        assert!(Container::from_bytes(&bytes).unwrap_err().contains("version"));
        assert!(Container::from_bytes(b"nonsense").is_err());
        let mut ok = c.to_bytes().unwrap();
        ok.push(0);
        assert!(Container::from_bytes(&ok).is_err());
    }

    proptest! {
        #[test]
        fn round_trips_arbitrary_tensors(
            shapes in prop::collection::vec(prop::collection::vec(1usize..4, 1..4), 0..4),
            seed in any::<u64>(),
        ) {
            let mut c = Container::new("test", serde_json::json!({"seed": seed}));
            for (i, s) in shapes.iter().enumerate() {
                let n: usize = s.iter().product();
                let data = (0..n).map(|j| ((seed as f64 + j as f64) * 0.37).sin() as f32).collect();
                c.push(format!("t{i}"), Tensor::new(s.clone(), data).unwrap());
            }
            let back = Container::from_bytes(&c.to_bytes().unwrap()).unwrap();
            prop_assert_eq!(back, c);
        }
    }
}
