//! Self-describing binary container used for model checkpoints and fitted
//! quantile maps.
//!
//! Layout: 8-byte magic, little-endian `u32` header length, JSON header,
//! then the named `f64` sections back to back in little-endian order.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"ZSSDCONT";
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    schema_version: u32,
    kind: String,
    meta: serde_json::Value,
    sections: Vec<(String, usize)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub kind: String,
    pub meta: serde_json::Value,
    pub sections: Vec<(String, Vec<f64>)>,
}

impl Container {
    pub fn new(kind: &str, meta: serde_json::Value) -> Self {
        Container { kind: kind.to_string(), meta, sections: Vec::new() }
    }

    pub fn push(&mut self, name: &str, data: Vec<f64>) {
        self.sections.push((name.to_string(), data));
    }

    pub fn section(&self, name: &str) -> Result<&[f64]> {
        self.sections
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, d)| d.as_slice())
            .ok_or_else(|| Error::Data(format!("container of kind `{}` has no section `{name}`", self.kind)))
    }

    pub fn has_section(&self, name: &str) -> bool {
        self.sections.iter().any(|(n, _)| n == name)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            schema_version: SCHEMA_VERSION,
            kind: self.kind.clone(),
            meta: self.meta.clone(),
            sections: self.sections.iter().map(|(n, d)| (n.clone(), d.len())).collect(),
        };
        let h = serde_json::to_vec(&header).expect("header serializes");
        let payload: usize = self.sections.iter().map(|(_, d)| d.len() * 8).sum();
        let mut out = Vec::with_capacity(12 + h.len() + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(h.len() as u32).to_le_bytes());
        out.extend_from_slice(&h);
        for (_, d) in &self.sections {
            for v in d {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], expected_kind: &str) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..8] != MAGIC {
            return Err(Error::Data("not a container file (bad magic)".into()));
        }
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        let body = bytes.get(12..12 + hlen).ok_or_else(|| Error::Data("truncated container header".into()))?;
        let version: serde_json::Value =
            serde_json::from_slice(body).map_err(|e| Error::Data(format!("container header: {e}")))?;
        match version.get("schema_version").and_then(|v| v.as_u64()) {
            Some(v) if v == SCHEMA_VERSION as u64 => {}
            Some(v) => {
                return Err(Error::Data(format!("unsupported container schema version {v} (expected {SCHEMA_VERSION})")))
            }
            None => return Err(Error::Data("container header lacks a schema version".into())),
        }
        let header: Header = serde_json::from_value(version).map_err(|e| Error::Data(format!("container header: {e}")))?;
        if header.kind != expected_kind {
            return Err(Error::Data(format!("container holds `{}`, expected `{expected_kind}`", header.kind)));
        }
        let mut pos = 12 + hlen;
        let mut sections = Vec::with_capacity(header.sections.len());
        for (name, len) in header.sections {
            let raw = bytes
                .get(pos..pos + 8 * len)
                .ok_or_else(|| Error::Data(format!("container section `{name}` is truncated")))?;
            sections.push((name, raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect()));
            pos += 8 * len;
        }
        if pos != bytes.len() {
            return Err(Error::Data("trailing bytes after container payload".into()));
        }
        Ok(Container { kind: header.kind, meta: header.meta, sections })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path, expected_kind: &str) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Container::from_bytes(&bytes, expected_kind)
    }

    /// Short content hash identifying this container.
    pub fn id(&self) -> String {
        hex16(&Sha256::digest(self.to_bytes()))
    }
}

pub(crate) fn hex16(digest: &[u8]) -> String {
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_kind_check() {
        let mut c = Container::new("thing", serde_json::json!({"a": 1}));
        c.push("x", vec![1.5, -2.0, f64::MIN_POSITIVE]);
        c.push("empty", vec![]);
        let b = c.to_bytes();
        assert_eq!(Container::from_bytes(&b, "thing").unwrap(), c);
        assert!(Container::from_bytes(&b, "other").is_err());
        assert!(Container::from_bytes(&b[..b.len() - 1], "thing").is_err());
    }

    #[test]
    fn rejects_future_schema() {
        let c = Container::new("thing", serde_json::Value::Null);
        let mut b = c.to_bytes();
        let s = String::from_utf8(b[12..].to_vec()).unwrap().replace("\"schema_version\":1", "\"schema_version\":9");
        b.truncate(12);
        b.extend_from_slice(s.as_bytes());
        let err = Container::from_bytes(&b, "thing").unwrap_err().to_string();
        assert!(err.contains("schema version 9"), "{err}");
    }
}
