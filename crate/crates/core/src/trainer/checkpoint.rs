//! `.plck` checkpoint files: an 8-byte little-endian header length, a
//! UTF-8 JSON header, then every tensor as little-endian f32 in header
//! order.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Error, Result};
use crate::tensor::{ParamStore, Tensor};

pub const FORMAT_VERSION: u32 = 1;
const PREFIX: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Text,
    Vision,
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ModelKind::Text => "text",
            ModelKind::Vision => "vision",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub dtype: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub length: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub model_kind: ModelKind,
    pub config: serde_json::Value,
    pub tensors: IndexMap<String, TensorEntry>,
    #[serde(default)]
    pub metrics: serde_json::Value,
    /// Token list of the text model's vocabulary, so inference needs no
    /// side files.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocabulary: Option<Vec<String>>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: ParamStore<f32>,
}

impl Checkpoint {
    pub fn new(model_kind: ModelKind, config: serde_json::Value, params: ParamStore<f32>) -> Self {
        let mut tensors = IndexMap::new();
        let mut offset = 0u64;
        for (name, t) in params.iter() {
            let length = (t.numel() * 4) as u64;
            tensors.insert(name.to_string(), TensorEntry { dtype: "f32".into(), shape: t.shape().to_vec(), offset, length });
            offset += length;
        }
        Checkpoint {
            header: CheckpointHeader {
                format_version: FORMAT_VERSION,
                model_kind,
                config,
                tensors,
                metrics: serde_json::Value::Null,
                vocabulary: None,
            },
            params,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let payload: u64 = self.header.tensors.values().map(|e| e.length).sum();
        let mut out = Vec::with_capacity(PREFIX + header.len() + payload as usize);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, t) in self.params.iter() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Integrity(m) => Error::Integrity(format!("{}: {m}", path.display())),
            Error::Incompatible(m) => Error::Incompatible(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Parses and validates a checkpoint. The tensor table is checked
    /// against the actual payload size before any tensor is allocated.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let header = parse_header(bytes)?;
        let hlen = u64::from_le_bytes(bytes[..PREFIX].try_into().expect("length checked")) as usize;
        let payload = &bytes[PREFIX + hlen..];
        let mut expected = 0u64;
        for (name, e) in &header.tensors {
            if e.dtype != "f32" {
                bail!(Integrity, "tensor {name}: unsupported dtype {:?}", e.dtype);
            }
            let numel = e
                .shape
                .iter()
                .try_fold(1u64, |acc, &d| if d == 0 { None } else { acc.checked_mul(d as u64) })
                .ok_or_else(|| Error::Integrity(format!("tensor {name}: invalid shape {:?}", e.shape)))?;
            if numel.checked_mul(4) != Some(e.length) {
                bail!(Integrity, "tensor {name}: {} bytes declared for shape {:?}", e.length, e.shape);
            }
            if e.offset != expected {
                bail!(Integrity, "tensor {name}: offset {} where {expected} was expected", e.offset);
            }
            expected = expected
                .checked_add(e.length)
                .ok_or_else(|| Error::Integrity(format!("tensor {name}: length overflows")))?;
        }
        if expected != payload.len() as u64 {
            bail!(Integrity, "header declares {expected} payload bytes but {} are present", payload.len());
        }
        let mut params = ParamStore::new();
        for (name, e) in &header.tensors {
            let raw = &payload[e.offset as usize..(e.offset + e.length) as usize];
            let data = raw.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
            let t = Tensor::new(&e.shape, data).map_err(|err| Error::Integrity(format!("tensor {name}: {err}")))?;
            params.add(name.clone(), t).map_err(|err| Error::Integrity(err.to_string()))?;
        }
        Ok(Checkpoint { header, params })
    }

    /// Human-readable tensor table.
    pub fn listing(&self) -> String {
        let h = &self.header;
        let mut s = String::new();
        let total: u64 = h.tensors.values().map(|e| e.length).sum();
        let _ = writeln!(s, "format_version {}", h.format_version);
        let _ = writeln!(s, "model_kind {}", h.model_kind);
        let _ = writeln!(s, "tensors {} ({} parameters, {total} bytes)", h.tensors.len(), total / 4);
        for (name, e) in &h.tensors {
            let _ = writeln!(s, "{name}\t{}\t{:?}\t{}\t{}", e.dtype, e.shape, e.offset, e.length);
        }
        s
    }
}

/// Byte offset into the whole file of a serde_json line/column position.
fn byte_position(json: &[u8], line: usize, column: usize) -> usize {
    let line_start: usize = json.split(|&b| b == b'\n').take(line.saturating_sub(1)).map(|l| l.len() + 1).sum();
    PREFIX + line_start + column.saturating_sub(1)
}

fn parse_header(bytes: &[u8]) -> Result<CheckpointHeader> {
    if bytes.len() < PREFIX {
        bail!(Integrity, "file is {} bytes, too short for the header length prefix", bytes.len());
    }
    let hlen = u64::from_le_bytes(bytes[..PREFIX].try_into().expect("slice of 8"));
    if hlen > (bytes.len() - PREFIX) as u64 {
        bail!(Integrity, "header length {hlen} exceeds the {} bytes after the prefix", bytes.len() - PREFIX);
    }
    let json = &bytes[PREFIX..PREFIX + hlen as usize];
    let value: serde_json::Value = serde_json::from_slice(json).map_err(|e| {
        Error::Integrity(format!("corrupt header JSON at byte {}: {e}", byte_position(json, e.line(), e.column())))
    })?;
    match value.get("format_version").and_then(serde_json::Value::as_u64) {
        Some(v) if v == FORMAT_VERSION as u64 => {}
        Some(v) => bail!(Incompatible, "format version {v}, this build reads version {FORMAT_VERSION}"),
        None => bail!(Integrity, "header has no numeric format_version"),
    }
    serde_json::from_value(value).map_err(|e| Error::Integrity(format!("malformed header: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut p = ParamStore::new();
        p.add("a", Tensor::from_fn(&[2, 3], |i| i as f32 * 0.5 - 1.0)).unwrap();
        p.add("b", Tensor::from_fn(&[4], |i| 1.0 / (i as f32 + 1.0))).unwrap();
        Checkpoint::new(ModelKind::Text, serde_json::json!({"d": 1}), p)
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let c = sample();
        let back = Checkpoint::from_bytes(&c.to_bytes().unwrap()).unwrap();
        assert_eq!(back.header, c.header);
        for ((n1, t1), (n2, t2)) in back.params.iter().zip(c.params.iter()) {
            assert_eq!(n1, n2);
            assert_eq!(t1, t2);
        }
    }

    #[test]
    fn layout_is_prefix_header_payload() {
        let bytes = sample().to_bytes().unwrap();
        let hlen = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        assert_eq!(bytes.len(), 8 + hlen + 10 * 4);
        assert_eq!(&bytes[8 + hlen..8 + hlen + 4], &(-1.0f32).to_le_bytes());
    }

    #[test]
    fn truncation_and_padding_are_integrity_errors() {
        let bytes = sample().to_bytes().unwrap();
        for cut in [0, 3, 8, 20, bytes.len() - 1] {
            assert!(matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(Error::Integrity(_))), "cut {cut}");
        }
        let mut longer = bytes.clone();
        longer.push(0);
        assert!(matches!(Checkpoint::from_bytes(&longer), Err(Error::Integrity(_))));
    }

    #[test]
    fn corrupt_json_reports_position() {
        let mut bytes = sample().to_bytes().unwrap();
        bytes[8 + 1] = b'}';
        match Checkpoint::from_bytes(&bytes) {
            // `{}` closes the object, so the parser trips on byte 2 of the header
            Err(Error::Integrity(m)) => assert!(m.contains("at byte 10"), "{m}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn version_mismatch_is_incompatible() {
        let mut c = sample();
        c.header.format_version = 99;
        assert!(matches!(Checkpoint::from_bytes(&c.to_bytes().unwrap()), Err(Error::Incompatible(_))));
    }

    #[test]
    fn huge_declared_shape_fails_before_allocating() {
        let mut c = sample();
        c.header.tensors[0].shape = vec![1 << 40, 1 << 30];
        assert!(matches!(Checkpoint::from_bytes(&c.to_bytes().unwrap()), Err(Error::Integrity(_))));
    }
}
