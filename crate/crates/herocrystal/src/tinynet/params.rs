//! Named flat parameter storage and its checkpoint format.
//!
//! Checkpoint byte layout (all integers little-endian):
//!
//! ```text
//! magic            4 bytes  b"HCPM"
//! format version   u32      currently 1
//! map version      u64
//! header length    u32
//! header           JSON     {"entries":[{"name","shape","offset"}...],"meta":{...}}
//! payload          f64 LE   entry data concatenated in header order
//! ```
//!
//! `offset` counts f64 elements from the start of the payload. Serialization
//! is bit-exact: the same map always produces the same bytes, so file sizes
//! and checksums can stand in for transmitted bytes in the communication
//! ledger.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const BACKBONE_PREFIX: &str = "backbone.";
pub const HEAD_PREFIX: &str = "head.";

const MAGIC: &[u8; 4] = b"HCPM";
const FORMAT_VERSION: u32 = 1;

/// One named tensor: immutable shape plus flat values.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::ShapeMismatch {
                name: "<tensor>".into(),
                expected: shape,
                got: vec![data.len()],
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::config("tensor values must be finite"));
        }
        Ok(Tensor { shape, data })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Replace values, keeping the shape.
    pub fn set_data(&mut self, data: Vec<f64>) -> Result<()> {
        if data.len() != self.data.len() {
            return Err(Error::ShapeMismatch {
                name: "<tensor>".into(),
                expected: self.shape.clone(),
                got: vec![data.len()],
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::config("tensor values must be finite"));
        }
        self.data = data;
        Ok(())
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct HeaderEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    entries: Vec<HeaderEntry>,
    #[serde(default)]
    meta: serde_json::Value,
}

/// Ordered map of named tensors; the unit every protocol message and
/// checkpoint is made of.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterMap {
    entries: IndexMap<String, Tensor>,
    version: u64,
    meta: serde_json::Value,
}

impl Default for ParameterMap {
    fn default() -> Self {
        ParameterMap::new()
    }
}

impl ParameterMap {
    pub fn new() -> ParameterMap {
        ParameterMap {
            entries: IndexMap::new(),
            version: 0,
            meta: serde_json::Value::Null,
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::config(format!("duplicate parameter name `{name}`")));
        }
        let tensor = Tensor::new(shape, data).map_err(|e| match e {
            Error::ShapeMismatch { expected, got, .. } => Error::ShapeMismatch { name: name.clone(), expected, got },
            other => other,
        })?;
        self.entries.insert(name, tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_elements(&self) -> usize {
        self.entries.values().map(|t| t.len()).sum()
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn set_version(&mut self, version: u64) {
        self.version = version;
    }

    pub fn meta(&self) -> &serde_json::Value {
        &self.meta
    }

    pub fn set_meta(&mut self, meta: serde_json::Value) {
        self.meta = meta;
    }

    /// Clone of the entries whose names start with `prefix`, in order.
    pub fn filtered(&self, prefix: &str) -> ParameterMap {
        let mut out = ParameterMap::new();
        out.version = self.version;
        for (name, tensor) in &self.entries {
            if name.starts_with(prefix) {
                out.entries.insert(name.clone(), tensor.clone());
            }
        }
        out
    }

    pub fn backbone(&self) -> ParameterMap {
        self.filtered(BACKBONE_PREFIX)
    }

    pub fn head(&self) -> ParameterMap {
        self.filtered(HEAD_PREFIX)
    }

    /// Copy values from `other` into entries with matching names.
    ///
    /// Every entry of `other` must exist here with the same shape.
    pub fn load_values(&mut self, other: &ParameterMap) -> Result<()> {
        for (name, tensor) in &other.entries {
            let target = self
                .entries
                .get_mut(name)
                .ok_or_else(|| Error::protocol(format!("missing parameter `{name}`")))?;
            if target.shape() != tensor.shape() {
                return Err(Error::ShapeMismatch {
                    name: name.clone(),
                    expected: target.shape().to_vec(),
                    got: tensor.shape().to_vec(),
                });
            }
            target.set_data(tensor.data().to_vec())?;
        }
        Ok(())
    }

    /// Squared L2 distance over entries with the given prefix.
    pub fn sq_distance(&self, other: &ParameterMap, prefix: &str) -> Result<f64> {
        let mut total = 0.0;
        for (name, tensor) in &self.entries {
            if !name.starts_with(prefix) {
                continue;
            }
            let peer = other
                .entries
                .get(name)
                .ok_or_else(|| Error::protocol(format!("missing parameter `{name}` in peer map")))?;
            if peer.shape() != tensor.shape() {
                return Err(Error::ShapeMismatch {
                    name: name.clone(),
                    expected: tensor.shape().to_vec(),
                    got: peer.shape().to_vec(),
                });
            }
            total += tensor
                .data()
                .iter()
                .zip(peer.data())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>();
        }
        Ok(total)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut header = Header { entries: Vec::with_capacity(self.entries.len()), meta: self.meta.clone() };
        let mut offset = 0usize;
        for (name, tensor) in &self.entries {
            header.entries.push(HeaderEntry { name: name.clone(), shape: tensor.shape().to_vec(), offset });
            offset += tensor.len();
        }
        let header_json = serde_json::to_vec(&header)?;
        let mut bytes = Vec::with_capacity(4 + 4 + 8 + 4 + header_json.len() + offset * 8);
        bytes.extend_from_slice(MAGIC);
        bytes.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        bytes.extend_from_slice(&self.version.to_le_bytes());
        bytes.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
        bytes.extend_from_slice(&header_json);
        for tensor in self.entries.values() {
            for v in tensor.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<ParameterMap> {
        let fail = |msg: &str| Error::Checkpoint(msg.to_string());
        if bytes.len() < 20 || &bytes[..4] != MAGIC {
            return Err(fail("bad magic"));
        }
        let format = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if format != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {format}")));
        }
        let version = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
        let header_len = u32::from_le_bytes(bytes[16..20].try_into().unwrap()) as usize;
        if bytes.len() < 20 + header_len {
            return Err(fail("truncated header"));
        }
        let header: Header = serde_json::from_slice(&bytes[20..20 + header_len])?;
        let payload = &bytes[20 + header_len..];
        if payload.len() % 8 != 0 {
            return Err(fail("payload not a multiple of 8 bytes"));
        }
        let total = payload.len() / 8;
        let mut map = ParameterMap::new();
        map.version = version;
        map.meta = header.meta;
        for entry in header.entries {
            let len: usize = entry.shape.iter().product();
            if entry.offset + len > total {
                return Err(fail("entry extends past payload"));
            }
            let mut data = Vec::with_capacity(len);
            for i in 0..len {
                let start = (entry.offset + i) * 8;
                data.push(f64::from_le_bytes(payload[start..start + 8].try_into().unwrap()));
            }
            map.insert(entry.name, entry.shape, data)?;
        }
        Ok(map)
    }

    /// Serialized size in bytes; matches `to_bytes().len()` exactly.
    pub fn byte_size(&self) -> Result<usize> {
        Ok(self.to_bytes()?.len())
    }

    /// SHA-256 of the serialized bytes, hex-encoded.
    pub fn checksum(&self) -> Result<String> {
        let bytes = self.to_bytes()?;
        let digest = Sha256::digest(&bytes);
        Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
    }

    pub fn write_file(&self, path: &std::path::Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn read_file(path: &std::path::Path) -> Result<ParameterMap> {
        let bytes = std::fs::read(path)?;
        ParameterMap::from_bytes(&bytes)
    }
}
