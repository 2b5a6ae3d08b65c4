//! MHW v1 named-tensor archives.
//!
//! Layout, all integers little-endian:
//!
//! | bytes            | content                                   |
//! |------------------|-------------------------------------------|
//! | 0..8             | magic `MHWV0001`                          |
//! | 8..16            | `u64` header length `h`                   |
//! | 16..16+h         | UTF-8 JSON header                         |
//! | 16+h..           | payload, tensors at their header offsets  |
//!
//! The header is `{"version": 1, "provenance": str, "metadata": object,
//! "tensors": [{"name", "dtype": "f64"|"f32", "shape", "offset", "nbytes"}]}`
//! with offsets relative to the payload start. Tensors are row-major. The
//! payload must be exactly covered by the directory with no overlap and no
//! trailing bytes.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkernel::Tensor;

pub const MAGIC: &[u8; 8] = b"MHWV0001";
pub const FORMAT_VERSION: u32 = 1;
const PREFIX_LEN: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F64,
    F32,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::F64 => 8,
            DType::F32 => 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArchiveTensor {
    pub name: String,
    /// Storage precision on disk; values are always held as `f64`.
    pub dtype: DType,
    pub tensor: Tensor,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct WeightArchive {
    pub provenance: String,
    pub metadata: BTreeMap<String, serde_json::Value>,
    tensors: Vec<ArchiveTensor>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    version: u32,
    provenance: String,
    #[serde(default)]
    metadata: BTreeMap<String, serde_json::Value>,
    tensors: Vec<Entry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Entry {
    name: String,
    dtype: DType,
    shape: Vec<usize>,
    offset: u64,
    nbytes: u64,
}

fn corrupt(path: &str, msg: impl Into<String>) -> Error {
    Error::Archive {
        path: path.into(),
        msg: msg.into(),
    }
}

impl WeightArchive {
    pub fn new(provenance: impl Into<String>) -> Self {
        WeightArchive {
            provenance: provenance.into(),
            metadata: BTreeMap::new(),
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        self.push_as(name, tensor, DType::F64)
    }

    pub fn push_as(&mut self, name: impl Into<String>, tensor: Tensor, dtype: DType) -> Result<()> {
        let name = name.into();
        if self.get(&name).is_some() {
            return Err(Error::invalid(format!("duplicate tensor name {name}")));
        }
        self.tensors.push(ArchiveTensor { name, dtype, tensor });
        Ok(())
    }

    pub fn tensors(&self) -> &[ArchiveTensor] {
        &self.tensors
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name).map(|t| &t.tensor)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.iter().map(|t| t.name.as_str())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut payload = Vec::new();
        for t in &self.tensors {
            let offset = payload.len() as u64;
            match t.dtype {
                DType::F64 => t.tensor.data().iter().for_each(|v| payload.extend_from_slice(&v.to_le_bytes())),
                DType::F32 => t
                    .tensor
                    .data()
                    .iter()
                    .for_each(|&v| payload.extend_from_slice(&(v as f32).to_le_bytes())),
            }
            entries.push(Entry {
                name: t.name.clone(),
                dtype: t.dtype,
                shape: t.tensor.shape().to_vec(),
                offset,
                nbytes: payload.len() as u64 - offset,
            });
        }
        let header = serde_json::to_vec(&Header {
            version: FORMAT_VERSION,
            provenance: self.provenance.clone(),
            metadata: self.metadata.clone(),
            tensors: entries,
        })?;
        let mut out = Vec::with_capacity(PREFIX_LEN + header.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    /// Parses and fully validates an archive; `origin` names the source in errors.
    pub fn from_bytes(bytes: &[u8], origin: &str) -> Result<Self> {
        if bytes.len() < PREFIX_LEN {
            return Err(corrupt(origin, format!("file of {} bytes is shorter than the prefix", bytes.len())));
        }
        if &bytes[..4] != b"MHWV" {
            return Err(corrupt(origin, "bad magic; not an MHW archive"));
        }
        if &bytes[..8] != MAGIC {
            return Err(corrupt(
                origin,
                format!(
                    "unsupported archive version {:?}; this reader handles {:?}",
                    String::from_utf8_lossy(&bytes[4..8]),
                    "0001"
                ),
            ));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
        let header_end = (PREFIX_LEN as u64)
            .checked_add(header_len)
            .filter(|&e| e <= bytes.len() as u64)
            .ok_or_else(|| corrupt(origin, format!("header length {header_len} runs past end of file")))?
            as usize;
        let header: Header = serde_json::from_slice(&bytes[PREFIX_LEN..header_end])
            .map_err(|e| corrupt(origin, format!("header is not valid: {e}")))?;
        if header.version != FORMAT_VERSION {
            return Err(corrupt(
                origin,
                format!("header version {} is not supported (expected {FORMAT_VERSION})", header.version),
            ));
        }
        let payload = &bytes[header_end..];

        let mut seen = HashSet::new();
        let mut spans = Vec::with_capacity(header.tensors.len());
        for e in &header.tensors {
            if !seen.insert(e.name.as_str()) {
                return Err(corrupt(origin, format!("duplicate tensor name {}", e.name)));
            }
            let numel = e
                .shape
                .iter()
                .try_fold(1u64, |acc, &d| acc.checked_mul(d as u64))
                .ok_or_else(|| corrupt(origin, format!("shape of {} overflows", e.name)))?;
            if numel.checked_mul(e.dtype.size() as u64) != Some(e.nbytes) {
                return Err(corrupt(
                    origin,
                    format!("{}: {} bytes do not match shape {:?} as {:?}", e.name, e.nbytes, e.shape, e.dtype),
                ));
            }
            let end = e
                .offset
                .checked_add(e.nbytes)
                .filter(|&end| end <= payload.len() as u64)
                .ok_or_else(|| {
                    corrupt(
                        origin,
                        format!("{} extends past the payload of {} bytes (truncated?)", e.name, payload.len()),
                    )
                })?;
            spans.push((e.offset, end, e.name.as_str()));
        }
        spans.sort();
        let mut cursor = 0u64;
        for &(start, end, name) in &spans {
            if start < cursor {
                return Err(corrupt(origin, format!("{name} overlaps the preceding tensor")));
            }
            cursor = cursor.max(end);
        }
        if cursor != payload.len() as u64 {
            return Err(corrupt(
                origin,
                format!("payload has {} bytes but the directory covers {cursor}", payload.len()),
            ));
        }

        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in header.tensors {
            let raw = &payload[e.offset as usize..(e.offset + e.nbytes) as usize];
            let data: Vec<f64> = match e.dtype {
                DType::F64 => raw
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect(),
                DType::F32 => raw
                    .chunks_exact(4)
                    .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
                    .collect(),
            };
            tensors.push(ArchiveTensor {
                tensor: Tensor::new(e.shape, data)?,
                name: e.name,
                dtype: e.dtype,
            });
        }
        Ok(WeightArchive {
            provenance: header.provenance,
            metadata: header.metadata,
            tensors,
        })
    }
}

/// Writes through a sibling temporary file so readers never see a partial archive.
pub fn save_archive(archive: &WeightArchive, path: &Path) -> Result<()> {
    let bytes = archive.to_bytes()?;
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".partial");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_archive(path: &Path) -> Result<WeightArchive> {
    let bytes = fs::read(path).map_err(|e| corrupt(&path.display().to_string(), e.to_string()))?;
    WeightArchive::from_bytes(&bytes, &path.display().to_string())
}
