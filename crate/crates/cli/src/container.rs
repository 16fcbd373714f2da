//! The `TSPT0001` named-array container.
//!
//! Layout: 8-byte magic, `u64` little-endian header length, a UTF-8 JSON
//! header, then the payload. Arrays are stored row-major (last index
//! fastest), little-endian, each starting at a 64-byte aligned offset from
//! the payload start. The writer pads the header with spaces so that the
//! payload itself also starts on a 64-byte boundary of the file.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

pub const MAGIC: &[u8; 8] = b"TSPT0001";
pub const ALIGN: usize = 64;
const PREFIX: usize = 16;

#[derive(Debug, thiserror::Error)]
pub enum ContainerError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed container: {0}")]
    Format(String),
    #[error("schema violation: {0}")]
    Schema(String),
}

fn format_err(msg: impl Into<String>) -> ContainerError {
    ContainerError::Format(msg.into())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Dtype {
    #[serde(rename = "f32")]
    F32,
    #[serde(rename = "f64")]
    F64,
    #[serde(rename = "u8")]
    U8,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
            Dtype::U8 => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Dtype::F32 => "f32",
            Dtype::F64 => "f64",
            Dtype::U8 => "u8",
        }
    }
}

impl std::str::FromStr for Dtype {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "f32" => Ok(Dtype::F32),
            "f64" => Ok(Dtype::F64),
            "u8" => Ok(Dtype::U8),
            other => Err(format!("unknown dtype {other:?} (expected f32, f64 or u8)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArrayEntry {
    pub name: String,
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub nbytes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub arrays: Vec<ArrayEntry>,
    #[serde(default)]
    pub meta: Map<String, Value>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum ArrayData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U8(Vec<u8>),
}

impl ArrayData {
    pub fn dtype(&self) -> Dtype {
        match self {
            ArrayData::F32(_) => Dtype::F32,
            ArrayData::F64(_) => Dtype::F64,
            ArrayData::U8(_) => Dtype::U8,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            ArrayData::F32(v) => v.len(),
            ArrayData::F64(v) => v.len(),
            ArrayData::U8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn write_le(&self, out: &mut Vec<u8>) {
        match self {
            ArrayData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            ArrayData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            ArrayData::U8(v) => out.extend_from_slice(v),
        }
    }

    fn read_le(dtype: Dtype, bytes: &[u8]) -> ArrayData {
        match dtype {
            Dtype::F32 => ArrayData::F32(
                bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                    .collect(),
            ),
            Dtype::F64 => ArrayData::F64(
                bytes
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect(),
            ),
            Dtype::U8 => ArrayData::U8(bytes.to_vec()),
        }
    }
}

/// One named, shaped array.
#[derive(Clone, Debug, PartialEq)]
pub struct Array {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: ArrayData,
}

impl Array {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: ArrayData) -> Result<Self, ContainerError> {
        let name = name.into();
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(ContainerError::Schema(format!(
                "array {name}: shape {shape:?} holds {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self { name, shape, data })
    }

    /// Stores `values` as `dtype`; `u8` requires integral values in `0..=255`.
    pub fn from_f64(name: impl Into<String>, shape: Vec<usize>, values: &[f64], dtype: Dtype) -> Result<Self, ContainerError> {
        let data = match dtype {
            Dtype::F64 => ArrayData::F64(values.to_vec()),
            Dtype::F32 => ArrayData::F32(values.iter().map(|&v| v as f32).collect()),
            Dtype::U8 => ArrayData::U8(
                values
                    .iter()
                    .map(|&v| {
                        if v.fract() == 0.0 && (0.0..=255.0).contains(&v) {
                            Ok(v as u8)
                        } else {
                            Err(ContainerError::Schema(format!("value {v} does not fit u8")))
                        }
                    })
                    .collect::<Result<_, _>>()?,
            ),
        };
        Array::new(name, shape, data)
    }

    pub fn dtype(&self) -> Dtype {
        self.data.dtype()
    }

    pub fn to_f64(&self) -> Vec<f64> {
        match &self.data {
            ArrayData::F32(v) => v.iter().map(|&x| x as f64).collect(),
            ArrayData::F64(v) => v.clone(),
            ArrayData::U8(v) => v.iter().map(|&x| x as f64).collect(),
        }
    }

    pub fn nbytes(&self) -> usize {
        self.data.len() * self.dtype().size()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Container {
    pub arrays: Vec<Array>,
    pub meta: Map<String, Value>,
}

fn align_up(n: usize) -> usize {
    n.div_ceil(ALIGN) * ALIGN
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, a: Array) -> Result<(), ContainerError> {
        if a.name.is_empty() {
            return Err(ContainerError::Schema("array names must be nonempty".into()));
        }
        if self.get(&a.name).is_some() {
            return Err(ContainerError::Schema(format!("duplicate array name {:?}", a.name)));
        }
        self.arrays.push(a);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Array> {
        self.arrays.iter().find(|a| a.name == name)
    }

    pub fn require(&self, name: &str) -> Result<&Array, ContainerError> {
        self.get(name)
            .ok_or_else(|| ContainerError::Schema(format!("missing array {name:?}")))
    }

    /// The header that [`Container::to_bytes`] writes.
    pub fn header(&self) -> Header {
        let mut offset = 0;
        let arrays = self
            .arrays
            .iter()
            .map(|a| {
                offset = align_up(offset);
                let e = ArrayEntry {
                    name: a.name.clone(),
                    dtype: a.dtype(),
                    shape: a.shape.clone(),
                    offset,
                    nbytes: a.nbytes(),
                };
                offset += e.nbytes;
                e
            })
            .collect();
        Header {
            arrays,
            meta: self.meta.clone(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = self.header();
        let mut json = serde_json::to_vec(&header).expect("header serializes");
        json.resize(align_up(PREFIX + json.len()) - PREFIX, b' ');
        let mut out = Vec::with_capacity(PREFIX + json.len() + header.arrays.iter().map(|e| e.nbytes + ALIGN).sum::<usize>());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        let start = out.len();
        for (a, e) in self.arrays.iter().zip(&header.arrays) {
            out.resize(start + e.offset, 0);
            a.data.write_le(&mut out);
        }
        out
    }

    /// Parses and fully validates a container.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ContainerError> {
        let (header, payload) = parse_header(bytes)?;
        let arrays = header
            .arrays
            .iter()
            .map(|e| Array {
                name: e.name.clone(),
                shape: e.shape.clone(),
                data: ArrayData::read_le(e.dtype, &payload[e.offset..e.offset + e.nbytes]),
            })
            .collect();
        Ok(Container {
            arrays,
            meta: header.meta,
        })
    }

    pub fn read(path: &Path) -> Result<Self, ContainerError> {
        let bytes = std::fs::read(path).map_err(|source| ContainerError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }

    pub fn write(&self, path: &Path) -> Result<(), ContainerError> {
        std::fs::write(path, self.to_bytes()).map_err(|source| ContainerError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn meta_usize(&self, key: &str) -> Result<usize, ContainerError> {
        self.meta
            .get(key)
            .and_then(Value::as_u64)
            .map(|v| v as usize)
            .ok_or_else(|| ContainerError::Schema(format!("meta key {key:?} missing or not a nonnegative integer")))
    }

    pub fn meta_str(&self, key: &str) -> Result<&str, ContainerError> {
        self.meta
            .get(key)
            .and_then(Value::as_str)
            .ok_or_else(|| ContainerError::Schema(format!("meta key {key:?} missing or not a string")))
    }
}

/// Validates the prefix, header and array table; returns the header and the payload slice.
pub fn parse_header(bytes: &[u8]) -> Result<(Header, &[u8]), ContainerError> {
    if bytes.len() < PREFIX {
        return Err(format_err(format!("file is {} bytes, shorter than the 16-byte prefix", bytes.len())));
    }
    if &bytes[..8] != MAGIC {
        return Err(format_err("bad magic, expected TSPT0001"));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let avail = (bytes.len() - PREFIX) as u64;
    if hlen > avail {
        return Err(format_err(format!("header length {hlen} exceeds the {avail} bytes that follow")));
    }
    let hlen = hlen as usize;
    let text = std::str::from_utf8(&bytes[PREFIX..PREFIX + hlen]).map_err(|e| format_err(format!("header is not UTF-8: {e}")))?;
    let header: Header = serde_json::from_str(text).map_err(|e| format_err(format!("header JSON: {e}")))?;
    let payload = &bytes[PREFIX + hlen..];

    let mut names = HashSet::new();
    let mut end = 0usize;
    for e in &header.arrays {
        if e.name.is_empty() || !names.insert(e.name.as_str()) {
            return Err(format_err(format!("array name {:?} is empty or repeated", e.name)));
        }
        let count = e
            .shape
            .iter()
            .try_fold(1usize, |acc, &n| acc.checked_mul(n))
            .and_then(|n| n.checked_mul(e.dtype.size()))
            .ok_or_else(|| format_err(format!("{}: shape {:?} overflows", e.name, e.shape)))?;
        if count != e.nbytes {
            return Err(format_err(format!(
                "{}: nbytes {} but dtype {} and shape {:?} need {count}",
                e.name,
                e.nbytes,
                e.dtype.name(),
                e.shape
            )));
        }
        if e.offset % ALIGN != 0 {
            return Err(format_err(format!("{}: offset {} is not 64-byte aligned", e.name, e.offset)));
        }
        if e.offset < end {
            return Err(format_err(format!("{}: offset {} overlaps the previous array", e.name, e.offset)));
        }
        end = e
            .offset
            .checked_add(e.nbytes)
            .filter(|&x| x <= payload.len())
            .ok_or_else(|| format_err(format!("{}: extends past the end of the payload", e.name)))?;
    }
    if payload.len() != end {
        return Err(format_err(format!(
            "payload is {} bytes but the arrays end at {end}",
            payload.len()
        )));
    }
    Ok((header, payload))
}
