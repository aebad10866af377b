//! Model checkpoints: a magic line, a one-line JSON header (format version,
//! config, tensor manifest, payload checksum), then the payload as
//! little-endian `f32` arrays in row-major order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ParamLayout, TransformerModel};
use crate::tensor::{Real, Tensor};

pub const MAGIC: &str = "MINIDISTILL-CHECKPOINT";
pub const FORMAT_VERSION: u32 = 1;
const DTYPE: &str = "f32le";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Byte offset into the payload.
    pub offset: usize,
}

impl ManifestEntry {
    fn byte_len(&self) -> usize {
        self.shape.iter().product::<usize>() * 4
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub version: u32,
    pub config: ModelConfig,
    pub tensors: Vec<ManifestEntry>,
    pub payload_bytes: usize,
    /// Hex SHA-256 of the payload.
    pub sha256: String,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Serializes a model. Parameters are stored as `f32` whatever `T` is.
pub fn to_bytes<T: Real>(model: &TransformerModel<T>) -> Result<Vec<u8>> {
    let mut payload = Vec::new();
    let mut tensors = Vec::with_capacity(model.params().len());
    for (spec, p) in model.layout().specs.iter().zip(model.params()) {
        tensors.push(ManifestEntry {
            name: spec.name.clone(),
            shape: p.shape().to_vec(),
            dtype: DTYPE.into(),
            offset: payload.len(),
        });
        for &x in p.data() {
            payload.extend_from_slice(&x.to_f32().to_le_bytes());
        }
    }
    let header = Header {
        version: FORMAT_VERSION,
        config: model.config().clone(),
        tensors,
        payload_bytes: payload.len(),
        sha256: sha256_hex(&payload),
    };
    let mut out = format!("{MAGIC}\n{}\n", serde_json::to_string(&header)?).into_bytes();
    out.extend_from_slice(&payload);
    Ok(out)
}

fn split_line(bytes: &[u8]) -> Result<(&[u8], &[u8])> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Format("truncated checkpoint header".into()))?;
    Ok((&bytes[..nl], &bytes[nl + 1..]))
}

/// Parses and validates the header, returning it with the payload bytes.
pub fn read_header(bytes: &[u8]) -> Result<(Header, &[u8])> {
    let (magic, rest) = split_line(bytes)?;
    if magic != MAGIC.as_bytes() {
        return Err(Error::Format("not a checkpoint (bad magic line)".into()));
    }
    let (json, payload) = split_line(rest)?;
    let value: serde_json::Value = serde_json::from_slice(json)?;
    let version = value.get("version").and_then(|v| v.as_u64());
    if version != Some(u64::from(FORMAT_VERSION)) {
        return Err(Error::Format(format!(
            "unsupported checkpoint format version {}",
            value.get("version").map_or("missing".into(), |v| v.to_string())
        )));
    }
    let header: Header = serde_json::from_value(value)?;
    if payload.len() != header.payload_bytes {
        return Err(Error::Format(format!(
            "payload is {} bytes, header declares {}",
            payload.len(),
            header.payload_bytes
        )));
    }
    let mut expected_offset = 0;
    for e in &header.tensors {
        if e.dtype != DTYPE {
            return Err(Error::Format(format!("{}: unsupported dtype {}", e.name, e.dtype)));
        }
        if e.offset != expected_offset {
            return Err(Error::Format(format!(
                "{}: offset {} overlaps or leaves a gap (expected {expected_offset})",
                e.name, e.offset
            )));
        }
        expected_offset += e.byte_len();
    }
    if expected_offset != payload.len() {
        return Err(Error::Format("manifest does not cover the payload".into()));
    }
    let actual = sha256_hex(payload);
    if actual != header.sha256 {
        return Err(Error::Checksum {
            expected: header.sha256,
            actual,
        });
    }
    Ok((header, payload))
}

pub fn from_bytes<T: Real>(bytes: &[u8]) -> Result<TransformerModel<T>> {
    let (header, payload) = read_header(bytes)?;
    let config = header.config.normalized();
    let layout = ParamLayout::new(&config);
    if layout.specs.len() != header.tensors.len() {
        return Err(Error::Format(format!(
            "manifest lists {} tensors, config needs {}",
            header.tensors.len(),
            layout.specs.len()
        )));
    }
    let mut params = Vec::with_capacity(layout.specs.len());
    for (spec, e) in layout.specs.iter().zip(&header.tensors) {
        if spec.name != e.name {
            return Err(Error::Format(format!("expected tensor {}, found {}", spec.name, e.name)));
        }
        let data = payload[e.offset..e.offset + e.byte_len()]
            .chunks_exact(4)
            .map(|c| T::from_f32(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
            .collect();
        params.push(Tensor::new(e.shape.clone(), data)?);
    }
    TransformerModel::from_params(config, params)
}

pub fn save<T: Real>(model: &TransformerModel<T>, path: impl AsRef<Path>) -> Result<()> {
    let bytes = to_bytes(model)?;
    fs::write(path.as_ref(), bytes).map_err(|e| Error::io(path, e))
}

pub fn load<T: Real>(path: impl AsRef<Path>) -> Result<TransformerModel<T>> {
    let bytes = fs::read(path.as_ref()).map_err(|e| Error::io(&path, e))?;
    from_bytes(&bytes)
}

/// SHA-256 of a whole checkpoint file.
pub fn file_hash(path: impl AsRef<Path>) -> Result<String> {
    let bytes = fs::read(path.as_ref()).map_err(|e| Error::io(&path, e))?;
    Ok(sha256_hex(&bytes))
}
