//! Encoder checkpoint files.
//!
//! Layout:
//!
//! ```text
//! [u64 little-endian: header length H]
//! [H bytes: UTF-8 JSON header]
//! [payload: little-endian f32 values]
//! ```
//!
//! The header is
//! `{"format": "trimot-lgpenc", "version": 1, "temperature": <f64|null>, "tensors": [...]}`
//! where each tensor entry is `{"name", "shape", "offset", "length"}`,
//! `offset`/`length` in bytes relative to the start of the payload. Tensor
//! names are those of [`super::TENSOR_NAMES`]; dense weights are stored
//! row-major with shape `[in, out]`.

use std::fs;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{tensor_shapes, EncoderError, EncoderParams};

pub const FORMAT: &str = "trimot-lgpenc";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io { path: String, source: io::Error },
    #[error("checkpoint is truncated")]
    Truncated,
    #[error("checkpoint header is not valid JSON: {0}")]
    Header(#[from] serde_json::Error),
    #[error("unsupported checkpoint format `{0}` version {1}")]
    Format(String, u32),
    #[error("checkpoint tensor `{0}` is missing")]
    Missing(&'static str),
    #[error("checkpoint has unknown tensor `{0}`")]
    Unknown(String),
    #[error("checkpoint tensor `{name}` spans bytes {offset}..{end} outside the payload")]
    OutOfBounds { name: String, offset: usize, end: usize },
    #[error(transparent)]
    Params(#[from] EncoderError),
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    #[serde(default)]
    temperature: Option<f64>,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    length: usize,
}

/// Encoder weights plus the contrastive temperature, when one was trained.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: EncoderParams,
    pub temperature: Option<f64>,
}

pub fn to_bytes(params: &EncoderParams, temperature: Option<f64>) -> Vec<u8> {
    let mut entries = Vec::new();
    let mut payload: Vec<u8> = Vec::with_capacity(params.num_params() * 4);
    for ((name, data), (_, shape)) in params.tensors().into_iter().zip(tensor_shapes()) {
        let offset = payload.len();
        for v in data {
            payload.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        entries.push(TensorEntry { name: name.to_string(), shape, offset, length: payload.len() - offset });
    }
    let header = Header { format: FORMAT.to_string(), version: VERSION, temperature, tensors: entries };
    let header = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(8 + header.len() + payload.len());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    out
}

pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
    let len_bytes: [u8; 8] = bytes.get(..8).ok_or(CheckpointError::Truncated)?.try_into().expect("8 bytes");
    let header_len = usize::try_from(u64::from_le_bytes(len_bytes)).map_err(|_| CheckpointError::Truncated)?;
    let header_end = 8usize.checked_add(header_len).ok_or(CheckpointError::Truncated)?;
    let header: Header = serde_json::from_slice(bytes.get(8..header_end).ok_or(CheckpointError::Truncated)?)?;
    if header.format != FORMAT || header.version != VERSION {
        return Err(CheckpointError::Format(header.format, header.version));
    }
    let payload = &bytes[header_end..];

    let shapes = tensor_shapes();
    if let Some(e) = header.tensors.iter().find(|e| !shapes.iter().any(|(n, _)| *n == e.name)) {
        return Err(CheckpointError::Unknown(e.name.clone()));
    }
    let mut params = EncoderParams::zeros();
    for ((name, dst), (_, shape)) in params.tensors_mut().into_iter().zip(shapes) {
        let entry = header.tensors.iter().find(|e| e.name == name).ok_or(CheckpointError::Missing(name))?;
        if entry.shape != shape || entry.length != dst.len() * 4 {
            return Err(EncoderError::ParamShape { name: name.to_string(), expected: shape, got: entry.shape.clone() }.into());
        }
        let end = entry.offset.saturating_add(entry.length);
        let src = payload.get(entry.offset..end).ok_or_else(|| CheckpointError::OutOfBounds {
            name: name.to_string(),
            offset: entry.offset,
            end,
        })?;
        for (d, chunk) in dst.iter_mut().zip(src.chunks_exact(4)) {
            *d = f32::from_le_bytes(chunk.try_into().expect("4 bytes")) as f64;
        }
    }
    params.validate()?;
    Ok(Checkpoint { params, temperature: header.temperature })
}

pub fn save(path: &Path, params: &EncoderParams, temperature: Option<f64>) -> Result<(), CheckpointError> {
    fs::write(path, to_bytes(params, temperature))
        .map_err(|source| CheckpointError::Io { path: path.display().to_string(), source })
}

pub fn load(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io { path: path.display().to_string(), source })?;
    from_bytes(&bytes)
}
