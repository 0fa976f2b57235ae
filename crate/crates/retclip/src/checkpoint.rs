//! Binary checkpoint format.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "RCLP" | u32 version | u32 header_len | header JSON | f32 payload
//! ```
//!
//! The JSON header holds the model and training configs and a tensor
//! manifest of `(name, kind, dtype, shape, offset)` entries, with offsets in
//! bytes from the start of the payload. Weights are stored as 32-bit reals;
//! optimizer moments are optional.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use retclip_core::model::ModelConfig;
use retclip_core::nn::ParamStore;
use retclip_core::tensor::Tensor;
use retclip_core::train::{Moments, TrainConfig};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::IoError;

pub const MAGIC: &[u8; 4] = b"RCLP";
pub const VERSION: u32 = 1;
const PREFIX_LEN: usize = 12;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint: bad magic bytes")]
    BadMagic,
    #[error("checkpoint truncated: {0}")]
    Truncated(String),
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("tensor {name}: {message}")]
    Bounds { name: String, message: String },
    #[error("malformed checkpoint header: {0}")]
    Header(String),
    #[error(transparent)]
    Io(#[from] IoError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntryKind {
    Param,
    FirstMoment,
    SecondMoment,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub name: String,
    pub kind: EntryKind,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

impl ManifestEntry {
    fn byte_len(&self) -> u64 {
        self.shape.iter().product::<usize>() as u64 * 4
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub payload_len: u64,
    pub tensors: Vec<ManifestEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub params: ParamStore,
    pub moments: Option<Moments>,
}

impl Checkpoint {
    /// Weights as they will be stored: every value cast through `f32`.
    pub fn quantized(&self) -> Self {
        let q = |v: &[f64]| v.iter().map(|x| *x as f32 as f64).collect::<Vec<_>>();
        let mut params = ParamStore::new();
        for (name, t) in self.params.iter() {
            params.insert(name, Tensor::new(t.shape().to_vec(), q(t.data())).expect("same shape"));
        }
        let moments = self.moments.as_ref().map(|m| Moments {
            first: m.first.iter().map(|(k, v)| (k.clone(), q(v))).collect(),
            second: m.second.iter().map(|(k, v)| (k.clone(), q(v))).collect(),
        });
        Self {
            model: self.model,
            train: self.train.clone(),
            params,
            moments,
        }
    }
}

fn push_f32(payload: &mut Vec<u8>, data: &[f64]) {
    for v in data {
        payload.extend_from_slice(&(*v as f32).to_le_bytes());
    }
}

pub fn encode(ckpt: &Checkpoint) -> Vec<u8> {
    let mut payload = Vec::new();
    let mut tensors = Vec::new();
    let mut add = |name: &str, kind: EntryKind, shape: &[usize], data: &[f64], payload: &mut Vec<u8>| {
        tensors.push(ManifestEntry {
            name: name.to_owned(),
            kind,
            dtype: "f32".into(),
            shape: shape.to_vec(),
            offset: payload.len() as u64,
        });
        push_f32(payload, data);
    };
    for (name, t) in ckpt.params.iter() {
        add(name, EntryKind::Param, t.shape(), t.data(), &mut payload);
    }
    if let Some(m) = &ckpt.moments {
        for (kind, map) in [(EntryKind::FirstMoment, &m.first), (EntryKind::SecondMoment, &m.second)] {
            for (name, v) in map {
                let shape = ckpt
                    .params
                    .get(name)
                    .map(|t| t.shape().to_vec())
                    .unwrap_or_else(|| vec![v.len()]);
                add(name, kind, &shape, v, &mut payload);
            }
        }
    }
    let header = Header {
        model: ckpt.model,
        train: ckpt.train.clone(),
        payload_len: payload.len() as u64,
        tensors,
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(PREFIX_LEN + json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    out
}

fn u32_at(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    if bytes.len() < PREFIX_LEN {
        return Err(CheckpointError::Truncated("file ends inside the prefix".into()));
    }
    let version = u32_at(bytes, 4);
    if version != VERSION {
        return Err(CheckpointError::VersionMismatch {
            found: version,
            expected: VERSION,
        });
    }
    let header_len = u32_at(bytes, 8) as usize;
    let header_end = PREFIX_LEN + header_len;
    if bytes.len() < header_end {
        return Err(CheckpointError::Truncated("file ends inside the header".into()));
    }
    let header: Header = serde_json::from_slice(&bytes[PREFIX_LEN..header_end])
        .map_err(|e| CheckpointError::Header(e.to_string()))?;
    let payload = &bytes[header_end..];
    if (payload.len() as u64) < header.payload_len {
        return Err(CheckpointError::Truncated(format!(
            "payload has {} of {} bytes",
            payload.len(),
            header.payload_len
        )));
    }
    if payload.len() as u64 > header.payload_len {
        return Err(CheckpointError::Header("trailing bytes after payload".into()));
    }

    let mut spans: Vec<(u64, u64, &str)> = Vec::new();
    let mut params = ParamStore::new();
    let mut first = BTreeMap::new();
    let mut second = BTreeMap::new();
    for e in &header.tensors {
        let bounds = |message: String| CheckpointError::Bounds {
            name: e.name.clone(),
            message,
        };
        if e.dtype != "f32" {
            return Err(bounds(format!("unsupported dtype {}", e.dtype)));
        }
        let end = e
            .offset
            .checked_add(e.byte_len())
            .ok_or_else(|| bounds("offset overflows".into()))?;
        if end > header.payload_len {
            return Err(bounds(format!(
                "bytes {}..{end} lie past the {}-byte payload",
                e.offset, header.payload_len
            )));
        }
        spans.push((e.offset, end, &e.name));
        let data: Vec<f64> = payload[e.offset as usize..end as usize]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        match e.kind {
            EntryKind::Param => {
                let t = Tensor::new(e.shape.clone(), data)
                    .map_err(|err| bounds(err.to_string()))?;
                if params.insert(e.name.clone(), t).is_some() {
                    return Err(bounds("duplicate tensor name".into()));
                }
            }
            EntryKind::FirstMoment => {
                first.insert(e.name.clone(), data);
            }
            EntryKind::SecondMoment => {
                second.insert(e.name.clone(), data);
            }
        }
    }
    spans.sort();
    for w in spans.windows(2) {
        if w[1].0 < w[0].1 {
            return Err(CheckpointError::Bounds {
                name: w[1].2.to_owned(),
                message: format!("overlaps {}", w[0].2),
            });
        }
    }
    let moments = if first.is_empty() && second.is_empty() {
        None
    } else {
        Some(Moments { first, second })
    };
    Ok(Checkpoint {
        model: header.model,
        train: header.train,
        params,
        moments,
    })
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<(), CheckpointError> {
    fs::write(path, encode(ckpt)).map_err(|e| IoError::io(path, e).into())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let bytes = fs::read(path).map_err(|e| IoError::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Checkpoint {
        let mut model = ModelConfig::default();
        model.image.d_model = 8;
        model.image.n_heads = 2;
        model.image.n_blocks = 1;
        model.text.d_model = 8;
        model.text.vocab_size = 16;
        model.text.n_blocks = 1;
        let params = model.init(3).unwrap();
        let mut moments = Moments::default();
        for (name, t) in params.iter() {
            moments.first.insert(name.to_owned(), t.data().iter().map(|v| v * 0.5).collect());
            moments.second.insert(name.to_owned(), t.data().iter().map(|v| v * v).collect());
        }
        Checkpoint {
            model,
            train: TrainConfig::default(),
            params,
            moments: Some(moments),
        }
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let c = tiny();
        let a = encode(&c);
        let back = decode(&a).unwrap();
        assert_eq!(back, c.quantized());
        assert_eq!(encode(&back), a);
    }

    #[test]
    fn without_moments() {
        let c = Checkpoint {
            moments: None,
            ..tiny()
        };
        assert_eq!(decode(&encode(&c)).unwrap().moments, None);
    }

    #[test]
    fn distinct_errors() {
        let bytes = encode(&tiny());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad), Err(CheckpointError::BadMagic)));

        let mut v2 = bytes.clone();
        v2[4] = 2;
        assert!(matches!(
            decode(&v2),
            Err(CheckpointError::VersionMismatch { found: 2, expected: 1 })
        ));

        assert!(matches!(
            decode(&bytes[..bytes.len() - 3]),
            Err(CheckpointError::Truncated(_))
        ));
        assert!(matches!(decode(&bytes[..20]), Err(CheckpointError::Truncated(_))));
    }

    #[test]
    fn entry_past_payload_is_a_bounds_error() {
        let bytes = encode(&tiny());
        let header_len = u32_at(&bytes, 8) as usize;
        let mut header: Header = serde_json::from_slice(&bytes[PREFIX_LEN..PREFIX_LEN + header_len]).unwrap();
        let payload = bytes[PREFIX_LEN + header_len..].to_vec();
        header.tensors[0].offset = header.payload_len;
        let json = serde_json::to_vec(&header).unwrap();
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        assert!(matches!(decode(&out), Err(CheckpointError::Bounds { .. })));
    }
}
