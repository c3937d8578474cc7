//! The CBDC checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! 0..4      magic "CBDC"
//! 4..8      version, u32 = 1
//! 8..16     header length H, u64
//! 16..16+H  UTF-8 JSON header {config, meta, tensors: [{byte_len, byte_offset, dtype, name, shape}]}
//! 16+H..    tensor payloads, row-major IEEE-754, each starting on an 8-byte
//!           boundary relative to the payload start, zero padding between
//! ```
//!
//! Header objects are written with sorted keys and tensors in name order, so
//! the same checkpoint always serializes to the same bytes.

use std::fs;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{DType, Float, Tensor};
use crate::tokenizer::TokenizerKind;
use crate::transformer::{count_params, ModelConfig, ModelError, ParamSet};

pub const MAGIC: &[u8; 4] = b"CBDC";
pub const VERSION: u32 = 1;
const PREAMBLE: usize = 16;
const ALIGN: usize = 8;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic {0:?}, not a CBDC checkpoint")]
    BadMagic([u8; 4]),
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated tensor data: {0}")]
    Truncated(String),
    #[error("shape/config mismatch: {0}")]
    ShapeMismatch(String),
    #[error("malformed header: {0}")]
    Header(String),
    #[error("tensor {name} stored as {stored}, requested {requested}")]
    DtypeMismatch {
        name: String,
        stored: &'static str,
        requested: &'static str,
    },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, CheckpointError>;

/// One entry of a checkpoint's append-only history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stage {
    pub descriptor: String,
    /// Per-step training loss recorded by this stage, if it trained.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub loss_curve: Vec<f64>,
}

impl Stage {
    pub fn new(descriptor: impl Into<String>) -> Self {
        Stage {
            descriptor: descriptor.into(),
            loss_curve: Vec::new(),
        }
    }

    pub fn with_curve(descriptor: impl Into<String>, loss_curve: Vec<f64>) -> Self {
        Stage {
            descriptor: descriptor.into(),
            loss_curve,
        }
    }
}

/// Provenance record.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Meta {
    pub name: String,
    pub lineage: Vec<Stage>,
    pub seed: u64,
    /// Optimizer steps taken since random initialization, summed over stages.
    pub step: u64,
    /// Tokenizer the model was trained with, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tokenizer: Option<TokenizerKind>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<F> {
    pub config: ModelConfig,
    pub params: ParamSet<F>,
    pub meta: Meta,
}

impl<F: Float> Checkpoint<F> {
    pub fn new(
        config: ModelConfig,
        params: ParamSet<F>,
        meta: Meta,
    ) -> std::result::Result<Self, ModelError> {
        params.validate(&config)?;
        Ok(Checkpoint {
            config,
            params,
            meta,
        })
    }

    pub fn param_count(&self) -> usize {
        count_params(&self.config)
    }

    /// Appends a lineage entry, returning the checkpoint for chaining.
    pub fn push_stage(mut self, stage: Stage) -> Self {
        self.meta.lineage.push(stage);
        self
    }

    /// Exact equality including the bit patterns of every tensor.
    pub fn bits_eq(&self, other: &Self) -> bool {
        self.config == other.config && self.meta == other.meta && self.params.bits_eq(&other.params)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.params
            .validate(&self.config)
            .map_err(|e| CheckpointError::ShapeMismatch(e.to_string()))?;
        let mut payload = Vec::new();
        let mut entries = Vec::with_capacity(self.params.len());
        for (name, t) in self.params.iter() {
            while payload.len() % ALIGN != 0 {
                payload.push(0);
            }
            let offset = payload.len();
            for &v in t.data() {
                v.write_le(&mut payload);
            }
            entries.push(TensorEntry {
                name: name.clone(),
                dtype: F::DTYPE,
                shape: t.shape().to_vec(),
                byte_offset: offset as u64,
                byte_len: (payload.len() - offset) as u64,
            });
        }
        let header = Header {
            config: self.config,
            meta: self.meta.clone(),
            tensors: entries,
        };
        let header_bytes = header.to_canonical_json()?;
        let mut out = Vec::with_capacity(PREAMBLE + header_bytes.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
        out.extend_from_slice(&header_bytes);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, header_end) = parse_header(bytes)?;
        let payload = &bytes[header_end..];
        let mut params = ParamSet::new();
        for e in &header.tensors {
            if e.dtype != F::DTYPE {
                return Err(CheckpointError::DtypeMismatch {
                    name: e.name.clone(),
                    stored: e.dtype.as_str(),
                    requested: F::DTYPE.as_str(),
                });
            }
            let numel: usize = e.shape.iter().product();
            let width = F::DTYPE.size_of();
            if e.byte_len as usize != numel * width {
                return Err(CheckpointError::ShapeMismatch(format!(
                    "tensor {} declares {} bytes for shape {:?}",
                    e.name, e.byte_len, e.shape
                )));
            }
            let start = e.byte_offset as usize;
            let end = start
                .checked_add(e.byte_len as usize)
                .filter(|&end| end <= payload.len())
                .ok_or_else(|| {
                    CheckpointError::Truncated(format!(
                        "tensor {} needs payload bytes {}..{}, file has {}",
                        e.name,
                        start,
                        start + e.byte_len as usize,
                        payload.len()
                    ))
                })?;
            let data = payload[start..end]
                .chunks_exact(width)
                .map(F::read_le)
                .collect();
            let t = Tensor::new(e.shape.clone(), data)
                .map_err(|err| CheckpointError::ShapeMismatch(format!("{}: {err}", e.name)))?;
            params.insert(e.name.clone(), t);
        }
        params
            .validate(&header.config)
            .map_err(|e| CheckpointError::ShapeMismatch(e.to_string()))?;
        Ok(Checkpoint {
            config: header.config,
            params,
            meta: header.meta,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub byte_offset: u64,
    pub byte_len: u64,
}

/// The JSON header of a CBDC file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub config: ModelConfig,
    pub meta: Meta,
    pub tensors: Vec<TensorEntry>,
}

impl Header {
    fn to_canonical_json(&self) -> Result<Vec<u8>> {
        // Value objects are BTreeMap-backed, so keys come out sorted.
        let value =
            serde_json::to_value(self).map_err(|e| CheckpointError::Header(e.to_string()))?;
        serde_json::to_vec(&value).map_err(|e| CheckpointError::Header(e.to_string()))
    }

    pub fn dtype(&self) -> Option<DType> {
        self.tensors.first().map(|t| t.dtype)
    }
}

fn parse_preamble(bytes: &[u8]) -> Result<usize> {
    if bytes.len() < 4 {
        return Err(CheckpointError::Truncated(format!(
            "{} bytes is shorter than the magic",
            bytes.len()
        )));
    }
    let magic: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic(magic));
    }
    if bytes.len() < PREAMBLE {
        return Err(CheckpointError::Truncated(format!(
            "{} bytes is shorter than the preamble",
            bytes.len()
        )));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    usize::try_from(header_len)
        .map_err(|_| CheckpointError::Header(format!("header length {header_len} too large")))
}

fn parse_header(bytes: &[u8]) -> Result<(Header, usize)> {
    let header_len = parse_preamble(bytes)?;
    let end = PREAMBLE
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| {
            CheckpointError::Truncated(format!(
                "header of {header_len} bytes runs past end of file ({} bytes)",
                bytes.len()
            ))
        })?;
    let header: Header = serde_json::from_slice(&bytes[PREAMBLE..end])
        .map_err(|e| CheckpointError::Header(e.to_string()))?;
    header
        .config
        .validate()
        .map_err(|e| CheckpointError::ShapeMismatch(e.to_string()))?;
    Ok((header, end))
}

/// Reads only the preamble and header of a checkpoint file.
pub fn read_header(path: impl AsRef<Path>) -> Result<Header> {
    let mut file = fs::File::open(path)?;
    let mut preamble = Vec::with_capacity(PREAMBLE);
    file.by_ref()
        .take(PREAMBLE as u64)
        .read_to_end(&mut preamble)?;
    let header_len = parse_preamble(&preamble)?;
    let mut rest = Vec::with_capacity(header_len);
    file.take(header_len as u64).read_to_end(&mut rest)?;
    if rest.len() < header_len {
        return Err(CheckpointError::Truncated(format!(
            "header of {header_len} bytes runs past end of file"
        )));
    }
    preamble.extend_from_slice(&rest);
    parse_header(&preamble).map(|(h, _)| h)
}
