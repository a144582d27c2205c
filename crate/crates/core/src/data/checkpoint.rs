//! Binary checkpoints (`*.ckpt`).
//!
//! ```text
//! "CPTRCKPT" | version: u32 | header_len: u32 | header_crc32: u32 | header (JSON, header_len bytes) | data
//! ```
//! All integers are little-endian. `data` is every parameter tensor as
//! row-major f32 LE in header directory order, followed, when the header
//! has `optimizer_step`, by the Adam first moments and then the second
//! moments in the same order. The header records `data_len` and
//! `data_crc32` for the tail.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::write_atomic;
use crate::error::{Error, Result};
use crate::model::{CaptionModel, Layout, ModelConfig};
use crate::rng::RngState;
use crate::tensor::Tensor;
use crate::training::{OptimizerState, Progress};

pub const MAGIC: &[u8; 8] = b"CPTRCKPT";
pub const VERSION: u32 = 1;
/// Magic, version, header length and header checksum.
pub const PREAMBLE_LEN: usize = 20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    dims: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    model: ModelConfig,
    tensors: Vec<TensorEntry>,
    data_len: u64,
    data_crc32: u32,
    #[serde(default)]
    optimizer_step: Option<u64>,
    #[serde(default)]
    rng: Option<RngState>,
    #[serde(default)]
    progress: Option<Progress>,
    #[serde(default)]
    vocab: Option<Vec<String>>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: CaptionModel<f32>,
    pub optimizer: Option<OptimizerState>,
    pub rng: Option<RngState>,
    pub progress: Option<Progress>,
    /// Non-reserved vocabulary words in id order.
    pub vocab: Option<Vec<String>>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Format(format!("checkpoint: {}", msg.into()))
}

impl Checkpoint {
    pub fn new(model: CaptionModel<f32>) -> Self {
        Checkpoint {
            model,
            optimizer: None,
            rng: None,
            progress: None,
            vocab: None,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut data = Vec::new();
        let mut push = |ts: &[Tensor<f32>]| {
            for t in ts {
                for v in t.data() {
                    data.extend_from_slice(&v.to_le_bytes());
                }
            }
        };
        push(self.model.parameters());
        if let Some(o) = &self.optimizer {
            push(&o.m);
            push(&o.v);
        }
        let header = Header {
            model: self.model.config().clone(),
            tensors: self
                .model
                .named_parameters()
                .map(|(n, t)| TensorEntry {
                    name: n.to_string(),
                    dims: t.dims().to_vec(),
                })
                .collect(),
            data_len: data.len() as u64,
            data_crc32: crc32fast::hash(&data),
            optimizer_step: self.optimizer.as_ref().map(|o| o.step),
            rng: self.rng.clone(),
            progress: self.progress.clone(),
            vocab: self.vocab.clone(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(PREAMBLE_LEN + json.len() + data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&crc32fast::hash(&json).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&data);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < PREAMBLE_LEN {
            return Err(bad("truncated preamble"));
        }
        if &bytes[..8] != MAGIC {
            return Err(bad("bad magic bytes"));
        }
        let u32_at = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
        let version = u32_at(8);
        if version != VERSION {
            return Err(bad(format!("version {version} is not supported (expected {VERSION})")));
        }
        let header_len = u32_at(12) as usize;
        let header_crc = u32_at(16);
        let rest = &bytes[PREAMBLE_LEN..];
        if rest.len() < header_len {
            return Err(bad("truncated header"));
        }
        let (json, data) = rest.split_at(header_len);
        if crc32fast::hash(json) != header_crc {
            return Err(bad("header checksum mismatch"));
        }
        let header: Header = serde_json::from_slice(json).map_err(|e| bad(format!("header: {e}")))?;
        header.model.validate()?;
        if data.len() as u64 != header.data_len {
            return Err(bad(format!(
                "tensor data is {} bytes, header says {}",
                data.len(),
                header.data_len
            )));
        }
        if crc32fast::hash(data) != header.data_crc32 {
            return Err(bad("tensor data checksum mismatch"));
        }

        let layout = Layout::new(&header.model);
        if header.tensors.len() != layout.specs.len() {
            return Err(bad(format!(
                "{} tensors listed, config needs {}",
                header.tensors.len(),
                layout.specs.len()
            )));
        }
        for (e, s) in header.tensors.iter().zip(&layout.specs) {
            if e.name != s.name {
                return Err(bad(format!("expected tensor `{}`, found `{}`", s.name, e.name)));
            }
            if e.dims != s.dims {
                return Err(bad(format!(
                    "tensor `{}` has shape {:?}, config expects {:?}",
                    e.name, e.dims, s.dims
                )));
            }
        }
        let n_params = layout.parameter_count();
        let copies = if header.optimizer_step.is_some() { 3 } else { 1 };
        if data.len() != 4 * n_params * copies {
            return Err(bad(format!(
                "tensor data is {} bytes, shapes need {}",
                data.len(),
                4 * n_params * copies
            )));
        }

        let mut floats = data.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")));
        let mut read_all = || -> Result<Vec<Tensor<f32>>> {
            layout
                .specs
                .iter()
                .map(|s| {
                    let n = s.dims.iter().product();
                    Tensor::new(s.dims.clone(), floats.by_ref().take(n).collect())
                })
                .collect()
        };
        let params = read_all()?;
        let optimizer = match header.optimizer_step {
            Some(step) => Some(OptimizerState {
                step,
                m: read_all()?,
                v: read_all()?,
            }),
            None => None,
        };
        let named = layout.specs.iter().map(|s| s.name.clone()).zip(params).collect();
        let model = CaptionModel::from_parameters(header.model, named)?;
        Ok(Checkpoint {
            model,
            optimizer,
            rng: header.rng,
            progress: header.progress,
            vocab: header.vocab,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}
