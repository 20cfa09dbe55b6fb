//! Checkpoint files.
//!
//! `T4TCKPT1` magic, a u64 little-endian header length, a JSON header with
//! the model config and a manifest of `(name, shape, offset)` entries, then
//! every parameter as little-endian f32 in manifest order. Offsets count
//! elements from the start of the data section.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig, ParamSet};
use crate::error::{Error, Result};
use crate::tensor::{numel, Element, Tensor};

const MAGIC: &[u8; 8] = b"T4TCKPT1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    manifest: Vec<ManifestEntry>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ParamSet<f32>,
}

impl Checkpoint {
    pub fn model(&self) -> Result<Model> {
        Model::new(self.config.clone())
    }
}

pub fn save<T: Element, W: Write>(mut w: W, config: &ModelConfig, params: &ParamSet<T>) -> Result<()> {
    let model = Model::new(config.clone())?;
    model.check_params(params)?;
    let mut offset = 0;
    let manifest = model
        .specs()
        .iter()
        .map(|s| {
            let e = ManifestEntry {
                name: s.name.clone(),
                shape: s.shape.clone(),
                offset,
            };
            offset += numel(&s.shape);
            e
        })
        .collect();
    let header = serde_json::to_vec(&Header {
        config: config.clone(),
        manifest,
    })?;
    let mut buf = Vec::with_capacity(16 + header.len() + 4 * offset);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header);
    for t in params.tensors() {
        for v in t.data() {
            buf.extend_from_slice(&v.to_f32().unwrap_or(f32::NAN).to_le_bytes());
        }
    }
    w.write_all(&buf).map_err(|e| Error::io("writing checkpoint", e))
}

pub fn load<R: Read>(mut r: R) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)
        .map_err(|e| Error::io("reading checkpoint", e))?;
    parse(&bytes)
}

/// Loads and rejects checkpoints whose config differs from `expected`.
pub fn load_matching<R: Read>(r: R, expected: &ModelConfig) -> Result<Checkpoint> {
    let ckpt = load(r)?;
    if &ckpt.config != expected {
        return Err(Error::Validation(format!(
            "checkpoint is a {} model that does not match the requested {} configuration",
            ckpt.config.variant.name(),
            expected.variant.name()
        )));
    }
    Ok(ckpt)
}

pub fn save_file<T: Element>(path: &Path, config: &ModelConfig, params: &ParamSet<T>) -> Result<()> {
    let mut buf = Vec::new();
    save(&mut buf, config, params)?;
    std::fs::write(path, buf).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn load_file(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    parse(&bytes)
}

fn parse(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 16 {
        return Err(Error::Truncated {
            expected: 16,
            actual: bytes.len(),
        });
    }
    if &bytes[..8] != MAGIC {
        return Err(Error::Parse {
            offset: 0,
            msg: "bad magic, expected T4TCKPT1".into(),
        });
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let header_end = usize::try_from(header_len)
        .ok()
        .and_then(|l| l.checked_add(16))
        .ok_or(Error::Parse {
            offset: 8,
            msg: format!("header length {header_len} too large"),
        })?;
    if bytes.len() < header_end {
        return Err(Error::Truncated {
            expected: header_end,
            actual: bytes.len(),
        });
    }
    let header: Header = serde_json::from_slice(&bytes[16..header_end]).map_err(|e| Error::Parse {
        offset: 16,
        msg: format!("header: {e}"),
    })?;
    let model = Model::new(header.config.clone())?;
    if model.specs().len() != header.manifest.len() {
        return Err(Error::Validation(format!(
            "manifest lists {} parameters, config implies {}",
            header.manifest.len(),
            model.specs().len()
        )));
    }
    let mut expected_offset = 0;
    for (spec, entry) in model.specs().iter().zip(&header.manifest) {
        if spec.name != entry.name || spec.shape != entry.shape || entry.offset != expected_offset {
            return Err(Error::Validation(format!(
                "manifest entry {} {:?} @{} does not match config parameter {} {:?} @{}",
                entry.name, entry.shape, entry.offset, spec.name, spec.shape, expected_offset
            )));
        }
        expected_offset += numel(&spec.shape);
    }
    let data_len = expected_offset * 4;
    let expected = header_end + data_len;
    if bytes.len() != expected {
        return Err(if bytes.len() < expected {
            Error::Truncated {
                expected,
                actual: bytes.len(),
            }
        } else {
            Error::Parse {
                offset: expected,
                msg: format!("{} trailing bytes", bytes.len() - expected),
            }
        });
    }
    let data = &bytes[header_end..];
    let tensors = header
        .manifest
        .iter()
        .map(|e| {
            let n = numel(&e.shape);
            let raw = &data[e.offset * 4..(e.offset + n) * 4];
            Tensor::from_vec(e.shape.clone(), raw.chunks_exact(4).map(f32::read_le).collect())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Checkpoint {
        params: ParamSet::from_tensors(model.specs(), tensors)?,
        config: header.config,
    })
}
