//! Self-describing binary container for checkpoints and gallery indexes.
//!
//! Layout: magic `CIRMASK\0`, `u32` version, `u64` header length, a JSON
//! header, then little-endian tensor payloads in header order.

use std::fs::File;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::backbone::BackboneDims;
use crate::inversion::{InversionConfig, InversionNetwork};
use crate::optim::{AdamW, AdamWConfig, Params};
use crate::scalar::{from_le_bytes, to_le_bytes};
use crate::{Error, Result, Scalar};

pub const MAGIC: &[u8; 8] = b"CIRMASK\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    kind: String,
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

fn format_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Format { path: path.to_path_buf(), message: message.into() }
}

/// Writes a container atomically (temp file, then rename).
pub fn write_container<T: Scalar>(
    path: &Path,
    kind: &str,
    meta: serde_json::Value,
    tensors: &[(String, &ArrayD<T>)],
) -> Result<()> {
    let header = Header {
        kind: kind.to_string(),
        meta,
        tensors: tensors
            .iter()
            .map(|(n, t)| TensorEntry { name: n.clone(), dtype: T::DTYPE.into(), shape: t.shape().to_vec() })
            .collect(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| format_err(path, e.to_string()))?;
    let mut bytes = Vec::new();
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&VERSION.to_le_bytes());
    bytes.extend_from_slice(&(json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&json);
    for (_, t) in tensors {
        let values: Vec<T> = t.iter().copied().collect();
        bytes.extend_from_slice(&to_le_bytes(&values));
    }
    let tmp: PathBuf = path.with_extension("partial");
    let mut f = File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Reads a container of the given kind. Tensors come back in stored order.
pub fn read_container<T: Scalar>(path: &Path, kind: &str) -> Result<(serde_json::Value, Vec<(String, ArrayD<T>)>)> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(format_err(path, "not a cirmask container"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(format_err(path, format!("unsupported version {version}")));
    }
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = 20usize
        .checked_add(header_len)
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| format_err(path, "truncated header"))?;
    let header: Header = serde_json::from_slice(&bytes[20..body]).map_err(|e| format_err(path, e.to_string()))?;
    if header.kind != kind {
        return Err(format_err(path, format!("expected a {kind} container, found {}", header.kind)));
    }
    let mut offset = body;
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for entry in &header.tensors {
        let width = match entry.dtype.as_str() {
            "f32" => 4,
            "f64" => 8,
            other => return Err(format_err(path, format!("unsupported dtype {other}"))),
        };
        let len = entry.shape.iter().product::<usize>() * width;
        let end = offset
            .checked_add(len)
            .filter(|&end| end <= bytes.len())
            .ok_or_else(|| format_err(path, format!("truncated tensor {}", entry.name)))?;
        let values = from_le_bytes::<T>(&bytes[offset..end], &entry.dtype)
            .ok_or_else(|| format_err(path, format!("bad payload for {}", entry.name)))?;
        let array = ArrayD::from_shape_vec(IxDyn(&entry.shape), values).map_err(|e| format_err(path, e.to_string()))?;
        tensors.push((entry.name.clone(), array));
        offset = end;
    }
    if offset != bytes.len() {
        return Err(format_err(path, "trailing bytes after payload"));
    }
    Ok((header.meta, tensors))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub backbone: String,
    pub inversion: InversionConfig,
    pub config_hash: String,
    pub epoch: u32,
    pub step: u64,
    pub code_version: String,
    pub optimizer: Option<OptimizerMeta>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerMeta {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub clip_norm: Option<f64>,
    pub step: u64,
}

/// φ parameters, optionally with optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub meta: CheckpointMeta,
    pub net: InversionNetwork<T>,
    pub optimizer: Option<AdamW<T>>,
}

const KIND: &str = "inversion-checkpoint";

impl<T: Scalar> Checkpoint<T> {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut meta = self.meta.clone();
        meta.inversion = self.net.config.clone();
        meta.optimizer = self.optimizer.as_ref().map(|o| OptimizerMeta {
            learning_rate: o.config.learning_rate,
            beta1: o.config.beta1,
            beta2: o.config.beta2,
            eps: o.config.eps,
            weight_decay: o.config.weight_decay,
            clip_norm: o.config.clip_norm,
            step: o.step,
        });
        let mut tensors: Vec<(String, &ArrayD<T>)> = Vec::new();
        for (n, t) in self.net.params.names.iter().zip(&self.net.params.tensors) {
            tensors.push((format!("param/{n}"), t));
        }
        if let Some(o) = &self.optimizer {
            for (n, t) in o.m.names.iter().zip(&o.m.tensors) {
                tensors.push((format!("adam_m/{n}"), t));
            }
            for (n, t) in o.v.names.iter().zip(&o.v.tensors) {
                tensors.push((format!("adam_v/{n}"), t));
            }
        }
        let meta = serde_json::to_value(&meta).map_err(|e| format_err(path, e.to_string()))?;
        write_container(path, KIND, meta, &tensors)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (meta, tensors) = read_container::<T>(path, KIND)?;
        let meta: CheckpointMeta = serde_json::from_value(meta).map_err(|e| format_err(path, e.to_string()))?;
        let mut groups = [Params::new(), Params::new(), Params::new()];
        for (name, t) in tensors {
            let (group, rest) = name.split_once('/').ok_or_else(|| format_err(path, format!("bad tensor name {name}")))?;
            let slot = match group {
                "param" => 0,
                "adam_m" => 1,
                "adam_v" => 2,
                _ => return Err(format_err(path, format!("unknown tensor group {group}"))),
            };
            groups[slot].push(rest, t);
        }
        let [params, m, v] = groups;
        let net = InversionNetwork::from_params(meta.inversion.clone(), params)?;
        let optimizer = match meta.optimizer {
            Some(o) => {
                net.params.check_same_layout(&m)?;
                net.params.check_same_layout(&v)?;
                let config = AdamWConfig {
                    learning_rate: o.learning_rate,
                    beta1: o.beta1,
                    beta2: o.beta2,
                    eps: o.eps,
                    weight_decay: o.weight_decay,
                    clip_norm: o.clip_norm,
                };
                Some(AdamW { config, step: o.step, m, v })
            }
            None => None,
        };
        Ok(Self { meta, net, optimizer })
    }

    /// Rejects checkpoints whose widths do not fit the backbone.
    pub fn check_backbone(&self, name: &str, dims: BackboneDims) -> Result<()> {
        let c = &self.net.config;
        if c.input_dim != dims.image_dim {
            return Err(Error::dims("checkpoint input width (image feature)", dims.image_dim, c.input_dim));
        }
        if c.output_dim != dims.token_dim {
            return Err(Error::dims("checkpoint output width (token embedding)", dims.token_dim, c.output_dim));
        }
        if self.meta.backbone != name {
            log::warn!("checkpoint was trained with backbone {} but {name} is loaded", self.meta.backbone);
        }
        Ok(())
    }
}
