//! `CFM1` model container.
//!
//! Layout (little-endian): magic `CFM1` | version u32 | header length u32 |
//! UTF-8 JSON header `{config, layers: [{name, shape}]}` | every parameter as
//! f64 in manifest order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ArchConfig, ModelParams};
use crate::error::{format_err, Result};
use crate::io::{write_atomic, Reader};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const CFM_MAGIC: &[u8; 4] = b"CFM1";
pub const CFM_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    config: ArchConfig,
    layers: Vec<LayerEntry>,
}

#[derive(Serialize, Deserialize)]
struct LayerEntry {
    name: String,
    shape: Vec<usize>,
}

pub fn write_model_bytes<T: Scalar>(params: &ModelParams<T>) -> Result<Vec<u8>> {
    let header = Header {
        config: params.config.clone(),
        layers: params
            .layers()
            .iter()
            .map(|(name, t)| LayerEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(12 + json.len() + 8 * params.param_count());
    out.extend_from_slice(CFM_MAGIC);
    out.extend_from_slice(&CFM_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in params.layers() {
        for &v in t.data() {
            out.extend_from_slice(&v.to_f64_lossy().to_le_bytes());
        }
    }
    Ok(out)
}

pub fn read_model_bytes<T: Scalar>(bytes: &[u8]) -> Result<ModelParams<T>> {
    let mut r = Reader::new(bytes);
    if r.take(4)? != CFM_MAGIC {
        return Err(format_err!("not a CFM1 model file (bad magic)"));
    }
    let version = r.u32()?;
    if version != CFM_VERSION {
        return Err(format_err!("unsupported CFM version {version}"));
    }
    let hlen = r.u32()? as usize;
    let header: Header = serde_json::from_slice(r.take(hlen)?)
        .map_err(|e| format_err!("bad CFM header: {e}"))?;
    let mut layers = Vec::with_capacity(header.layers.len());
    for entry in header.layers {
        let n: usize = entry.shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            let v = r.f64()?;
            if !v.is_finite() {
                return Err(format_err!("non-finite parameter in layer {}", entry.name));
            }
            data.push(T::of(v));
        }
        layers.push((entry.name, Tensor::new(entry.shape, data)?));
    }
    if !r.is_empty() {
        return Err(format_err!("{} trailing bytes after parameters", r.remaining()));
    }
    ModelParams::from_layers(header.config, layers)
}

pub fn write_model<T: Scalar>(params: &ModelParams<T>, path: &Path) -> Result<()> {
    write_atomic(path, &write_model_bytes(params)?)
}

pub fn read_model<T: Scalar>(path: &Path) -> Result<ModelParams<T>> {
    read_model_bytes(&std::fs::read(path)?)
}
