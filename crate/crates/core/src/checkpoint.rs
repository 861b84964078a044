//! Checkpoint container.
//!
//! Byte layout (all integers little-endian):
//!
//! ```text
//! offset 0   magic bytes  "VXCK"
//! offset 4   u32          container version (currently 1)
//! offset 8   u32          header length L in bytes
//! offset 12  [u8; L]      header JSON (UTF-8)
//! offset 12+L              tensor payload
//! ```
//!
//! The header JSON carries `format_version`, `spec_hash`, `precision`
//! (always `"f32"`), and an ordered `tensors` list of `{name, shape}`. The
//! payload is the concatenation of each tensor's values in that order, each
//! value a little-endian IEEE-754 f32, row-major.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::{Scalar, Tensor};

const MAGIC: &[u8; 4] = b"VXCK";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorMeta {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub spec_hash: String,
    pub precision: String,
    pub tensors: Vec<TensorMeta>,
}

/// Serialize a parameter set. Values are narrowed to f32.
pub fn save<T: Scalar>(path: &Path, params: &ParamSet<T>, spec_hash: &str) -> Result<()> {
    let bytes = to_bytes(params, spec_hash)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn to_bytes<T: Scalar>(params: &ParamSet<T>, spec_hash: &str) -> Result<Vec<u8>> {
    let header = CheckpointHeader {
        format_version: VERSION,
        spec_hash: spec_hash.to_string(),
        precision: "f32".to_string(),
        tensors: params
            .entries()
            .iter()
            .map(|e| TensorMeta {
                name: e.name.clone(),
                shape: e.value.shape().to_vec(),
            })
            .collect(),
    };
    let header_json = serde_json::to_vec(&header)?;
    let payload_len: usize = params.entries().iter().map(|e| e.value.numel() * 4).sum();
    let mut out = Vec::with_capacity(12 + header_json.len() + payload_len);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
    out.extend_from_slice(&header_json);
    for e in params.entries() {
        for &v in e.value.data() {
            out.extend_from_slice(&(v.to_f64() as f32).to_le_bytes());
        }
    }
    Ok(out)
}

/// Load a checkpoint, widening values into `T`. All parameters come back
/// trainable; callers adjust flags for frozen-encoder setups.
pub fn load<T: Scalar>(path: &Path) -> Result<(ParamSet<T>, CheckpointHeader)> {
    let bytes = fs::read(path)?;
    from_bytes(&bytes)
}

pub fn from_bytes<T: Scalar>(bytes: &[u8]) -> Result<(ParamSet<T>, CheckpointHeader)> {
    if bytes.len() < 12 || &bytes[0..4] != MAGIC {
        return Err(Error::CheckpointFormat("bad magic".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::CheckpointFormat(format!("unsupported version {version}")));
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if bytes.len() < 12 + hlen {
        return Err(Error::CheckpointFormat("truncated header".into()));
    }
    let header: CheckpointHeader = serde_json::from_slice(&bytes[12..12 + hlen])?;
    let mut offset = 12 + hlen;
    let mut params = ParamSet::new();
    for meta in &header.tensors {
        let n: usize = meta.shape.iter().product();
        let end = offset + n * 4;
        if bytes.len() < end {
            return Err(Error::CheckpointFormat(format!("truncated payload at `{}`", meta.name)));
        }
        let mut data = Vec::with_capacity(n);
        for i in 0..n {
            let b = &bytes[offset + i * 4..offset + i * 4 + 4];
            let v = f32::from_le_bytes(b.try_into().unwrap());
            data.push(T::from_f64(v as f64));
        }
        offset = end;
        params.add(meta.name.clone(), Tensor::from_vec(&meta.shape, data)?, true)?;
    }
    if offset != bytes.len() {
        return Err(Error::CheckpointFormat("trailing bytes".into()));
    }
    Ok((params, header))
}
