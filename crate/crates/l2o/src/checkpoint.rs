//! `l2onet/1` checkpoint files.
//!
//! Layout: an 8-byte little-endian header length, the JSON header
//! (architecture, slot layout, tensor manifest), then every tensor as
//! little-endian `f32` in manifest order.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{L2oError, Result};
use crate::network::{L2OConfig, L2ONetwork};
use crate::slots::SlotLayoutInfo;

pub const CHECKPOINT_VERSION: &str = "l2onet/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
    /// Offset into the blob, in elements.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub version: String,
    pub config: L2OConfig,
    pub slots: SlotLayoutInfo,
    pub n_params: usize,
    pub tensors: Vec<TensorEntry>,
}

pub fn to_bytes(net: &L2ONetwork) -> Result<Vec<u8>> {
    let mut tensors = Vec::with_capacity(net.params.len());
    let mut offset = 0;
    for (name, p) in net.names.iter().zip(&net.params) {
        tensors.push(TensorEntry { name: name.clone(), shape: [p.nrows(), p.ncols()], offset });
        offset += p.len();
    }
    let header = CheckpointHeader {
        version: CHECKPOINT_VERSION.into(),
        config: net.config.clone(),
        slots: SlotLayoutInfo::standard(),
        n_params: offset,
        tensors,
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(8 + json.len() + 4 * offset);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for p in &net.params {
        for &v in p.iter() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<L2ONetwork> {
    let bad = |m: &str| L2oError::Checkpoint(m.to_string());
    let len_bytes: [u8; 8] = bytes.get(..8).ok_or_else(|| bad("truncated header length"))?.try_into().expect("8 bytes");
    let len = u64::from_le_bytes(len_bytes) as usize;
    let json = bytes.get(8..8 + len).ok_or_else(|| bad("truncated header"))?;
    let header: CheckpointHeader = serde_json::from_slice(json)?;
    if header.version != CHECKPOINT_VERSION {
        return Err(L2oError::Checkpoint(format!("unsupported version `{}`", header.version)));
    }
    if header.slots != SlotLayoutInfo::standard() {
        return Err(bad("checkpoint was trained with a different objective slot layout"));
    }
    let blob = &bytes[8 + len..];
    if blob.len() != 4 * header.n_params {
        return Err(L2oError::Checkpoint(format!(
            "expected {} parameter bytes, found {}",
            4 * header.n_params,
            blob.len()
        )));
    }
    let mut net = L2ONetwork::new(header.config.clone())?;
    if net.names.len() != header.tensors.len() {
        return Err(bad("tensor manifest does not match the architecture"));
    }
    for (i, t) in header.tensors.iter().enumerate() {
        let expected = net.params[i].dim();
        if t.name != net.names[i] || (t.shape[0], t.shape[1]) != expected {
            return Err(L2oError::Checkpoint(format!("tensor `{}` {:?} does not match the architecture", t.name, t.shape)));
        }
        let n = t.shape[0] * t.shape[1];
        let raw = blob.get(4 * t.offset..4 * (t.offset + n)).ok_or_else(|| bad("tensor outside blob"))?;
        let values: Vec<f64> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        net.params[i] = Array2::from_shape_vec(expected, values).map_err(|e| L2oError::Checkpoint(e.to_string()))?;
    }
    Ok(net)
}

pub fn save(net: &L2ONetwork, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    // Write then rename so readers never observe a partial file.
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, to_bytes(net)?)?;
    fs::rename(tmp, path)?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<L2ONetwork> {
    from_bytes(&fs::read(path)?)
}

/// Rounds every parameter through `f32`, i.e. the values a saved checkpoint
/// reloads to.
pub fn round_to_f32(net: &mut L2ONetwork) {
    for p in &mut net.params {
        p.mapv_inplace(|v| v as f32 as f64);
    }
}
