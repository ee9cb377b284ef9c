//! Checkpoint file: `MEMPOET1`, a little-endian u64 manifest length, a JSON
//! manifest (tensor names and shapes, vocabulary, training config), then every
//! tensor as row-major little-endian f64 in manifest order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::Vocabulary;
use crate::error::{Error, Result};
use crate::numerics::Matrix;

use super::{check_vocab, Dims, ModelParams, TrainConfig};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MEMPOET1";

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub vocab: Vocabulary,
    pub config: Option<TrainConfig>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    dims: Dims,
    vocab: Vocabulary,
    config: Option<TrainConfig>,
    tensors: Vec<TensorEntry>,
}

pub fn write_checkpoint(ckpt: &Checkpoint) -> Vec<u8> {
    let store = ckpt.params.store();
    let manifest = Manifest {
        dims: ckpt.params.dims(),
        vocab: ckpt.vocab.clone(),
        config: ckpt.config.clone(),
        tensors: store
            .names()
            .iter()
            .zip(store.values())
            .map(|(name, m)| TensorEntry {
                name: name.clone(),
                rows: m.rows(),
                cols: m.cols(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&manifest).expect("manifest serializes");
    let mut out = Vec::with_capacity(16 + json.len() + 8 * store.num_scalars());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for m in store.values() {
        for v in m.as_slice() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Splits `magic | u64 len | manifest | payload`, checking the magic.
pub(crate) fn split_container<'a>(
    bytes: &'a [u8],
    magic: &[u8; 8],
) -> Result<(&'a [u8], &'a [u8])> {
    let name = String::from_utf8_lossy(magic);
    if bytes.len() < 16 || &bytes[..8] != magic {
        return Err(Error::data(format!("missing {name} header")));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let len = usize::try_from(len).map_err(|_| Error::data("manifest length overflows"))?;
    let rest = &bytes[16..];
    if rest.len() < len {
        return Err(Error::data(format!("{name} manifest truncated")));
    }
    Ok(rest.split_at(len))
}

/// Reads `shapes` worth of f64 values; the payload must be consumed exactly.
pub(crate) fn read_tensors(payload: &[u8], shapes: &[(usize, usize)]) -> Result<Vec<Matrix>> {
    let expected: usize = shapes.iter().map(|(r, c)| r * c * 8).sum();
    if payload.len() != expected {
        return Err(Error::data(format!(
            "payload has {} bytes, manifest declares {expected}",
            payload.len()
        )));
    }
    let mut values = payload
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")));
    shapes
        .iter()
        .map(|&(r, c)| Matrix::new(r, c, values.by_ref().take(r * c).collect()))
        .collect()
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let (json, payload) = split_container(bytes, CHECKPOINT_MAGIC)?;
    let manifest: Manifest = serde_json::from_slice(json)
        .map_err(|e| Error::data(format!("checkpoint manifest: {e}")))?;
    // Re-validate the vocabulary index.
    let vocab = Vocabulary::from_json(&manifest.vocab.to_json())?;
    let layout = manifest.dims.layout();
    if manifest.tensors.len() != layout.len() {
        return Err(Error::data(format!(
            "checkpoint declares {} tensors, expected {}",
            manifest.tensors.len(),
            layout.len()
        )));
    }
    for (entry, (name, rows, cols)) in manifest.tensors.iter().zip(&layout) {
        if entry.name != *name || (entry.rows, entry.cols) != (*rows, *cols) {
            return Err(Error::data(format!(
                "tensor {} declared {}x{}, expected {name} {rows}x{cols}",
                entry.name, entry.rows, entry.cols
            )));
        }
    }
    let shapes: Vec<(usize, usize)> = manifest.tensors.iter().map(|t| (t.rows, t.cols)).collect();
    let params = ModelParams::from_tensors(manifest.dims, read_tensors(payload, &shapes)?)?;
    check_vocab(&params, &vocab).map_err(|e| Error::data(e.to_string()))?;
    Ok(Checkpoint {
        params,
        vocab,
        config: manifest.config,
    })
}

pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, write_checkpoint(ckpt)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(&bytes)
}
