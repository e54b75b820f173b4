//! Checkpoint files.
//!
//! Layout: one line of UTF-8 JSON (the header), then [`CHECKPOINT_MAGIC`],
//! then raw little-endian `f32` tensor data in manifest order. Offsets in the
//! manifest are byte offsets from the start of the data section.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelParams};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8] = b"SKIPREC-TENSORS-V1\n";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config: ModelConfig,
    /// Real tracks; the embedding table has two extra reserved rows.
    pub num_tracks: usize,
    pub seed: u64,
    /// Hash of the vocabulary keys the checkpoint was trained against.
    pub vocab_fingerprint: String,
    /// Free-form training metadata (mode, loss weights, epoch, ...).
    #[serde(default)]
    pub meta: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: ModelParams,
}

fn write_tensor_file(
    path: &Path,
    header_fn: impl FnOnce(Vec<TensorEntry>) -> serde_json::Value,
    tensors: &[(String, Vec<usize>, &[f64])],
) -> Result<()> {
    let mut offset = 0;
    let manifest = tensors
        .iter()
        .map(|(name, shape, data)| {
            let entry = TensorEntry {
                name: name.clone(),
                shape: shape.clone(),
                offset,
            };
            offset += data.len() * 4;
            entry
        })
        .collect();
    let header = header_fn(manifest);
    let mut bytes = serde_json::to_vec(&header)?;
    bytes.push(b'\n');
    bytes.extend_from_slice(CHECKPOINT_MAGIC);
    bytes.reserve(offset);
    for (_, _, data) in tensors {
        for &v in data.iter() {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&bytes).map_err(|e| Error::io(path, e))
}

fn read_tensor_file(path: &Path) -> Result<(serde_json::Value, Vec<u8>)> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = BufReader::new(file);
    let mut line = Vec::new();
    reader
        .read_until(b'\n', &mut line)
        .map_err(|e| Error::io(path, e))?;
    let header: serde_json::Value = serde_json::from_slice(&line)
        .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
    let mut magic = vec![0u8; CHECKPOINT_MAGIC.len()];
    reader
        .read_exact(&mut magic)
        .map_err(|_| Error::Checkpoint("truncated before magic".into()))?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("missing magic string".into()));
    }
    let mut data = Vec::new();
    reader
        .read_to_end(&mut data)
        .map_err(|e| Error::io(path, e))?;
    Ok((header, data))
}

fn tensor_data(data: &[u8], entry: &TensorEntry, expected: usize) -> Result<Vec<f64>> {
    let len: usize = entry.shape.iter().product();
    if len != expected {
        return Err(Error::Checkpoint(format!(
            "tensor {} has {len} values, expected {expected}",
            entry.name
        )));
    }
    let bytes = data
        .get(entry.offset..entry.offset + 4 * len)
        .ok_or_else(|| Error::Checkpoint(format!("tensor {} out of bounds", entry.name)))?;
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}

fn fill_params(params: &mut ModelParams, manifest: &[TensorEntry], data: &[u8], prefix: &str) -> Result<()> {
    for (name, dst) in params.tensors_mut() {
        let full = format!("{prefix}{name}");
        let entry = manifest
            .iter()
            .find(|e| e.name == full)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {full}")))?;
        let values = tensor_data(data, entry, dst.len())?;
        dst.copy_from_slice(&values);
    }
    Ok(())
}

pub fn save_checkpoint(
    path: &Path,
    params: &ModelParams,
    seed: u64,
    vocab_fingerprint: &str,
    meta: serde_json::Value,
) -> Result<()> {
    let tensors: Vec<_> = params
        .tensors()
        .into_iter()
        .map(|t| (t.name, t.shape, t.data))
        .collect();
    let config = params.config.clone();
    let num_tracks = params.num_tracks;
    let fingerprint = vocab_fingerprint.to_string();
    write_tensor_file(
        path,
        move |manifest| {
            serde_json::to_value(CheckpointHeader {
                config,
                num_tracks,
                seed,
                vocab_fingerprint: fingerprint,
                meta,
                tensors: manifest,
            })
            .expect("header serializes")
        },
        &tensors,
    )
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let (header, data) = read_tensor_file(path)?;
    let header: CheckpointHeader = serde_json::from_value(header)
        .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
    header.config.validate()?;
    let mut params = ModelParams::zeros(&header.config, header.num_tracks);
    fill_params(&mut params, &header.tensors, &data, "")?;
    if !params.all_finite() {
        return Err(Error::Checkpoint("non-finite parameter values".into()));
    }
    Ok(Checkpoint { header, params })
}

#[derive(Serialize, Deserialize)]
struct OptimizerHeader {
    step: u64,
    config: ModelConfig,
    num_tracks: usize,
    tensors: Vec<TensorEntry>,
}

/// Writes Adam moments (`m/<name>`, `v/<name>`) and the step counter.
pub fn save_optimizer_state(path: &Path, first: &ModelParams, second: &ModelParams, step: u64) -> Result<()> {
    let mut tensors = Vec::new();
    for (prefix, moments) in [("m/", first), ("v/", second)] {
        for t in moments.tensors() {
            tensors.push((format!("{prefix}{}", t.name), t.shape, t.data));
        }
    }
    let config = first.config.clone();
    let num_tracks = first.num_tracks;
    write_tensor_file(
        path,
        move |manifest| {
            serde_json::to_value(OptimizerHeader {
                step,
                config,
                num_tracks,
                tensors: manifest,
            })
            .expect("header serializes")
        },
        &tensors,
    )
}

/// Reads moments written by [`save_optimizer_state`]: `(m, v, step)`.
pub fn load_optimizer_state(path: &Path) -> Result<(ModelParams, ModelParams, u64)> {
    let (header, data) = read_tensor_file(path)?;
    let header: OptimizerHeader = serde_json::from_value(header)
        .map_err(|e| Error::Checkpoint(format!("bad optimizer header: {e}")))?;
    let mut m = ModelParams::zeros(&header.config, header.num_tracks);
    let mut v = m.clone();
    fill_params(&mut m, &header.tensors, &data, "m/")?;
    fill_params(&mut v, &header.tensors, &data, "v/")?;
    Ok((m, v, header.step))
}
