// Checkpoint container:
//
//   magic    8 bytes  "CAMCKPT\0"
//   version  u32 LE
//   hlen     u64 LE   length of the JSON header
//   header   hlen bytes UTF-8 JSON {config, labels, dtype, trained_epochs, tensors}
//   payload  raw little-endian parameters, in header tensor order
//
// The payload length must match the header exactly.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CAMCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    labels: Vec<String>,
    dtype: String,
    trained_epochs: usize,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

pub fn save_checkpoint<T: Scalar>(model: &Model<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let header = Header {
        config: model.config.clone(),
        labels: model.labels.clone(),
        dtype: T::DTYPE.to_string(),
        trained_epochs: model.trained_epochs,
        tensors: model
            .params
            .iter()
            .map(|p| TensorEntry {
                name: p.name.clone(),
                shape: p.tensor.shape().to_vec(),
            })
            .collect(),
    };
    let header = serde_json::to_vec(&header).map_err(|e| Error::Serde(e.to_string()))?;
    let mut bytes = Vec::with_capacity(20 + header.len() + model.parameter_count() * T::BYTES);
    bytes.extend_from_slice(CHECKPOINT_MAGIC);
    bytes.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(header.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&header);
    for p in &model.params {
        for &v in p.tensor.data() {
            v.write_le(&mut bytes);
        }
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<Model<T>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let corrupt = |reason: String| Error::CorruptCheckpoint {
        path: path.to_path_buf(),
        reason,
    };
    if bytes.len() < 20 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(corrupt("missing checkpoint magic".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::CheckpointVersion {
            path: path.to_path_buf(),
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes"));
    let hend = usize::try_from(hlen)
        .ok()
        .and_then(|h| h.checked_add(20))
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| corrupt(format!("header length {hlen} exceeds file size")))?;
    let header: Header = serde_json::from_slice(&bytes[20..hend]).map_err(|e| corrupt(format!("bad header: {e}")))?;
    if header.dtype != T::DTYPE {
        return Err(corrupt(format!(
            "stored precision {} does not match requested {}",
            header.dtype,
            T::DTYPE
        )));
    }

    let mut model = Model::<T>::build(header.config).map_err(|e| corrupt(e.to_string()))?;
    if header.tensors.len() != model.params.len() {
        return Err(corrupt(format!(
            "{} tensors stored, config implies {}",
            header.tensors.len(),
            model.params.len()
        )));
    }
    let payload = &bytes[hend..];
    let expected: usize = header
        .tensors
        .iter()
        .map(|t| t.shape.iter().product::<usize>() * T::BYTES)
        .sum();
    if payload.len() != expected {
        return Err(corrupt(format!(
            "payload is {} bytes, expected {expected}",
            payload.len()
        )));
    }
    let mut offset = 0;
    for (entry, param) in header.tensors.iter().zip(model.params.iter_mut()) {
        if entry.name != param.name || entry.shape != param.tensor.shape() {
            return Err(corrupt(format!(
                "tensor {} {:?} does not match config ({} {:?})",
                entry.name,
                entry.shape,
                param.name,
                param.tensor.shape()
            )));
        }
        let numel = param.tensor.numel();
        let data = payload[offset..offset + numel * T::BYTES]
            .chunks_exact(T::BYTES)
            .map(T::read_le)
            .collect();
        offset += numel * T::BYTES;
        param.tensor = Tensor::new(entry.shape.clone(), data)?;
    }
    model.set_labels(header.labels).map_err(|e| corrupt(e.to_string()))?;
    model.trained_epochs = header.trained_epochs;
    Ok(model)
}
