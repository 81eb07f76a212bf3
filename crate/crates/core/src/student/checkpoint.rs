//! Self-describing checkpoint container: a magic tag, a length-prefixed
//! JSON header (training config, scalar type, tensor index) and the raw
//! little-endian tensor data.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{RegenError, Result};
use crate::fsio::write_atomic;
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

use super::{StudentModel, TrainConfig};

const MAGIC: &[u8; 8] = b"REGENCK1";

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: [usize; 4],
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    scalar: String,
    epoch: usize,
    config: TrainConfig,
    tensors: Vec<TensorEntry>,
}

fn bad(msg: impl Into<String>) -> RegenError {
    RegenError::Checkpoint(msg.into())
}

fn encode_value(scalar: &str, v: f64, out: &mut Vec<u8>) {
    if scalar == "f32" {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    } else {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serialize every generator and discriminator tensor.
pub fn save<T: Scalar>(model: &StudentModel<T>, epoch: usize, path: &Path) -> Result<()> {
    let params: Vec<(String, &Tensor<T>)> = model
        .generator
        .named_params()
        .into_iter()
        .chain(model.discriminator.named_params())
        .map(|(n, p)| (n, &p.value))
        .collect();
    let mut tensors = Vec::with_capacity(params.len());
    let mut data = Vec::new();
    let width = std::mem::size_of::<T>();
    for (name, t) in &params {
        tensors.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().dims(),
            offset: data.len() / width,
        });
        for v in t.data() {
            encode_value(T::NAME, v.to_f64_lossy(), &mut data);
        }
    }
    let header = Header {
        scalar: T::NAME.to_string(),
        epoch,
        config: model.config.clone(),
        tensors,
    };
    let header = serde_json::to_vec(&header).map_err(|e| bad(e.to_string()))?;
    let mut bytes = Vec::with_capacity(16 + header.len() + data.len());
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&(header.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&header);
    bytes.extend_from_slice(&data);
    write_atomic(path, &bytes)
}

/// Rebuild a model from a checkpoint, converting the stored scalar type to `T`.
/// Returns the model and the epoch it was saved after.
pub fn load<T: Scalar>(path: &Path) -> Result<(StudentModel<T>, usize)> {
    let bytes = std::fs::read(path).map_err(|e| RegenError::io(path, e))?;
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad(format!("{} is not a checkpoint", path.display())));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = bytes
        .get(16..16 + hlen)
        .ok_or_else(|| bad("truncated checkpoint header"))?;
    let header: Header = serde_json::from_slice(body).map_err(|e| bad(e.to_string()))?;
    let data = &bytes[16 + hlen..];
    let width = match header.scalar.as_str() {
        "f32" => 4,
        "f64" => 8,
        other => return Err(bad(format!("unsupported scalar type {other}"))),
    };
    let read = |i: usize| -> Option<f64> {
        let b = data.get(i * width..(i + 1) * width)?;
        Some(if width == 4 {
            f32::from_le_bytes(b.try_into().ok()?) as f64
        } else {
            f64::from_le_bytes(b.try_into().ok()?)
        })
    };
    let mut model = StudentModel::<T>::build(&header.config)?;
    let mut slots: Vec<(String, &mut Tensor<T>)> = model
        .generator
        .named_params_mut()
        .into_iter()
        .chain(model.discriminator.named_params_mut())
        .map(|(n, p)| (n, &mut p.value))
        .collect();
    if slots.len() != header.tensors.len() {
        return Err(bad(format!(
            "checkpoint holds {} tensors, model expects {}",
            header.tensors.len(),
            slots.len()
        )));
    }
    for ((name, slot), entry) in slots.iter_mut().zip(&header.tensors) {
        let [n, c, h, w] = entry.shape;
        let shape = Shape::new(n, c, h, w);
        if *name != entry.name || slot.shape() != shape {
            return Err(bad(format!(
                "tensor {} {shape} does not match model tensor {name} {}",
                entry.name,
                slot.shape()
            )));
        }
        for (i, v) in slot.data_mut().iter_mut().enumerate() {
            *v = T::from_f64_lossy(read(entry.offset + i).ok_or_else(|| bad("truncated tensor data"))?);
        }
    }
    drop(slots);
    Ok((model, header.epoch))
}
