//! Versioned named-tensor container.
//!
//! Layout: the 8-byte magic `TWINSCKP`, a little-endian `u32` header
//! length, a UTF-8 JSON header, then the payload. Every tensor record in
//! the header points at `length` bytes of little-endian values starting at
//! `offset` into the payload.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CheckpointError, Error, Result};
use crate::network::{BnLayerState, Model, ModelConfig};
use crate::tensor::{DType, Scalar, Tensor};
use crate::training::Method;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"TWINSCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

/// What a checkpoint describes besides its tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    /// Pipeline stage that produced it (`pretrain`, `warmup`, `finetune`, ...).
    pub stage: String,
    pub seed: u64,
    /// Completed training epochs.
    pub epoch: usize,
    #[serde(default)]
    pub method: Option<Method>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorRecord {
    name: String,
    shape: Vec<usize>,
    dtype: DType,
    offset: usize,
    length: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    version: u32,
    metadata: CheckpointMeta,
    tensors: Vec<TensorRecord>,
}

const STAT_NAMES: [&str; 4] = ["running_mean", "running_var", "frozen_mean", "frozen_var"];

fn stat_name(layer: usize, which: &str) -> String {
    format!("bn{}.{which}", layer + 1)
}

fn stat_field<'a, T>(s: &'a mut BnLayerState<T>, which: &str) -> &'a mut Vec<T> {
    match which {
        "running_mean" => &mut s.running_mean,
        "running_var" => &mut s.running_var,
        "frozen_mean" => &mut s.frozen_mean,
        _ => &mut s.frozen_var,
    }
}

/// Every named tensor of a model: parameters, then BN statistics.
fn named_tensors<T: Scalar>(model: &Model<T>) -> Vec<(String, Vec<usize>, Vec<T>)> {
    let mut out: Vec<_> = model
        .params
        .iter()
        .map(|(n, t)| (n.to_string(), t.shape().to_vec(), t.data().to_vec()))
        .collect();
    for (l, s) in model.bn.iter().enumerate() {
        let mut s = s.clone();
        for which in STAT_NAMES {
            let v = stat_field(&mut s, which).clone();
            out.push((stat_name(l, which), vec![v.len()], v));
        }
    }
    out
}

/// Serializes `model` and `meta` into the checkpoint byte layout.
pub fn encode_checkpoint<T: Scalar>(model: &Model<T>, meta: &CheckpointMeta) -> Result<Vec<u8>> {
    let mut payload = Vec::new();
    let mut records = Vec::new();
    for (name, shape, data) in named_tensors(model) {
        let offset = payload.len();
        for v in &data {
            v.write_le(&mut payload);
        }
        records.push(TensorRecord {
            name,
            shape,
            dtype: T::DTYPE,
            offset,
            length: payload.len() - offset,
        });
    }
    let header = serde_json::to_vec(&Header {
        version: CHECKPOINT_VERSION,
        metadata: meta.clone(),
        tensors: records,
    })?;
    let mut out = Vec::with_capacity(12 + header.len() + payload.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn save_checkpoint<T: Scalar>(path: &Path, model: &Model<T>, meta: &CheckpointMeta) -> Result<()> {
    let bytes = encode_checkpoint(model, meta)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_values<T: Scalar>(rec: &TensorRecord, bytes: &[u8]) -> Result<Vec<T>> {
    let size = rec.dtype.size_of();
    let count: usize = rec.shape.iter().product();
    if rec.length != count * size {
        return Err(CheckpointError::BadRecord {
            name: rec.name.clone(),
            detail: format!("{} bytes for shape {:?} of {}", rec.length, rec.shape, rec.dtype),
        }
        .into());
    }
    Ok(bytes
        .chunks_exact(size)
        .map(|c| match rec.dtype {
            DType::F32 => T::of(f32::read_le(c) as f64),
            DType::F64 => T::of(f64::read_le(c)),
        })
        .collect())
}

/// Decodes checkpoint bytes, converting values to `T` when the stored
/// dtype differs. Nothing is returned unless every tensor validates.
pub fn decode_checkpoint<T: Scalar>(bytes: &[u8]) -> Result<(Model<T>, CheckpointMeta)> {
    if bytes.len() < 12 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic.into());
    }
    let hlen = u32::from_le_bytes([bytes[8], bytes[9], bytes[10], bytes[11]]) as usize;
    let header_bytes = bytes
        .get(12..12 + hlen)
        .ok_or_else(|| CheckpointError::Header(format!("header of {hlen} bytes exceeds the file")))?;
    #[derive(Deserialize)]
    struct Version {
        version: u32,
    }
    let v: Version = serde_json::from_slice(header_bytes).map_err(|e| CheckpointError::Header(e.to_string()))?;
    if v.version != CHECKPOINT_VERSION {
        return Err(CheckpointError::UnsupportedVersion(v.version).into());
    }
    let header: Header = serde_json::from_slice(header_bytes).map_err(|e| CheckpointError::Header(e.to_string()))?;
    let payload = &bytes[12 + hlen..];

    let mut config = header.metadata.model.clone();
    config.dtype = T::DTYPE;
    // A freshly built model fixes the expected names and shapes.
    let mut model = Model::<T>::new(config, &mut ChaCha8Rng::seed_from_u64(0))?;
    let mut found = std::collections::BTreeMap::new();
    for rec in &header.tensors {
        let end = rec.offset.checked_add(rec.length).filter(|&e| e <= payload.len());
        let Some(end) = end else {
            return Err(CheckpointError::OutOfBounds {
                name: rec.name.clone(),
                offset: rec.offset,
                length: rec.length,
                payload: payload.len(),
            }
            .into());
        };
        let values = read_values::<T>(rec, &payload[rec.offset..end])?;
        found.insert(rec.name.clone(), (rec.shape.clone(), values));
    }
    let mismatch = |name: &str, want: &[usize], got: &[usize]| -> Error {
        CheckpointError::BadRecord {
            name: name.to_string(),
            detail: format!("shape {got:?}, model expects {want:?}"),
        }
        .into()
    };
    let names: Vec<String> = model.params.names().map(String::from).collect();
    for name in names {
        let (shape, values) = found
            .remove(&name)
            .ok_or_else(|| CheckpointError::MissingTensor(name.clone()))?;
        let slot = model.params.get_mut(&name).expect("listed above");
        if slot.shape() != shape.as_slice() {
            return Err(mismatch(&name, slot.shape(), &shape));
        }
        *slot = Tensor::new(shape, values)?;
    }
    for (l, state) in model.bn.iter_mut().enumerate() {
        for which in STAT_NAMES {
            let name = stat_name(l, which);
            let (shape, values) = found
                .remove(&name)
                .ok_or_else(|| CheckpointError::MissingTensor(name.clone()))?;
            let field = stat_field(state, which);
            if shape != [field.len()] {
                return Err(mismatch(&name, &[field.len()], &shape));
            }
            *field = values;
        }
    }
    if let Some(extra) = found.keys().next() {
        return Err(CheckpointError::BadRecord {
            name: extra.clone(),
            detail: "not part of the declared model".into(),
        }
        .into());
    }
    Ok((model, header.metadata))
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<(Model<T>, CheckpointMeta)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
