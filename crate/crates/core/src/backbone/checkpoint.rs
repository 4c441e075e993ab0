//! Binary checkpoints.
//!
//! Layout: the magic line, a little-endian `u64` header length, a JSON header
//! (configs, step, dtype, tensor names and shapes in storage order), then
//! each tensor's values as raw little-endian floats in header order.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::{ModelConfig, ParamSet, Precision};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 12] = b"GENREC-CKPT\n";
const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    /// Serialized training configuration (opaque to the backbone).
    pub train: serde_json::Value,
    pub step: u64,
    pub params: ParamSet,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    schema: String,
    version: u32,
    model: ModelConfig,
    train: serde_json::Value,
    step: u64,
    dtype: String,
    tensors: Vec<TensorEntry>,
}

pub fn save_checkpoint<W: Write>(mut w: W, ckpt: &Checkpoint) -> Result<()> {
    let f32_storage = ckpt.model.precision == Precision::F32;
    let tensors = ckpt
        .params
        .named()
        .into_iter()
        .map(|(name, _, t)| TensorEntry { name, shape: t.shape.clone() })
        .collect();
    let header = Header {
        schema: "genrec.checkpoint".into(),
        version: SCHEMA_VERSION,
        model: ckpt.model.clone(),
        train: ckpt.train.clone(),
        step: ckpt.step,
        dtype: if f32_storage { "f32" } else { "f64" }.into(),
        tensors,
    };
    let json = serde_json::to_vec(&header)?;
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    let mut buf = Vec::new();
    for (name, _, t) in ckpt.params.named() {
        for &v in &t.data {
            if f32_storage {
                let x = v as f32;
                if x as f64 != v {
                    return Err(Error::Format(format!("tensor {name} holds a value not representable as f32")));
                }
                buf.extend_from_slice(&x.to_le_bytes());
            } else {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn load_checkpoint<R: Read>(mut r: R) -> Result<Checkpoint> {
    let mut magic = [0u8; 12];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a checkpoint file".into()));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len)?;
    let len = u64::from_le_bytes(len) as usize;
    if len > 1 << 30 {
        return Err(Error::Format("checkpoint header too large".into()));
    }
    let mut json = vec![0u8; len];
    r.read_exact(&mut json)?;
    let header: Header = serde_json::from_slice(&json)?;
    if header.schema != "genrec.checkpoint" || header.version != SCHEMA_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint schema {} v{}", header.schema, header.version)));
    }
    let width = match header.dtype.as_str() {
        "f32" => 4,
        "f64" => 8,
        other => return Err(Error::Format(format!("unknown dtype {other}"))),
    };
    header.model.validate()?;
    let mut params = ParamSet::init(&header.model, 0);
    let expected: Vec<(String, Vec<usize>)> =
        params.named().into_iter().map(|(n, _, t)| (n, t.shape.clone())).collect();
    if expected.len() != header.tensors.len()
        || expected.iter().zip(&header.tensors).any(|((n, s), e)| *n != e.name || *s != e.shape)
    {
        return Err(Error::Format("tensor table does not match the model configuration".into()));
    }
    let mut err = None;
    params.for_each_mut(|name, _, t| {
        if err.is_some() {
            return;
        }
        let mut raw = vec![0u8; t.len() * width];
        if let Err(e) = r.read_exact(&mut raw) {
            err = Some(Error::Format(format!("truncated tensor {name}: {e}")));
            return;
        }
        for (v, chunk) in t.data.iter_mut().zip(raw.chunks_exact(width)) {
            *v = if width == 4 {
                f32::from_le_bytes(chunk.try_into().unwrap()) as f64
            } else {
                f64::from_le_bytes(chunk.try_into().unwrap())
            };
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    if !params.all_finite() {
        return Err(Error::Format("checkpoint holds non-finite values".into()));
    }
    Ok(Checkpoint { model: header.model, train: header.train, step: header.step, params })
}
