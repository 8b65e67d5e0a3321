//! Versioned binary checkpoint.
//!
//! Layout, all integers little-endian:
//!
//! | bytes            | content                                            |
//! |------------------|----------------------------------------------------|
//! | 8                | magic `HDNETCKP`                                   |
//! | 4 (u32)          | format version                                     |
//! | 8 (u64)          | header length `n`                                  |
//! | n                | UTF-8 JSON header (see [`Header`])                 |
//! | 8·k              | f64 payload, in header order                       |
//!
//! The payload holds every parameter tensor, then every batch-norm buffer
//! (mean, then variance), then the optimizer's first and second moments if
//! present.

use std::io::{Read, Write};
use std::path::Path;

use hdnet_autodiff::Tensor;
use serde::{Deserialize, Serialize};

use super::{BnState, HdNet, ModelConfig, ParamStore};
use crate::error::{CoreError, Result};
use crate::skeleton::Skeleton;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"HDNETCKP";

/// Adam moment buffers, one per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub first: Vec<Vec<f64>>,
    pub second: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub skeleton: Skeleton,
    pub params: ParamStore,
    pub moments: Option<Moments>,
    /// Free-form training state (step counter, best validation record, ...).
    pub meta: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct BnEntry {
    name: String,
    channels: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    skeleton: String,
    tensors: Vec<TensorEntry>,
    batch_norm: Vec<BnEntry>,
    has_moments: bool,
    meta: serde_json::Value,
}

impl Checkpoint {
    pub fn from_model(model: &HdNet, moments: Option<Moments>, meta: serde_json::Value) -> Self {
        Self {
            config: model.config().clone(),
            skeleton: model.skeleton().clone(),
            params: model.params().clone(),
            moments,
            meta,
        }
    }

    /// Rebuilds the model and loads the stored values into it.
    pub fn to_model(&self) -> Result<HdNet> {
        let mut model = HdNet::new(self.config.clone(), self.skeleton.clone(), 0)?;
        model.params_mut().load_from(&self.params)?;
        Ok(model)
    }
}

fn put_f64s(out: &mut Vec<u8>, values: &[f64]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Vec<u8> {
    let p = &ckpt.params;
    let header = Header {
        config: ckpt.config.clone(),
        skeleton: ckpt.skeleton.to_toml_string(),
        tensors: p
            .names()
            .iter()
            .zip(p.tensors())
            .map(|(n, t)| TensorEntry {
                name: n.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
        batch_norm: p
            .bn_states()
            .iter()
            .map(|s| BnEntry {
                name: s.name.clone(),
                channels: s.mean.len(),
            })
            .collect(),
        has_moments: ckpt.moments.is_some(),
        meta: ckpt.meta.clone(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(20 + json.len() + 8 * 3 * p.num_values());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for t in p.tensors() {
        put_f64s(&mut out, t.values());
    }
    for s in p.bn_states() {
        put_f64s(&mut out, &s.mean);
        put_f64s(&mut out, &s.var);
    }
    if let Some(m) = &ckpt.moments {
        for buf in m.first.iter().chain(&m.second) {
            put_f64s(&mut out, buf);
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| CoreError::Checkpoint("file is truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| CoreError::Checkpoint("size overflow".into()))?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(8)? != MAGIC {
        return Err(CoreError::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let version = u32::from_le_bytes(cur.take(4)?.try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(CoreError::Checkpoint(format!(
            "unsupported version {version} (expected {CHECKPOINT_VERSION})"
        )));
    }
    let len = u64::from_le_bytes(cur.take(8)?.try_into().expect("8 bytes")) as usize;
    let header: Header =
        serde_json::from_slice(cur.take(len)?).map_err(|e| CoreError::Checkpoint(format!("header: {e}")))?;
    let skeleton = Skeleton::from_toml_str(&header.skeleton)?;
    let mut names = Vec::with_capacity(header.tensors.len());
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for e in &header.tensors {
        let n: usize = e.shape.iter().product();
        let values = cur.f64s(n)?;
        tensors.push(Tensor::new(&e.shape, values).map_err(|err| CoreError::Checkpoint(format!("{}: {err}", e.name)))?);
        names.push(e.name.clone());
    }
    let mut bn = Vec::with_capacity(header.batch_norm.len());
    for e in &header.batch_norm {
        bn.push(BnState {
            name: e.name.clone(),
            mean: cur.f64s(e.channels)?,
            var: cur.f64s(e.channels)?,
        });
    }
    let moments = if header.has_moments {
        let read_all = |cur: &mut Cursor| -> Result<Vec<Vec<f64>>> { tensors.iter().map(|t| cur.f64s(t.numel())).collect() };
        let first = read_all(&mut cur)?;
        let second = read_all(&mut cur)?;
        Some(Moments { first, second })
    } else {
        None
    };
    if cur.pos != bytes.len() {
        return Err(CoreError::Checkpoint(format!("{} trailing bytes", bytes.len() - cur.pos)));
    }
    Ok(Checkpoint {
        config: header.config,
        skeleton,
        params: ParamStore::from_parts(names, tensors, bn),
        moments,
        meta: header.meta,
    })
}

pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let bytes = encode_checkpoint(ckpt);
    let tmp = path.with_extension("tmp");
    let mut f = std::fs::File::create(&tmp).map_err(|e| CoreError::io(&tmp, e))?;
    f.write_all(&bytes).map_err(|e| CoreError::io(&tmp, e))?;
    f.sync_all().map_err(|e| CoreError::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| CoreError::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| CoreError::io(path, e))?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> HdNet {
        let cfg = ModelConfig {
            input_size: 16,
            heatmap_size: 4,
            feature_channels: 4,
            merge_channels: 2,
            ..ModelConfig::default()
        };
        HdNet::new(cfg, Skeleton::default_human(), 3).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let model = tiny();
        let moments = Moments {
            first: model.params().tensors().iter().map(|t| vec![0.5; t.numel()]).collect(),
            second: model.params().tensors().iter().map(|t| vec![0.25; t.numel()]).collect(),
        };
        let ckpt = Checkpoint::from_model(&model, Some(moments), serde_json::json!({"step": 7}));
        let bytes = encode_checkpoint(&ckpt);
        assert_eq!(decode_checkpoint(&bytes).unwrap(), ckpt);
        let back = ckpt.to_model().unwrap();
        assert_eq!(back.params(), model.params());
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let bytes = encode_checkpoint(&Checkpoint::from_model(&tiny(), None, serde_json::Value::Null));
        assert!(decode_checkpoint(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_checkpoint(&bad).unwrap_err().to_string().contains("magic"));
        let mut v2 = bytes;
        v2[8] = 2;
        assert!(decode_checkpoint(&v2).unwrap_err().to_string().contains("version"));
    }
}
