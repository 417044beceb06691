//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//! ```text
//! "ETPC"  u32 version
//! u64 meta_len, meta_len bytes of JSON (configs, vocabulary, RNG state, Adam step)
//! u32 entry_count, then per entry:
//!   u32 name_len, name (UTF-8), u8 dtype (0 = f32), u32 rank, u64 dims[rank],
//!   f32 payload[product(dims)]
//! ```
//! Adam moments are stored as entries named `adam.m.<param>` and
//! `adam.v.<param>`.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AdamState, Moments, TrainConfig, TrainState};
use crate::autodiff::{ParamKind, Tensor};
use crate::nets::{EtpModel, ModelConfig, Vocabulary};

pub const MAGIC: &[u8; 4] = b"ETPC";
pub const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint: bad magic bytes")]
    BadMagic,
    #[error("checkpoint truncated: {0}")]
    Truncated(String),
    #[error("unsupported checkpoint version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
}

/// Position in the seeded schedule. Per-epoch and per-batch streams are
/// derived from `(seed, epoch, batch)`, so this is the whole RNG state.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub epochs_done: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub train: TrainConfig,
    pub model: ModelConfig,
    pub vocab: Vocabulary,
    pub rng: RngState,
    pub adam_step: u64,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_entry(out: &mut Vec<u8>, name: &str, t: &Tensor<f32>) {
    put_u32(out, name.len() as u32);
    out.extend_from_slice(name.as_bytes());
    out.push(DTYPE_F32);
    put_u32(out, t.rank() as u32);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode(state: &TrainState) -> Vec<u8> {
    let model = &state.model;
    let meta = CheckpointMeta {
        train: state.config.clone(),
        model: model.config.clone(),
        vocab: model.vocab.clone(),
        rng: RngState {
            seed: state.config.seed,
            epochs_done: state.epochs_done,
        },
        adam_step: state.adam.step,
    };
    let json = serde_json::to_vec(&meta).expect("meta serializes");

    let mut entries: Vec<(String, &Tensor<f32>)> = model.params.iter().map(|(_, p)| (p.name.clone(), &p.value)).collect();
    for (id, p) in model.params.iter() {
        if let Some(Some(mo)) = state.adam.moments.get(id.index()) {
            entries.push((format!("adam.m.{}", p.name), &mo.m));
            entries.push((format!("adam.v.{}", p.name), &mo.v));
        }
    }

    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    put_u32(&mut out, entries.len() as u32);
    for (name, t) in entries {
        put_entry(&mut out, &name, t);
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            CheckpointError::Truncated(format!("{what} needs {n} bytes at offset {}", self.pos))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<TrainState, CheckpointError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic = r.take(4, "magic").map_err(|_| CheckpointError::BadMagic)?;
    if magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(CheckpointError::Version {
            found: version,
            expected: VERSION,
        });
    }
    let meta_len = r.u64("meta length")? as usize;
    let meta: CheckpointMeta =
        serde_json::from_slice(r.take(meta_len, "meta")?).map_err(|e| CheckpointError::Corrupt(format!("meta: {e}")))?;

    let count = r.u32("entry count")?;
    let mut entries = HashMap::new();
    for _ in 0..count {
        let name_len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|_| CheckpointError::Corrupt("entry name is not UTF-8".into()))?
            .to_string();
        let dtype = r.take(1, "dtype")?[0];
        if dtype != DTYPE_F32 {
            return Err(CheckpointError::Corrupt(format!("{name}: unknown dtype {dtype}")));
        }
        let rank = r.u32("rank")? as usize;
        let dims = (0..rank).map(|_| r.u64("dims").map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
        let n = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| CheckpointError::Corrupt(format!("{name}: dims overflow")))?;
        let payload = r.take(n.checked_mul(4).ok_or_else(|| CheckpointError::Corrupt(format!("{name}: too large")))?, &name)?;
        let data = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        let t = Tensor::new(dims, data).map_err(|e| CheckpointError::Corrupt(format!("{name}: {e}")))?;
        if entries.insert(name.clone(), t).is_some() {
            return Err(CheckpointError::Corrupt(format!("duplicate entry {name}")));
        }
    }
    if r.pos != bytes.len() {
        return Err(CheckpointError::Corrupt(format!("{} trailing bytes", bytes.len() - r.pos)));
    }

    let mut model = EtpModel::<f32>::new(meta.model.clone(), meta.vocab.clone(), meta.train.seed)
        .map_err(|e| CheckpointError::Corrupt(format!("model config: {e}")))?;
    let mut adam = AdamState {
        step: meta.adam_step,
        moments: vec![None; model.params.len()],
    };
    let ids: Vec<_> = model.params.iter().map(|(id, p)| (id, p.name.clone(), p.kind)).collect();
    for (id, name, kind) in ids {
        let value = entries
            .remove(&name)
            .ok_or_else(|| CheckpointError::Corrupt(format!("missing entry {name}")))?;
        model
            .params
            .set_value(id, value)
            .map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
        let m = entries.remove(&format!("adam.m.{name}"));
        let v = entries.remove(&format!("adam.v.{name}"));
        match (m, v, kind) {
            (Some(m), Some(v), ParamKind::Weight) if m.shape() == model.params.value(id).shape() && v.shape() == m.shape() => {
                adam.moments[id.index()] = Some(Moments { m, v });
            }
            (None, None, _) => {}
            _ => return Err(CheckpointError::Corrupt(format!("inconsistent optimizer state for {name}"))),
        }
    }
    if let Some(extra) = entries.keys().next() {
        return Err(CheckpointError::Corrupt(format!("unexpected entry {extra}")));
    }
    Ok(TrainState {
        config: meta.train,
        model,
        adam,
        epochs_done: meta.rng.epochs_done,
        threads: 1,
    })
}

/// Writes to a sibling temporary file first, so an interrupted save never
/// replaces a good checkpoint with a partial one.
pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<(), CheckpointError> {
    let io = |e| CheckpointError::Io {
        path: path.display().to_string(),
        source: e,
    };
    let tmp = path.with_extension("etpc.tmp");
    std::fs::write(&tmp, encode(state)).map_err(io)?;
    std::fs::rename(&tmp, path).map_err(io)
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState, CheckpointError> {
    let bytes = std::fs::read(path).map_err(|e| CheckpointError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    decode(&bytes)
}

/// SHA-256 of the encoded checkpoint.
pub fn checkpoint_digest(state: &TrainState) -> String {
    use sha2::{Digest, Sha256};
    hex::encode(Sha256::digest(encode(state)))
}
