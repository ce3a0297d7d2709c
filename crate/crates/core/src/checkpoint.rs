//! Binary checkpoint format.
//!
//! ```text
//! "DRMC" | version u32 | meta_len u32 | meta (JSON) | count u32 |
//!   count × { name_len u32 | name | dtype u8 | rank u32 | extents u64… | payload LE }
//! | crc32 u32 (of every preceding byte)
//! ```
//! All integers are little-endian. Tensors are the model parameters in
//! store order followed by the Adam first and second moments.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::{ModelConfig, TrainConfig};
use crate::data::{SynthConfig, Vocab};
use crate::error::{DreamError, Result};
use crate::model::Dream;
use crate::params::ParamStore;
use crate::tensor::{Precision, Tensor};
use crate::train::{AdamState, Trainer};

pub const MAGIC: &[u8; 4] = b"DRMC";
pub const VERSION: u32 = 1;

const DTYPE_F64: u8 = 0;
const DTYPE_F32: u8 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub synth: SynthConfig,
    pub vocab: Vocab,
    pub step: usize,
    pub adam_step: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: ParamStore,
    pub adam: AdamState,
}

impl Checkpoint {
    pub fn from_trainer(trainer: &Trainer, vocab: &Vocab, synth: &SynthConfig) -> Self {
        Checkpoint {
            meta: CheckpointMeta {
                model: trainer.model.config.clone(),
                train: trainer.config.clone(),
                synth: synth.clone(),
                vocab: vocab.clone(),
                step: trainer.step,
                adam_step: trainer.state.step,
            },
            params: trainer.model.store.clone(),
            adam: trainer.state.clone(),
        }
    }

    /// Rebuilds the model from the stored config and installs the stored
    /// tensors. Fails if the layouts disagree.
    pub fn into_trainer(self) -> Result<Trainer> {
        let mut model = Dream::new(self.meta.model.clone())?;
        if !model.store.same_layout(&self.params) {
            return Err(DreamError::Checkpoint(
                "stored tensors do not match the architecture described by the stored config".into(),
            ));
        }
        model.store = self.params;
        let mut trainer = Trainer::new(model, self.meta.train)?;
        if !self.adam.matches(trainer.model.store.tensors()) {
            return Err(DreamError::Checkpoint("optimizer state does not match parameters".into()));
        }
        trainer.state = self.adam;
        trainer.step = self.meta.step;
        Ok(trainer)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let meta = serde_json::to_vec(&self.meta)?;
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        let dtype = match self.meta.model.precision {
            Precision::F64 => DTYPE_F64,
            Precision::F32 => DTYPE_F32,
        };
        let mut records: Vec<(String, &Tensor)> = self.params.iter().map(|(n, t)| (n.to_string(), t)).collect();
        for (prefix, moments) in [("adam.m.", &self.adam.m), ("adam.v.", &self.adam.v)] {
            for ((n, _), t) in self.params.iter().zip(moments) {
                records.push((format!("{prefix}{n}"), t));
            }
        }
        out.extend_from_slice(&(records.len() as u32).to_le_bytes());
        for (name, t) in records {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            // Moments are kept at full width regardless of compute precision.
            let tag = if name.starts_with("adam.") { DTYPE_F64 } else { dtype };
            out.push(tag);
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &e in t.shape() {
                out.extend_from_slice(&(e as u64).to_le_bytes());
            }
            for &x in t.data() {
                match tag {
                    DTYPE_F32 => out.extend_from_slice(&(x as f32).to_le_bytes()),
                    _ => out.extend_from_slice(&x.to_le_bytes()),
                }
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 {
            return Err(DreamError::Checkpoint("file is truncated".into()));
        }
        if &bytes[..4] != MAGIC {
            return Err(DreamError::Checkpoint("bad magic, not a checkpoint".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(DreamError::CheckpointVersion {
                found: version,
                supported: VERSION,
            });
        }
        let body = &bytes[..bytes.len() - 4];
        let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().expect("4 bytes"));
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(DreamError::Checksum { stored, computed });
        }
        let mut r = Reader { buf: body, pos: 8 };
        let meta_len = r.u32()? as usize;
        let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len)?)
            .map_err(|e| DreamError::Checkpoint(format!("bad config blob: {e}")))?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| DreamError::Checkpoint("tensor name is not UTF-8".into()))?;
            let tag = r.take(1)?[0];
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            let numel: usize = shape.iter().product();
            let data: Vec<f64> = match tag {
                DTYPE_F64 => r
                    .take(numel * 8)?
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect(),
                DTYPE_F32 => r
                    .take(numel * 4)?
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                    .collect(),
                other => return Err(DreamError::Checkpoint(format!("unknown dtype tag {other}"))),
            };
            tensors.push((name, Tensor::new(shape, data)?));
        }
        if r.pos != body.len() {
            return Err(DreamError::Checkpoint("trailing bytes after tensor records".into()));
        }
        if count % 3 != 0 {
            return Err(DreamError::Checkpoint("tensor count is not params + two moments".into()));
        }
        let n = count / 3;
        let mut params = ParamStore::new();
        let mut m = Vec::with_capacity(n);
        let mut v = Vec::with_capacity(n);
        for (i, (name, t)) in tensors.into_iter().enumerate() {
            if i < n {
                params.insert(name, t)?;
            } else {
                let k = (i - n) % n;
                let expected = format!("adam.{}.{}", if i < 2 * n { "m" } else { "v" }, params.name(params.ids().nth(k).expect("in range")));
                if name != expected {
                    return Err(DreamError::Checkpoint(format!("expected record `{expected}`, found `{name}`")));
                }
                if i < 2 * n {
                    m.push(t);
                } else {
                    v.push(t);
                }
            }
        }
        let adam = AdamState {
            m,
            v,
            step: meta.adam_step,
        };
        Ok(Checkpoint { meta, params, adam })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Checkpoint::from_bytes(&fs::read(path)?)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(e) => {
                let s = &self.buf[self.pos..e];
                self.pos = e;
                Ok(s)
            }
            None => Err(DreamError::Checkpoint("file is truncated".into())),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
