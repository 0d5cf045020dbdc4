//! Binary checkpoint format.
//!
//! ```text
//! magic "KGDSTCK1" | u32 version | u64 header length | JSON header | f64 data
//! ```
//!
//! All integers and floats are little-endian. The data section holds the
//! parameters, then Adam's first and second moments (when present), then the
//! best-so-far parameters and a frozen retriever copy (each when present), all
//! in header tensor order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsio::write_atomic;
use crate::model::optim::AdamState;
use crate::model::params::ParamSet;
use crate::model::tensor::Tensor;
use crate::model::transformer::{Model, ModelConfig};
use crate::model::vocab::Vocabulary;

pub const MAGIC: &[u8; 8] = b"KGDSTCK1";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorInfo {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    vocab: Vocabulary,
    #[serde(default)]
    meta: serde_json::Value,
    tensors: Vec<TensorInfo>,
    adam_t: Option<u64>,
    has_best: bool,
    #[serde(default)]
    has_frozen: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub vocab: Vocabulary,
    /// Training-side state (configuration, step, seed, best score...).
    pub meta: serde_json::Value,
    pub params: ParamSet,
    pub adam: Option<AdamState>,
    /// Parameters with the best development score so far.
    pub best: Option<ParamSet>,
    /// Parameters used only for retrieval scoring (sequential schedule).
    pub frozen: Option<ParamSet>,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn push_tensors(out: &mut Vec<u8>, tensors: &[Tensor]) {
    for t in tensors {
        for x in &t.data {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| corrupt("truncated file"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn tensors(&mut self, infos: &[TensorInfo]) -> Result<Vec<Tensor>> {
        infos
            .iter()
            .map(|info| {
                let n = info.rows * info.cols;
                let raw = self.take(n * 8)?;
                let data = raw
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect();
                Ok(Tensor::new(info.rows, info.cols, data))
            })
            .collect()
    }
}

impl Checkpoint {
    pub fn from_model(model: &Model, vocab: &Vocabulary, meta: serde_json::Value) -> Self {
        Checkpoint {
            model: model.config.clone(),
            vocab: vocab.clone(),
            meta,
            params: model.params.clone(),
            adam: None,
            best: None,
            frozen: None,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let header = Header {
            model: self.model.clone(),
            vocab: self.vocab.clone(),
            meta: self.meta.clone(),
            tensors: self
                .params
                .names()
                .iter()
                .zip(self.params.tensors())
                .map(|(name, t)| TensorInfo {
                    name: name.clone(),
                    rows: t.rows,
                    cols: t.cols,
                })
                .collect(),
            adam_t: self.adam.as_ref().map(|a| a.t),
            has_best: self.best.is_some(),
            has_frozen: self.frozen.is_some(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(20 + json.len() + self.params.num_scalars() * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        push_tensors(&mut out, self.params.tensors());
        if let Some(adam) = &self.adam {
            push_tensors(&mut out, &adam.m);
            push_tensors(&mut out, &adam.v);
        }
        if let Some(best) = &self.best {
            push_tensors(&mut out, best.tensors());
        }
        if let Some(frozen) = &self.frozen {
            push_tensors(&mut out, frozen.tensors());
        }
        out
    }

    /// Parses and validates a checkpoint. Never panics on malformed input.
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8).map_err(|_| corrupt("not a checkpoint"))? != MAGIC {
            return Err(corrupt("not a checkpoint (bad magic)"));
        }
        let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(corrupt(format!("unsupported version {version}")));
        }
        let len = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
        let len = usize::try_from(len).map_err(|_| corrupt("header length overflows"))?;
        let header: Header = serde_json::from_slice(r.take(len)?)
            .map_err(|e| corrupt(format!("bad header: {e}")))?;
        header.model.validate()?;
        if header.vocab.len() != header.model.vocab_size {
            return Err(corrupt(format!(
                "vocabulary has {} tokens but the model expects {}",
                header.vocab.len(),
                header.model.vocab_size
            )));
        }
        // Check the data size before allocating anything proportional to it.
        let mut scalars: usize = 0;
        for t in &header.tensors {
            let n = t
                .rows
                .checked_mul(t.cols)
                .ok_or_else(|| corrupt("tensor size overflows"))?;
            scalars = scalars
                .checked_add(n)
                .ok_or_else(|| corrupt("tensor size overflows"))?;
        }
        let copies = 1
            + if header.adam_t.is_some() { 2 } else { 0 }
            + usize::from(header.has_best)
            + usize::from(header.has_frozen);
        let expected = scalars
            .checked_mul(copies)
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| corrupt("tensor size overflows"))?;
        let remaining = bytes.len() - r.pos;
        if remaining != expected {
            return Err(corrupt(format!(
                "data section has {remaining} bytes, expected {expected}"
            )));
        }
        let to_set = |tensors: Vec<Tensor>| {
            let mut ps = ParamSet::new();
            for (info, t) in header.tensors.iter().zip(tensors) {
                ps.add(info.name.clone(), t);
            }
            ps
        };
        let mut names: Vec<&str> = header.tensors.iter().map(|t| t.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(corrupt("duplicate tensor name"));
        }
        let params = to_set(r.tensors(&header.tensors)?);
        let adam = match header.adam_t {
            Some(t) => Some(AdamState {
                t,
                m: r.tensors(&header.tensors)?,
                v: r.tensors(&header.tensors)?,
            }),
            None => None,
        };
        let best = if header.has_best {
            Some(to_set(r.tensors(&header.tensors)?))
        } else {
            None
        };
        let frozen = if header.has_frozen {
            Some(to_set(r.tensors(&header.tensors)?))
        } else {
            None
        };
        let ck = Checkpoint {
            model: header.model,
            vocab: header.vocab,
            meta: header.meta,
            params,
            adam,
            best,
            frozen,
        };
        // Shape/name agreement with the configuration.
        Model::from_params(ck.model.clone(), ck.params.clone())?;
        if !ck.params.all_finite() {
            return Err(corrupt("non-finite parameter values"));
        }
        Ok(ck)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path, &self.encode())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }

    /// The model with the current parameters.
    pub fn model(&self) -> Result<Model> {
        Model::from_params(self.model.clone(), self.params.clone())
    }

    /// The best-scoring parameters if recorded, else the current ones.
    pub fn best_model(&self) -> Result<Model> {
        Model::from_params(
            self.model.clone(),
            self.best.clone().unwrap_or_else(|| self.params.clone()),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let vocab = Vocabulary::build(["a b c"]);
        let mut cfg = ModelConfig::new(vocab.len());
        cfg.d_model = 8;
        cfg.heads = 2;
        cfg.ffn_dim = 16;
        cfg.max_enc_len = 16;
        cfg.max_dec_len = 8;
        let model = Model::new(cfg, 3).unwrap();
        let mut ck = Checkpoint::from_model(&model, &vocab, serde_json::json!({"step": 7}));
        let mut adam = AdamState::new(&model.params);
        adam.t = 5;
        adam.m[0].data[0] = 0.25;
        ck.adam = Some(adam);
        ck.best = Some(model.params.clone());
        ck.frozen = Some(model.params.zeros_like());
        ck
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ck = sample();
        let bytes = ck.encode();
        assert_eq!(Checkpoint::decode(&bytes).unwrap(), ck);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        ck.save(&p).unwrap();
        assert_eq!(Checkpoint::load(&p).unwrap(), ck);
    }

    #[test]
    fn rejects_damage() {
        let bytes = sample().encode();
        assert!(Checkpoint::decode(&bytes[..bytes.len() - 1]).is_err());
        assert!(Checkpoint::decode(&bytes[..30]).is_err());
        assert!(Checkpoint::decode(b"").is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::decode(&bad).is_err());
        let mut bad = bytes.clone();
        bad[12..20].copy_from_slice(&u64::MAX.to_le_bytes());
        assert!(Checkpoint::decode(&bad).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(Checkpoint::decode(&extra).is_err());
    }
}
