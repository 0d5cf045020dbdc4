//! A small pre-norm transformer encoder-decoder. The encoder is shared between
//! retrieval (first-token representations) and state generation.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::graph::{AttnLayout, AttnSegment, Graph, Var};
use crate::model::params::ParamSet;
use crate::model::tensor::Tensor;
use crate::model::vocab::{BOS, EOS, PAD};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub ffn_dim: usize,
    pub max_enc_len: usize,
    pub max_dec_len: usize,
    /// Two extra projection layers applied to first-token vectors before
    /// retrieval scoring.
    #[serde(default)]
    pub retrieval_head: bool,
    /// Output logits reuse the token embedding matrix.
    #[serde(default)]
    pub tie_embeddings: bool,
}

impl ModelConfig {
    pub fn new(vocab_size: usize) -> Self {
        ModelConfig {
            vocab_size,
            d_model: 64,
            heads: 4,
            enc_layers: 2,
            dec_layers: 2,
            ffn_dim: 256,
            max_enc_len: 256,
            max_dec_len: 64,
            retrieval_head: false,
            tie_embeddings: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size <= EOS as usize
            || self.d_model == 0
            || self.heads == 0
            || self.ffn_dim == 0
            || self.max_enc_len == 0
            || self.max_dec_len == 0
        {
            return Err(Error::invalid("model dimensions must be positive"));
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::invalid(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        Ok(())
    }

    /// Number of parameter tensors the configuration lays out (`None` on
    /// overflow).
    pub fn num_tensors(&self) -> Option<usize> {
        let enc = self.enc_layers.checked_mul(12)?;
        let dec = self.dec_layers.checked_mul(18)?;
        let head = if self.retrieval_head { 4 } else { 0 };
        let out = if self.tie_embeddings { 0 } else { 1 };
        enc.checked_add(dec)?.checked_add(7 + out + head)
    }
}

#[derive(Clone, Debug, PartialEq)]
struct AttnIds {
    wq: usize,
    wk: usize,
    wv: usize,
    wo: usize,
}

#[derive(Clone, Debug, PartialEq)]
struct NormIds {
    g: usize,
    b: usize,
}

#[derive(Clone, Debug, PartialEq)]
struct FfnIds {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Clone, Debug, PartialEq)]
struct EncLayer {
    ln1: NormIds,
    attn: AttnIds,
    ln2: NormIds,
    ffn: FfnIds,
}

#[derive(Clone, Debug, PartialEq)]
struct DecLayer {
    ln1: NormIds,
    self_attn: AttnIds,
    ln2: NormIds,
    cross_attn: AttnIds,
    ln3: NormIds,
    ffn: FfnIds,
}

#[derive(Clone, Debug, PartialEq)]
struct ParamIds {
    tok_emb: usize,
    enc_pos: usize,
    dec_pos: usize,
    enc: Vec<EncLayer>,
    enc_ln: NormIds,
    dec: Vec<DecLayer>,
    dec_ln: NormIds,
    out_proj: Option<usize>,
    retrieval: Option<FfnIds>,
}

/// How a tensor is initialised.
#[derive(Clone, Copy)]
enum Init {
    Normal(f64),
    Ones,
    Zeros,
}

struct Builder {
    shapes: Vec<(String, usize, usize, Init)>,
}

impl Builder {
    fn add(&mut self, name: String, rows: usize, cols: usize, init: Init) -> usize {
        self.shapes.push((name, rows, cols, init));
        self.shapes.len() - 1
    }

    fn norm(&mut self, prefix: &str, d: usize) -> NormIds {
        NormIds {
            g: self.add(format!("{prefix}.g"), 1, d, Init::Ones),
            b: self.add(format!("{prefix}.b"), 1, d, Init::Zeros),
        }
    }

    fn attn(&mut self, prefix: &str, d: usize, out_scale: f64) -> AttnIds {
        let std = 1.0 / (d as f64).sqrt();
        AttnIds {
            wq: self.add(format!("{prefix}.wq"), d, d, Init::Normal(std)),
            wk: self.add(format!("{prefix}.wk"), d, d, Init::Normal(std)),
            wv: self.add(format!("{prefix}.wv"), d, d, Init::Normal(std)),
            wo: self.add(format!("{prefix}.wo"), d, d, Init::Normal(std * out_scale)),
        }
    }

    fn ffn(&mut self, prefix: &str, d: usize, hidden: usize, out: usize, out_scale: f64) -> FfnIds {
        FfnIds {
            w1: self.add(
                format!("{prefix}.w1"),
                d,
                hidden,
                Init::Normal(1.0 / (d as f64).sqrt()),
            ),
            b1: self.add(format!("{prefix}.b1"), 1, hidden, Init::Zeros),
            w2: self.add(
                format!("{prefix}.w2"),
                hidden,
                out,
                Init::Normal(out_scale / (hidden as f64).sqrt()),
            ),
            b2: self.add(format!("{prefix}.b2"), 1, out, Init::Zeros),
        }
    }
}

fn layout_params(config: &ModelConfig) -> (ParamIds, Builder) {
    let d = config.d_model;
    let mut b = Builder { shapes: Vec::new() };
    let tok_emb = b.add("tok_emb".into(), config.vocab_size, d, Init::Normal(0.1));
    let enc_pos = b.add("enc_pos".into(), config.max_enc_len, d, Init::Normal(0.1));
    let dec_pos = b.add("dec_pos".into(), config.max_dec_len, d, Init::Normal(0.1));
    let enc_scale = 1.0 / ((2 * config.enc_layers.max(1)) as f64).sqrt();
    let dec_scale = 1.0 / ((3 * config.dec_layers.max(1)) as f64).sqrt();
    let enc = (0..config.enc_layers)
        .map(|l| EncLayer {
            ln1: b.norm(&format!("enc.{l}.ln1"), d),
            attn: b.attn(&format!("enc.{l}.attn"), d, enc_scale),
            ln2: b.norm(&format!("enc.{l}.ln2"), d),
            ffn: b.ffn(&format!("enc.{l}.ffn"), d, config.ffn_dim, d, enc_scale),
        })
        .collect();
    let enc_ln = b.norm("enc.ln", d);
    let dec = (0..config.dec_layers)
        .map(|l| DecLayer {
            ln1: b.norm(&format!("dec.{l}.ln1"), d),
            self_attn: b.attn(&format!("dec.{l}.self"), d, dec_scale),
            ln2: b.norm(&format!("dec.{l}.ln2"), d),
            cross_attn: b.attn(&format!("dec.{l}.cross"), d, dec_scale),
            ln3: b.norm(&format!("dec.{l}.ln3"), d),
            ffn: b.ffn(&format!("dec.{l}.ffn"), d, config.ffn_dim, d, dec_scale),
        })
        .collect();
    let dec_ln = b.norm("dec.ln", d);
    let out_proj = (!config.tie_embeddings).then(|| {
        b.add(
            "out_proj".into(),
            d,
            config.vocab_size,
            Init::Normal(1.0 / (d as f64).sqrt()),
        )
    });
    let retrieval = config.retrieval_head.then(|| b.ffn("ret", d, d, d, 1.0));
    (
        ParamIds {
            tok_emb,
            enc_pos,
            dec_pos,
            enc,
            enc_ln,
            dec,
            dec_ln,
            out_proj,
            retrieval,
        },
        b,
    )
}

/// Final-layer encoder states for one sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedSequence {
    pub states: Tensor,
}

impl EncodedSequence {
    pub fn len(&self) -> usize {
        self.states.rows
    }

    pub fn is_empty(&self) -> bool {
        self.states.rows == 0
    }

    pub fn dim(&self) -> usize {
        self.states.cols
    }

    /// The vector at position 0 (the BOS token).
    pub fn first_token(&self) -> &[f64] {
        self.states.row(0)
    }
}

/// One sequence inside a packed batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
    /// Tokens before the first PAD.
    pub valid: usize,
}

/// Sequences packed row-wise into one matrix.
#[derive(Clone, Debug)]
pub struct Packed {
    pub states: Var,
    pub segments: Vec<Segment>,
}

impl Packed {
    pub fn first_rows(&self) -> Vec<usize> {
        self.segments.iter().map(|s| s.start).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamSet,
    ids: ParamIds,
}

fn self_layout(segments: &[Segment], causal: bool) -> Arc<AttnLayout> {
    Arc::new(AttnLayout {
        segments: segments
            .iter()
            .map(|s| AttnSegment {
                q_start: s.start,
                q_len: s.len,
                k_start: s.start,
                k_len: s.len,
                k_valid: s.valid,
            })
            .collect(),
        causal,
    })
}

fn cross_layout(queries: &[Segment], keys: &[Segment]) -> Arc<AttnLayout> {
    Arc::new(AttnLayout {
        segments: queries
            .iter()
            .zip(keys)
            .map(|(q, k)| AttnSegment {
                q_start: q.start,
                q_len: q.len,
                k_start: k.start,
                k_len: k.len,
                k_valid: k.valid,
            })
            .collect(),
        causal: false,
    })
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}

impl Model {
    /// Randomly initialised model.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (ids, builder) = layout_params(&config);
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (name, rows, cols, init) in builder.shapes {
            let mut t = Tensor::zeros(rows, cols);
            match init {
                Init::Normal(std) => {
                    let dist = Normal::new(0.0, std).expect("positive std");
                    t.data.iter_mut().for_each(|x| *x = dist.sample(&mut rng));
                }
                Init::Ones => t.data.fill(1.0),
                Init::Zeros => t.data.fill(0.0),
            }
            params.add(name, t);
        }
        Ok(Model {
            config,
            params,
            ids,
        })
    }

    /// Wraps existing parameters, checking names and shapes against `config`.
    pub fn from_params(config: ModelConfig, params: ParamSet) -> Result<Self> {
        config.validate()?;
        let expected = config.num_tensors();
        if expected != Some(params.len()) {
            return Err(Error::Checkpoint(format!(
                "configuration does not match the {} parameter tensors found",
                params.len()
            )));
        }
        let (ids, builder) = layout_params(&config);
        for (i, (name, rows, cols, _)) in builder.shapes.iter().enumerate() {
            let t = params.get(i);
            if params.name(i) != name || t.rows != *rows || t.cols != *cols {
                return Err(Error::Checkpoint(format!(
                    "parameter {i}: expected {name} {rows}x{cols}, found {} {}x{}",
                    params.name(i),
                    t.rows,
                    t.cols
                )));
            }
        }
        Ok(Model {
            config,
            params,
            ids,
        })
    }

    /// Parameter ids of the token embedding and encoder stack, i.e. the
    /// parameters read by both retrieval and generation.
    pub fn encoder_param_ids(&self) -> Vec<usize> {
        let mut ids = vec![self.ids.tok_emb, self.ids.enc_pos];
        for l in &self.ids.enc {
            ids.extend([l.ln1.g, l.ln1.b, l.attn.wq, l.attn.wk, l.attn.wv, l.attn.wo]);
            ids.extend([l.ln2.g, l.ln2.b, l.ffn.w1, l.ffn.b1, l.ffn.w2, l.ffn.b2]);
        }
        ids.extend([self.ids.enc_ln.g, self.ids.enc_ln.b]);
        ids
    }

    /// Parameter ids used only by the retrieval head (empty when shared).
    pub fn retrieval_head_ids(&self) -> Vec<usize> {
        match &self.ids.retrieval {
            Some(f) => vec![f.w1, f.b1, f.w2, f.b2],
            None => Vec::new(),
        }
    }

    /// The separate output projection, absent with tied embeddings.
    pub fn out_proj_id(&self) -> Option<usize> {
        self.ids.out_proj
    }

    fn check_tokens(&self, seq: &[u32], max: usize) -> Result<()> {
        if seq.is_empty() {
            return Err(Error::invalid("empty token sequence"));
        }
        if seq.len() > max {
            return Err(Error::TooLong {
                len: seq.len(),
                max,
            });
        }
        if let Some(&t) = seq.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(Error::invalid(format!("token id {t} outside vocabulary")));
        }
        Ok(())
    }

    fn pack(seqs: &[&[u32]]) -> (Vec<usize>, Vec<usize>, Vec<Segment>) {
        let mut ids = Vec::new();
        let mut positions = Vec::new();
        let mut segments = Vec::with_capacity(seqs.len());
        for seq in seqs {
            let start = ids.len();
            let valid = seq.iter().position(|&t| t == PAD).unwrap_or(seq.len());
            ids.extend(seq.iter().map(|&t| t as usize));
            positions.extend(0..seq.len());
            segments.push(Segment {
                start,
                len: seq.len(),
                valid,
            });
        }
        (ids, positions, segments)
    }

    fn attention_block(
        &self,
        g: &mut Graph<'_>,
        x: Var,
        memory: Option<Var>,
        ids: &AttnIds,
        layout: Arc<AttnLayout>,
    ) -> Var {
        let wq = g.param(ids.wq);
        let wk = g.param(ids.wk);
        let wv = g.param(ids.wv);
        let wo = g.param(ids.wo);
        let kv_src = memory.unwrap_or(x);
        let q = g.matmul(x, wq);
        let k = g.matmul(kv_src, wk);
        let v = g.matmul(kv_src, wv);
        let a = g.attention(q, k, v, self.config.heads, layout);
        g.matmul(a, wo)
    }

    fn norm(&self, g: &mut Graph<'_>, x: Var, ids: &NormIds) -> Var {
        let gain = g.param(ids.g);
        let bias = g.param(ids.b);
        g.layer_norm(x, gain, bias)
    }

    fn ffn(&self, g: &mut Graph<'_>, x: Var, ids: &FfnIds) -> Var {
        let w1 = g.param(ids.w1);
        let b1 = g.param(ids.b1);
        let w2 = g.param(ids.w2);
        let b2 = g.param(ids.b2);
        let h = g.matmul(x, w1);
        let h = g.add_row(h, b1);
        let h = g.relu(h);
        let o = g.matmul(h, w2);
        g.add_row(o, b2)
    }

    fn embed(
        &self,
        g: &mut Graph<'_>,
        ids: Vec<usize>,
        positions: Vec<usize>,
        pos_table: usize,
    ) -> Var {
        let tok = g.param(self.ids.tok_emb);
        let pos = g.param(pos_table);
        let e = g.gather(tok, ids);
        let p = g.gather(pos, positions);
        g.add(e, p)
    }

    /// Encodes several BOS-initial sequences at once.
    pub fn encode_packed(&self, g: &mut Graph<'_>, seqs: &[&[u32]]) -> Result<Packed> {
        for seq in seqs {
            self.check_tokens(seq, self.config.max_enc_len)?;
            if seq[0] != BOS {
                return Err(Error::invalid("encoder input must begin with BOS"));
            }
        }
        let (ids, positions, segments) = Self::pack(seqs);
        let layout = self_layout(&segments, false);
        let mut x = self.embed(g, ids, positions, self.ids.enc_pos);
        for layer in &self.ids.enc {
            let h = self.norm(g, x, &layer.ln1);
            let a = self.attention_block(g, h, None, &layer.attn, layout.clone());
            x = g.add(x, a);
            let h = self.norm(g, x, &layer.ln2);
            let f = self.ffn(g, h, &layer.ffn);
            x = g.add(x, f);
        }
        let states = self.norm(g, x, &self.ids.enc_ln);
        Ok(Packed { states, segments })
    }

    /// Decoder logits for packed decoder inputs attending to `memory`.
    pub fn decode_packed(
        &self,
        g: &mut Graph<'_>,
        memory: &Packed,
        inputs: &[&[u32]],
    ) -> Result<Packed> {
        if inputs.len() != memory.segments.len() {
            return Err(Error::invalid("one decoder input per memory sequence"));
        }
        for seq in inputs {
            self.check_tokens(seq, self.config.max_dec_len)?;
        }
        let (ids, positions, segments) = Self::pack(inputs);
        let self_attn = self_layout(&segments, true);
        let cross = cross_layout(&segments, &memory.segments);
        let mut x = self.embed(g, ids, positions, self.ids.dec_pos);
        for layer in &self.ids.dec {
            let h = self.norm(g, x, &layer.ln1);
            let a = self.attention_block(g, h, None, &layer.self_attn, self_attn.clone());
            x = g.add(x, a);
            let h = self.norm(g, x, &layer.ln2);
            let c =
                self.attention_block(g, h, Some(memory.states), &layer.cross_attn, cross.clone());
            x = g.add(x, c);
            let h = self.norm(g, x, &layer.ln3);
            let f = self.ffn(g, h, &layer.ffn);
            x = g.add(x, f);
        }
        let h = self.norm(g, x, &self.ids.dec_ln);
        let logits = match self.ids.out_proj {
            Some(id) => {
                let w = g.param(id);
                g.matmul(h, w)
            }
            None => {
                let emb = g.param(self.ids.tok_emb);
                g.matmul_bt(h, emb)
            }
        };
        Ok(Packed {
            states: logits,
            segments,
        })
    }

    /// Teacher-forced cross-entropy. Each target must end with EOS; example
    /// `i` contributes `weights[i]` times its mean token NLL.
    pub fn decode_loss_packed(
        &self,
        g: &mut Graph<'_>,
        memory: &Packed,
        targets: &[&[u32]],
        weights: &[f64],
    ) -> Result<Var> {
        assert_eq!(targets.len(), weights.len());
        let mut inputs: Vec<Vec<u32>> = Vec::with_capacity(targets.len());
        let mut flat_targets = Vec::new();
        let mut row_weights = Vec::new();
        for (t, &w) in targets.iter().zip(weights) {
            if t.is_empty() {
                return Err(Error::invalid("empty decoder target"));
            }
            if *t.last().expect("non-empty") != EOS {
                return Err(Error::invalid("decoder target must end with EOS"));
            }
            let mut inp = Vec::with_capacity(t.len());
            inp.push(BOS);
            inp.extend_from_slice(&t[..t.len() - 1]);
            inputs.push(inp);
            flat_targets.extend(t.iter().map(|&x| x as usize));
            row_weights.extend(std::iter::repeat_n(w / t.len() as f64, t.len()));
        }
        let refs: Vec<&[u32]> = inputs.iter().map(Vec::as_slice).collect();
        let logits = self.decode_packed(g, memory, &refs)?;
        Ok(g.cross_entropy(logits.states, flat_targets, row_weights))
    }

    /// First-token vectors (one row per sequence), passed through the
    /// retrieval head when the model has one.
    pub fn retrieval_vectors(&self, g: &mut Graph<'_>, encoded: &Packed) -> Var {
        let first = g.gather(encoded.states, encoded.first_rows());
        match &self.ids.retrieval {
            Some(head) => self.ffn(g, first, head),
            None => first,
        }
    }

    /// Encodes one BOS-initial sequence.
    pub fn encode(&self, tokens: &[u32]) -> Result<EncodedSequence> {
        let mut g = Graph::new(&self.params);
        let packed = self.encode_packed(&mut g, &[tokens])?;
        g.check()?;
        Ok(EncodedSequence {
            states: g.value(packed.states).clone(),
        })
    }

    /// Retrieval vectors for many sequences, one row each (no gradients).
    pub fn retrieval_matrix(&self, seqs: &[&[u32]]) -> Result<Tensor> {
        let mut g = Graph::new(&self.params);
        let packed = self.encode_packed(&mut g, seqs)?;
        let r = self.retrieval_vectors(&mut g, &packed);
        g.check()?;
        Ok(g.value(r).clone())
    }

    fn memory_from(g: &mut Graph<'_>, encoded: &[&EncodedSequence]) -> Packed {
        let d = encoded.first().map(|e| e.dim()).unwrap_or(0);
        let mut data = Vec::new();
        let mut segments = Vec::new();
        let mut start = 0;
        for e in encoded {
            data.extend_from_slice(&e.states.data);
            segments.push(Segment {
                start,
                len: e.len(),
                valid: e.len(),
            });
            start += e.len();
        }
        let states = g.input(Tensor::new(start, d, data));
        Packed { states, segments }
    }

    /// Mean token NLL of `target` given an encoded input.
    pub fn decode_loss(&self, encoded: &EncodedSequence, target: &[u32]) -> Result<f64> {
        let mut g = Graph::new(&self.params);
        let memory = Self::memory_from(&mut g, &[encoded]);
        let loss = self.decode_loss_packed(&mut g, &memory, &[target], &[1.0])?;
        g.check()?;
        Ok(g.value(loss).item())
    }

    /// Greedy decoding; the returned tokens include EOS when produced.
    pub fn generate(&self, encoded: &EncodedSequence, max_len: usize) -> Result<Vec<u32>> {
        Ok(self
            .generate_batch(&[encoded], max_len)?
            .pop()
            .expect("one output"))
    }

    /// Greedy decoding for several inputs at once.
    pub fn generate_batch(
        &self,
        encoded: &[&EncodedSequence],
        max_len: usize,
    ) -> Result<Vec<Vec<u32>>> {
        let max_len = max_len.min(self.config.max_dec_len);
        let mut outputs: Vec<Vec<u32>> = vec![Vec::new(); encoded.len()];
        let mut active: Vec<usize> = (0..encoded.len()).collect();
        if encoded.is_empty() {
            return Ok(outputs);
        }
        let mut g0 = Graph::new(&self.params);
        let full = Self::memory_from(&mut g0, encoded);
        let memory_tensor = g0.value(full.states).clone();
        drop(g0);
        for _ in 0..max_len {
            if active.is_empty() {
                break;
            }
            let mut g = Graph::new(&self.params);
            let states = g.input(memory_tensor.clone());
            let memory = Packed {
                states,
                segments: active.iter().map(|&i| full.segments[i]).collect(),
            };
            let inputs: Vec<Vec<u32>> = active
                .iter()
                .map(|&i| {
                    let mut v = vec![BOS];
                    v.extend_from_slice(&outputs[i]);
                    v
                })
                .collect();
            let refs: Vec<&[u32]> = inputs.iter().map(Vec::as_slice).collect();
            let logits = self.decode_packed(&mut g, &memory, &refs)?;
            g.check()?;
            let lv = g.value(logits.states);
            let mut still = Vec::with_capacity(active.len());
            for (seg, &i) in logits.segments.iter().zip(&active) {
                let next = argmax(lv.row(seg.start + seg.len - 1)) as u32;
                outputs[i].push(next);
                if next != EOS {
                    still.push(i);
                }
            }
            active = still;
        }
        Ok(outputs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Model {
        let mut cfg = ModelConfig::new(20);
        cfg.d_model = 8;
        cfg.heads = 2;
        cfg.ffn_dim = 16;
        cfg.max_enc_len = 16;
        cfg.max_dec_len = 8;
        Model::new(cfg, 3).unwrap()
    }

    #[test]
    fn encode_shape_and_purity() {
        let m = tiny();
        let a = m.encode(&[BOS, 7, 8, 9]).unwrap();
        assert_eq!(a.states.shape(), (4, 8));
        assert_eq!(a, m.encode(&[BOS, 7, 8, 9]).unwrap());
    }

    #[test]
    fn encode_rejects_bad_input() {
        let m = tiny();
        assert!(matches!(
            m.encode(&[BOS; 17]),
            Err(Error::TooLong { len: 17, max: 16 })
        ));
        assert!(m.encode(&[7, 8]).is_err());
        assert!(m.encode(&[]).is_err());
        assert!(m.encode(&[BOS, 99]).is_err());
    }

    #[test]
    fn permutation_changes_first_token() {
        let m = tiny();
        let a = m.encode(&[BOS, 7, 8, 9]).unwrap();
        let b = m.encode(&[BOS, 8, 7, 9]).unwrap();
        assert_ne!(a.first_token(), b.first_token());
    }

    #[test]
    fn padding_masks_later_tokens() {
        let m = tiny();
        let a = m.encode(&[BOS, 7, 8, PAD, 9, 10]).unwrap();
        let b = m.encode(&[BOS, 7, 8, PAD, 11, 12]).unwrap();
        for r in 0..3 {
            assert_eq!(a.states.row(r), b.states.row(r));
        }
    }

    #[test]
    fn packed_matches_single() {
        let m = tiny();
        let mut g = Graph::new(&m.params);
        let seqs: [&[u32]; 2] = [&[BOS, 7, 8], &[BOS, 9, 10, 11]];
        let packed = m.encode_packed(&mut g, &seqs).unwrap();
        let v = g.value(packed.states);
        let single = m.encode(seqs[1]).unwrap();
        for r in 0..4 {
            for (x, y) in v.row(3 + r).iter().zip(single.states.row(r)) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zeroed_projection_gives_uniform_loss() {
        let mut m = tiny();
        let id = m.params.find("dec.ln.g").unwrap();
        m.params.get_mut(id).data.fill(0.0);
        let enc = m.encode(&[BOS, 7, 8]).unwrap();
        let loss = m.decode_loss(&enc, &[9, 10, EOS]).unwrap();
        assert!((loss - (20f64).ln()).abs() < 1e-12);
        assert!(m.decode_loss(&enc, &[]).is_err());
        assert!(m.decode_loss(&enc, &[9]).is_err());
    }

    #[test]
    fn generation_is_bounded_and_deterministic() {
        let m = tiny();
        let enc = m.encode(&[BOS, 7, 8]).unwrap();
        assert_eq!(m.generate(&enc, 1).unwrap().len(), 1);
        let a = m.generate(&enc, 6).unwrap();
        assert!(!a.is_empty() && a.len() <= 6);
        assert_eq!(a, m.generate(&enc, 6).unwrap());
    }

    #[test]
    fn from_params_checks_layout() {
        let m = tiny();
        let again = Model::from_params(m.config.clone(), m.params.clone()).unwrap();
        assert_eq!(again, m);
        let mut other = m.config.clone();
        other.retrieval_head = true;
        assert!(Model::from_params(other, m.params.clone()).is_err());
    }
}
