//! Training loops: joint retrieval + DST, the retrieval-then-DST ablation and
//! the knowledge-free seq2seq baseline.

use std::collections::BTreeSet;
use std::path::PathBuf;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{
    few_shot_sample, linearize_state, user_turns, Dialog, DialogContext, DialogState, Ontology,
    OrderPolicy,
};
use crate::error::{Error, Result};
use crate::eval::{evaluate_examples, EvalOptions};
use crate::integration::{integrate, oracle_integrate, Arrangement};
use crate::knowledge::{
    gold_labels, render_context, slot_f1, KnowledgeBase, KnowledgeKind, Payload,
};
use crate::model::optim::clip_global_norm;
use crate::model::vocab::EOS;
use crate::model::{
    adam_step, AdamConfig, AdamState, Checkpoint, Graph, Model, ModelConfig, ParamSet, Tensor,
    Vocabulary,
};
use crate::retrieval::{rank_scores, with_bos, KnowledgeIndex, RetrievalResult};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    Joint,
    /// Retrieval loss only for the first `retrieval_steps` steps, then DST
    /// loss only with retrieval scored by the frozen phase-one parameters.
    RetrievalThenDst {
        retrieval_steps: usize,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadMode {
    #[default]
    Shared,
    /// Two extra projection layers on top of the encoder for retrieval.
    SeparateHead,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntegrationMode {
    #[default]
    Ordered,
    Shuffled,
    /// Gold slot-value pairs at a controlled recall, no model scoring.
    Oracle,
}

/// Architecture knobs of [`ModelConfig`] that do not depend on the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelDims {
    pub d_model: usize,
    pub heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub ffn_dim: usize,
    pub max_enc_len: usize,
    pub max_dec_len: usize,
    pub tie_embeddings: bool,
}

impl Default for ModelDims {
    fn default() -> Self {
        let c = ModelConfig::new(0);
        ModelDims {
            d_model: c.d_model,
            heads: c.heads,
            enc_layers: c.enc_layers,
            dec_layers: c.dec_layers,
            ffn_dim: c.ffn_dim,
            max_enc_len: c.max_enc_len,
            max_dec_len: c.max_dec_len,
            tie_embeddings: c.tie_embeddings,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub retrieval_weight: f64,
    pub dst_weight: f64,
    pub schedule: Schedule,
    pub head_mode: HeadMode,
    /// `None` trains the seq2seq baseline (no knowledge).
    pub kb_kind: Option<KnowledgeKind>,
    /// Defaults to the knowledge kind's standard width.
    pub top_k: Option<usize>,
    pub batch_size: usize,
    pub lr: f64,
    pub steps: usize,
    pub seed: u64,
    /// Trains on a seeded subsample of this share of the training dialogs.
    pub few_shot_fraction: Option<f64>,
    pub integration: IntegrationMode,
    /// Recall targets sampled per example in oracle mode.
    pub oracle_recalls: Vec<f64>,
    /// Development evaluation period; 0 disables it.
    pub eval_every: usize,
    /// Sampled negatives per example for training-example knowledge.
    pub negatives: usize,
    /// Steps between re-encodings of the training-example index.
    pub index_refresh: usize,
    pub clip_norm: Option<f64>,
    pub order: OrderPolicy,
    pub model: ModelDims,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            retrieval_weight: 0.1,
            dst_weight: 1.0,
            schedule: Schedule::Joint,
            head_mode: HeadMode::Shared,
            kb_kind: Some(KnowledgeKind::TypeValue),
            top_k: None,
            batch_size: 32,
            lr: 1e-4,
            steps: 2000,
            seed: 0,
            few_shot_fraction: None,
            integration: IntegrationMode::Ordered,
            oracle_recalls: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            eval_every: 200,
            negatives: 16,
            index_refresh: 50,
            clip_norm: Some(1.0),
            order: OrderPolicy::Annotation,
            model: ModelDims::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::invalid(m));
        if !(self.retrieval_weight >= 0.0 && self.retrieval_weight.is_finite())
            || !(self.dst_weight >= 0.0 && self.dst_weight.is_finite())
        {
            return bad("loss weights must be finite and non-negative".into());
        }
        if self.steps == 0 {
            return bad("steps must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate {} must be positive", self.lr));
        }
        if self.top_k == Some(0) {
            return bad("top_k must be at least 1".into());
        }
        if let Some(f) = self.few_shot_fraction {
            if !(f > 0.0 && f <= 1.0) {
                return bad(format!("few-shot fraction {f} outside (0, 1]"));
            }
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return bad("clip_norm must be positive".into());
            }
        }
        if self.index_refresh == 0 {
            return bad("index_refresh must be at least 1".into());
        }
        if self.integration == IntegrationMode::Oracle {
            if self.kb_kind != Some(KnowledgeKind::TypeValue) {
                return bad("oracle integration needs type_value knowledge".into());
            }
            if self.oracle_recalls.is_empty()
                || self.oracle_recalls.iter().any(|r| !(0.0..=1.0).contains(r))
            {
                return bad("oracle_recalls must be non-empty values in [0, 1]".into());
            }
        }
        if self.kb_kind.is_none() && self.integration != IntegrationMode::Ordered {
            return bad("the seq2seq baseline has nothing to shuffle".into());
        }
        if matches!(self.schedule, Schedule::RetrievalThenDst { .. }) {
            if self.kb_kind.is_none() {
                return bad("the sequential schedule needs a knowledge base".into());
            }
            if self.integration == IntegrationMode::Oracle {
                return bad("oracle integration does not train a retriever".into());
            }
        }
        self.model_config(16).validate()
    }

    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        let d = &self.model;
        ModelConfig {
            vocab_size,
            d_model: d.d_model,
            heads: d.heads,
            enc_layers: d.enc_layers,
            dec_layers: d.dec_layers,
            ffn_dim: d.ffn_dim,
            max_enc_len: d.max_enc_len,
            max_dec_len: d.max_dec_len,
            retrieval_head: self.head_mode == HeadMode::SeparateHead,
            tie_embeddings: d.tie_embeddings,
        }
    }

    /// Retrieval width for `kb`, clamped to its size.
    pub fn k_for(&self, kb: &KnowledgeBase) -> usize {
        self.top_k.unwrap_or(kb.kind.default_top_k()).min(kb.len())
    }
}

/// SplitMix64 finaliser over `(seed, stream, index)`.
pub fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED69));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const STREAM_EPOCH: u64 = 1;
const STREAM_STEP: u64 = 2;
pub(crate) const STREAM_EVAL: u64 = 3;

/// One user turn ready for the model.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub dialog_id: String,
    pub turn: usize,
    pub context: DialogContext,
    /// Rendered history, used to recognise a turn's own training-example
    /// element.
    pub context_text: String,
    pub gold: DialogState,
    /// Linearized gold state followed by EOS.
    pub target: Vec<u32>,
}

/// Context budget that leaves room for BOS in the encoder.
pub fn context_budget(config: &ModelConfig) -> usize {
    config.max_enc_len - 1
}

pub fn prepare_examples(
    dialogs: &[Dialog],
    vocab: &Vocabulary,
    order: OrderPolicy,
    model: &ModelConfig,
) -> Result<Vec<Example>> {
    user_turns(dialogs)
        .into_iter()
        .map(|t| {
            let dialog = &dialogs[t.dialog];
            let gold = dialog.states[t.turn].clone();
            let mut target = vocab.encode(&linearize_state(&gold, order));
            if target.len() + 1 > model.max_dec_len {
                return Err(Error::TooLong {
                    len: target.len() + 1,
                    max: model.max_dec_len,
                });
            }
            target.push(EOS);
            Ok(Example {
                dialog_id: dialog.id.clone(),
                turn: t.turn,
                context: DialogContext::build(dialog, t.turn, vocab, context_budget(model))?,
                context_text: render_context(dialog, t.turn),
                gold,
                target,
            })
        })
        .collect()
}

/// A knowledge base with its tokenization.
#[derive(Clone, Debug)]
pub struct KnowledgeSetup {
    pub kb: KnowledgeBase,
    pub tokens: Vec<Vec<u32>>,
    /// `tokens` with BOS prepended, ready for the encoder.
    pub inputs: Vec<Vec<u32>>,
}

impl KnowledgeSetup {
    pub fn new(kb: KnowledgeBase, vocab: &Vocabulary) -> Self {
        let tokens = kb.tokenize(vocab);
        let inputs = tokens.iter().map(|t| with_bos(t)).collect();
        KnowledgeSetup { kb, tokens, inputs }
    }

    /// Element whose text is this example's own context, if any.
    pub fn own_element(&self, ex: &Example) -> Option<usize> {
        if self.kb.kind != KnowledgeKind::TrainingExample {
            return None;
        }
        self.kb.elements.iter().position(|e| match &e.payload {
            Payload::Example { context, .. } => *context == ex.context_text,
            _ => false,
        })
    }

    /// Gold element ids of an example; a turn's own training-example element
    /// is never its gold.
    pub fn gold_ids(&self, ex: &Example) -> Result<BTreeSet<usize>> {
        match self.kb.kind {
            KnowledgeKind::TrainingExample => {
                let own = self.own_element(ex);
                let slots = ex.gold.slot_names();
                let mut best: Option<(usize, f64)> = None;
                for e in &self.kb.elements {
                    if Some(e.id) == own {
                        continue;
                    }
                    let Payload::Example { slots: other, .. } = &e.payload else {
                        return Err(Error::invalid("element payload is not a training example"));
                    };
                    let f1 = slot_f1(&slots, other);
                    if best.is_none_or(|(_, b)| f1 > b) {
                        best = Some((e.id, f1));
                    }
                }
                Ok(best.map(|(id, _)| id).into_iter().collect())
            }
            _ => self.kb.gold_ids(&ex.gold),
        }
    }

    /// Ranks element scores, never returning an example's own element.
    pub fn rank(&self, mut scores: Vec<f64>, ex: &Example, k: usize) -> RetrievalResult {
        let mut k = k;
        if let Some(own) = self.own_element(ex) {
            scores[own] = f64::NEG_INFINITY;
            k = k.min(scores.len() - 1);
        }
        rank_scores(&scores, k)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LogRecord {
    Step {
        step: usize,
        l_ret: Option<f64>,
        l_dst: Option<f64>,
        l_total: f64,
    },
    Dev {
        step: usize,
        dev_jga: f64,
        dev_recall: Option<f64>,
        dev_precision: Option<f64>,
    },
    Phase {
        step: usize,
        phase: String,
    },
}

impl LogRecord {
    pub fn to_jsonl(records: &[LogRecord]) -> String {
        records
            .iter()
            .map(|r| serde_json::to_string(r).expect("log record serializes") + "\n")
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Phase {
    Joint,
    RetrievalOnly,
    DstOnly,
}

/// State restored from and stored in checkpoint metadata.
#[derive(Clone, Debug, Serialize, Deserialize)]
struct Meta {
    config: TrainConfig,
    step: usize,
    best_step: Option<usize>,
    best_dev_jga: Option<f64>,
    log: Vec<LogRecord>,
    example_index: Option<Tensor>,
}

/// One step's loss terms and gradients, in parameter order.
#[derive(Clone, Debug, PartialEq)]
pub struct Objective {
    pub gradients: Vec<Tensor>,
    pub l_ret: Option<f64>,
    pub l_dst: Option<f64>,
    pub l_total: f64,
}

pub struct TrainOutcome {
    /// Parameters with the best development JGA (the final ones without a
    /// development set).
    pub model: Model,
    pub final_model: Model,
    pub log: Vec<LogRecord>,
    pub best_step: Option<usize>,
}

/// Owns the parameters and optimizer state of one training run.
pub struct Trainer {
    pub config: TrainConfig,
    pub vocab: Vocabulary,
    pub ontology: Ontology,
    model: Model,
    adam: AdamState,
    step: usize,
    log: Vec<LogRecord>,
    best: Option<(usize, f64, ParamSet)>,
    train: Vec<Example>,
    dev: Vec<Example>,
    knowledge: Option<KnowledgeSetup>,
    /// Retriever snapshot for the DST phase of the sequential schedule.
    frozen: Option<Model>,
    frozen_index: Option<KnowledgeIndex>,
    example_index: Option<Tensor>,
    epoch_cache: Option<(usize, Vec<usize>)>,
    checkpoint_dir: Option<PathBuf>,
}

impl Trainer {
    pub fn new(
        config: TrainConfig,
        vocab: Vocabulary,
        ontology: Ontology,
        train: &[Dialog],
        dev: &[Dialog],
        kb: Option<KnowledgeBase>,
    ) -> Result<Self> {
        config.validate()?;
        let model = Model::new(config.model_config(vocab.len()), config.seed)?;
        Self::assemble(config, vocab, ontology, model, None, train, dev, kb)
    }

    /// Continues a run saved by [`Trainer::checkpoint`].
    pub fn resume(
        checkpoint: &Checkpoint,
        ontology: Ontology,
        train: &[Dialog],
        dev: &[Dialog],
        kb: Option<KnowledgeBase>,
    ) -> Result<Self> {
        let meta: Meta = serde_json::from_value(checkpoint.meta.clone())
            .map_err(|e| Error::Checkpoint(format!("missing training state: {e}")))?;
        let model = checkpoint.model()?;
        let mut t = Self::assemble(
            meta.config,
            checkpoint.vocab.clone(),
            ontology,
            model,
            checkpoint.adam.clone(),
            train,
            dev,
            kb,
        )?;
        t.step = meta.step;
        t.log = meta.log;
        t.example_index = meta.example_index;
        if let (Some(step), Some(jga), Some(params)) =
            (meta.best_step, meta.best_dev_jga, &checkpoint.best)
        {
            t.best = Some((step, jga, params.clone()));
        }
        if let Some(frozen) = &checkpoint.frozen {
            t.frozen = Some(Model::from_params(
                checkpoint.model.clone(),
                frozen.clone(),
            )?);
        }
        Ok(t)
    }

    #[allow(clippy::too_many_arguments)]
    fn assemble(
        config: TrainConfig,
        vocab: Vocabulary,
        ontology: Ontology,
        model: Model,
        adam: Option<AdamState>,
        train: &[Dialog],
        dev: &[Dialog],
        kb: Option<KnowledgeBase>,
    ) -> Result<Self> {
        config.validate()?;
        let knowledge = match (config.kb_kind, kb) {
            (None, None) => None,
            (Some(kind), Some(kb)) if kb.kind == kind => {
                if kb.is_empty() {
                    return Err(Error::invalid("knowledge base is empty"));
                }
                Some(KnowledgeSetup::new(kb, &vocab))
            }
            (Some(kind), Some(kb)) => {
                return Err(Error::invalid(format!(
                    "configured for {kind:?} knowledge but got a {:?} base",
                    kb.kind
                )))
            }
            (Some(_), None) => return Err(Error::invalid("configuration needs a knowledge base")),
            (None, Some(_)) => {
                return Err(Error::invalid(
                    "the seq2seq baseline takes no knowledge base",
                ))
            }
        };
        let sampled;
        let train = match config.few_shot_fraction {
            Some(f) if f < 1.0 => {
                sampled = few_shot_sample(train, f, config.seed)?;
                &sampled[..]
            }
            _ => train,
        };
        let train = prepare_examples(train, &vocab, config.order, &model.config)?;
        if train.is_empty() {
            return Err(Error::invalid("no training turns"));
        }
        let dev = prepare_examples(dev, &vocab, config.order, &model.config)?;
        let adam = adam.unwrap_or_else(|| AdamState::new(&model.params));
        Ok(Trainer {
            config,
            vocab,
            ontology,
            model,
            adam,
            step: 0,
            log: Vec::new(),
            best: None,
            train,
            dev,
            knowledge,
            frozen: None,
            frozen_index: None,
            example_index: None,
            epoch_cache: None,
            checkpoint_dir: None,
        })
    }

    /// Directory that receives `last-good.ckpt` if training diverges.
    pub fn with_checkpoint_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.checkpoint_dir = Some(dir.into());
        self
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn log(&self) -> &[LogRecord] {
        &self.log
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let meta = Meta {
            config: self.config.clone(),
            step: self.step,
            best_step: self.best.as_ref().map(|b| b.0),
            best_dev_jga: self.best.as_ref().map(|b| b.1),
            log: self.log.clone(),
            example_index: self.example_index.clone(),
        };
        let mut ck = Checkpoint::from_model(
            &self.model,
            &self.vocab,
            serde_json::to_value(meta).expect("meta serializes"),
        );
        ck.adam = Some(self.adam.clone());
        ck.best = self.best.as_ref().map(|b| b.2.clone());
        ck.frozen = self.frozen.as_ref().map(|m| m.params.clone());
        ck
    }

    fn phase(&self, step: usize) -> Phase {
        match (self.config.schedule, &self.knowledge) {
            (_, None) => Phase::DstOnly,
            (Schedule::Joint, _) => Phase::Joint,
            (Schedule::RetrievalThenDst { retrieval_steps }, _) if step < retrieval_steps => {
                Phase::RetrievalOnly
            }
            (Schedule::RetrievalThenDst { .. }, _) => Phase::DstOnly,
        }
    }

    fn batch(&mut self, step: usize) -> Vec<usize> {
        let n = self.train.len();
        let b = self.config.batch_size;
        (step * b..(step + 1) * b)
            .map(|p| {
                let epoch = p / n;
                if self.epoch_cache.as_ref().map(|c| c.0) != Some(epoch) {
                    let mut perm: Vec<usize> = (0..n).collect();
                    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(
                        self.config.seed,
                        STREAM_EPOCH,
                        epoch as u64,
                    )));
                    self.epoch_cache = Some((epoch, perm));
                }
                self.epoch_cache.as_ref().expect("just filled").1[p % n]
            })
            .collect()
    }

    /// Runs until `config.steps` steps have been taken.
    pub fn run(&mut self) -> Result<()> {
        while self.step < self.config.steps {
            self.train_step()?;
        }
        Ok(())
    }

    pub fn finish(self) -> Result<TrainOutcome> {
        let final_model = self.model;
        let (model, best_step) = match self.best {
            Some((step, _, params)) => (
                Model::from_params(final_model.config.clone(), params)?,
                Some(step),
            ),
            None => (final_model.clone(), None),
        };
        Ok(TrainOutcome {
            model,
            final_model,
            log: self.log,
            best_step,
        })
    }

    /// The model that scores knowledge at this point of training.
    pub fn scorer(&self) -> &Model {
        self.frozen.as_ref().unwrap_or(&self.model)
    }

    fn diverged(&self, step: usize) -> Error {
        let path = match &self.checkpoint_dir {
            Some(dir) => {
                let p = dir.join("last-good.ckpt");
                match self.checkpoint().save(&p) {
                    Ok(()) => p.display().to_string(),
                    Err(e) => format!("<not saved: {e}>"),
                }
            }
            None => "<none>".to_string(),
        };
        Error::Diverged {
            step,
            checkpoint: path,
        }
    }

    /// One optimizer step on the next batch.
    pub fn train_step(&mut self) -> Result<()> {
        let s = self.step;
        let phase = self.phase(s);
        if let Schedule::RetrievalThenDst { retrieval_steps } = self.config.schedule {
            if s == 0 && retrieval_steps > 0 {
                self.log.push(LogRecord::Phase {
                    step: 0,
                    phase: "retrieval".into(),
                });
            }
            if s == retrieval_steps && self.frozen.is_none() {
                self.frozen = Some(self.model.clone());
                self.log.push(LogRecord::Phase {
                    step: s,
                    phase: "dst".into(),
                });
            }
        }
        let result = self.step_objective(s, phase);
        let Objective {
            gradients: mut grads,
            l_ret,
            l_dst,
            l_total,
        } = match result {
            Ok(r) => r,
            Err(Error::NonFinite { .. }) => return Err(self.diverged(s)),
            Err(e) => return Err(e),
        };
        if let Some(c) = self.config.clip_norm {
            clip_global_norm(&mut grads, c);
        }
        let cfg = AdamConfig {
            lr: self.config.lr,
            ..AdamConfig::default()
        };
        adam_step(&mut self.model.params, &grads, &mut self.adam, &cfg)?;
        self.log.push(LogRecord::Step {
            step: s,
            l_ret,
            l_dst,
            l_total,
        });
        self.step += 1;
        let eval_due = self.config.eval_every > 0 && self.step.is_multiple_of(self.config.eval_every);
        if !self.dev.is_empty() && (eval_due || self.step == self.config.steps) {
            self.evaluate_dev()?;
        }
        Ok(())
    }

    /// Loss terms and unclipped gradients for the next batch. Parameters,
    /// optimizer state and the step counter are left untouched.
    pub fn objective(&mut self) -> Result<Objective> {
        let s = self.step;
        let phase = self.phase(s);
        self.step_objective(s, phase)
    }

    /// Mutable access to the current parameters (finite-difference checks).
    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.model.params
    }

    fn step_objective(&mut self, s: usize, phase: Phase) -> Result<Objective> {
        let training_examples = self
            .knowledge
            .as_ref()
            .is_some_and(|k| k.kb.kind == KnowledgeKind::TrainingExample);
        if training_examples
            && phase == Phase::Joint
            && (self.example_index.is_none() || s.is_multiple_of(self.config.index_refresh))
        {
            let k = self.knowledge.as_ref().expect("checked");
            self.example_index = Some(KnowledgeIndex::build(&self.model, &k.tokens)?.vectors);
        }
        if phase == Phase::DstOnly
            && self.frozen_index.is_none()
            && self.config.integration != IntegrationMode::Oracle
        {
            if let (Some(k), Some(frozen)) = (&self.knowledge, &self.frozen) {
                self.frozen_index = Some(KnowledgeIndex::build(frozen, &k.tokens)?);
            }
        }
        let batch = self.batch(s);
        let mut rng =
            ChaCha8Rng::seed_from_u64(derive_seed(self.config.seed, STREAM_STEP, s as u64));
        self.forward_backward(&batch, phase, &mut rng)
    }

    fn evaluate_dev(&mut self) -> Result<()> {
        let opts = EvalOptions::from_config(&self.config, self.knowledge.as_ref().map(|k| &k.kb));
        let report = evaluate_examples(
            &self.model,
            self.scorer(),
            &self.dev,
            self.knowledge.as_ref(),
            &self.vocab,
            &self.ontology,
            &opts,
        )?;
        self.log.push(LogRecord::Dev {
            step: self.step,
            dev_jga: report.jga,
            dev_recall: report.retrieval_recall,
            dev_precision: report.retrieval_precision,
        });
        if self.best.as_ref().is_none_or(|b| report.jga > b.1) {
            self.best = Some((self.step, report.jga, self.model.params.clone()));
        }
        Ok(())
    }

    fn forward_backward(
        &self,
        batch: &[usize],
        phase: Phase,
        rng: &mut ChaCha8Rng,
    ) -> Result<Objective> {
        let cfg = &self.config;
        let b = batch.len() as f64;
        let examples: Vec<&Example> = batch.iter().map(|&i| &self.train[i]).collect();
        let max_aug = context_budget(&self.model.config);
        let mut g = Graph::new(&self.model.params);
        let mut l_ret_var = None;
        let mut selections: Vec<Option<Vec<u32>>> = vec![None; examples.len()];

        if let Some(k) = &self.knowledge {
            let width = cfg.k_for(&k.kb);
            let oracle = cfg.integration == IntegrationMode::Oracle;
            if phase != Phase::DstOnly && !oracle {
                let ctx_inputs: Vec<Vec<u32>> = examples
                    .iter()
                    .map(|e| with_bos(&e.context.tokens))
                    .collect();
                let (candidates, labels, weights) = self.retrieval_targets(k, &examples, rng)?;
                let mut seqs: Vec<&[u32]> = ctx_inputs.iter().map(Vec::as_slice).collect();
                seqs.extend(candidates.iter().map(|&c| k.inputs[c].as_slice()));
                let enc = self.model.encode_packed(&mut g, &seqs)?;
                let vectors = self.model.retrieval_vectors(&mut g, &enc);
                let ctx_v = g.gather(vectors, (0..examples.len()).collect());
                let cand_v = g.gather(vectors, (examples.len()..seqs.len()).collect());
                let scores = g.matmul_bt(ctx_v, cand_v);
                l_ret_var = Some(g.bce_with_logits(scores, labels, weights));
                if phase == Phase::Joint {
                    let sv = g.value(scores).clone();
                    let ctx_values = g.value(ctx_v).clone();
                    for (i, ex) in examples.iter().enumerate() {
                        let full = match &self.example_index {
                            Some(index) if k.kb.kind == KnowledgeKind::TrainingExample => {
                                KnowledgeIndex {
                                    vectors: index.clone(),
                                }
                                .scores(ctx_values.row(i))
                            }
                            _ => sv.row(i).to_vec(),
                        };
                        let ranked = k.rank(full, ex, width);
                        selections[i] = Some(self.arrange(&ranked, ex, k, max_aug, rng)?);
                    }
                }
            } else if oracle {
                for (i, ex) in examples.iter().enumerate() {
                    let recall = *cfg.oracle_recalls.choose(rng).expect("validated non-empty");
                    let aug = oracle_integrate(
                        &ex.gold,
                        &k.kb,
                        &ex.context,
                        &k.tokens,
                        width,
                        recall,
                        rng.gen(),
                        max_aug,
                    )?;
                    selections[i] = Some(aug.tokens);
                }
            } else {
                let scorer = self.scorer();
                let index = self
                    .frozen_index
                    .as_ref()
                    .ok_or_else(|| Error::invalid("no frozen retriever before the dst phase"))?;
                let ctx_inputs: Vec<Vec<u32>> = examples
                    .iter()
                    .map(|e| with_bos(&e.context.tokens))
                    .collect();
                let refs: Vec<&[u32]> = ctx_inputs.iter().map(Vec::as_slice).collect();
                let ctx_vectors = scorer.retrieval_matrix(&refs)?;
                for (i, ex) in examples.iter().enumerate() {
                    let ranked = k.rank(index.scores(ctx_vectors.row(i)), ex, width);
                    selections[i] = Some(self.arrange(&ranked, ex, k, max_aug, rng)?);
                }
            }
        }

        let mut l_dst_var = None;
        if phase != Phase::RetrievalOnly {
            let inputs: Vec<Vec<u32>> = examples
                .iter()
                .zip(&selections)
                .map(|(ex, sel)| with_bos(sel.as_deref().unwrap_or(&ex.context.tokens)))
                .collect();
            let refs: Vec<&[u32]> = inputs.iter().map(Vec::as_slice).collect();
            let memory = self.model.encode_packed(&mut g, &refs)?;
            let targets: Vec<&[u32]> = examples.iter().map(|e| e.target.as_slice()).collect();
            l_dst_var = Some(self.model.decode_loss_packed(
                &mut g,
                &memory,
                &targets,
                &vec![1.0 / b; examples.len()],
            )?);
        }

        let mut total = None;
        let mut l_total = 0.0;
        if let Some(v) = l_dst_var {
            let w = if phase == Phase::DstOnly {
                1.0
            } else {
                cfg.dst_weight
            };
            l_total += w * g.value(v).item();
            total = Some(g.scale(v, w));
        }
        if let Some(v) = l_ret_var {
            let w = if phase == Phase::RetrievalOnly {
                1.0
            } else {
                cfg.retrieval_weight
            };
            l_total += w * g.value(v).item();
            let scaled = g.scale(v, w);
            total = Some(match total {
                Some(t) => g.add(t, scaled),
                None => scaled,
            });
        }
        g.check()?;
        let total = total.expect("at least one loss term");
        let grads = g.backward(total)?.into_params();
        Ok(Objective {
            gradients: grads,
            l_ret: l_ret_var.map(|v| g.value(v).item()),
            l_dst: l_dst_var.map(|v| g.value(v).item()),
            l_total,
        })
    }

    /// Candidate element ids plus flattened `(labels, weights)` for the
    /// `batch × candidates` score matrix.
    fn retrieval_targets(
        &self,
        k: &KnowledgeSetup,
        examples: &[&Example],
        rng: &mut ChaCha8Rng,
    ) -> Result<(Vec<usize>, Vec<f64>, Vec<f64>)> {
        let b = examples.len() as f64;
        if k.kb.kind != KnowledgeKind::TrainingExample {
            let n = k.kb.len();
            let mut labels = Vec::with_capacity(examples.len() * n);
            for ex in examples {
                labels.extend(gold_labels(&ex.gold, &k.kb)?.into_iter().map(|y| {
                    if y {
                        1.0
                    } else {
                        0.0
                    }
                }));
            }
            return Ok(((0..n).collect(), labels, vec![1.0 / b; examples.len() * n]));
        }
        // Gold plus sampled negatives per example, over the union of ids.
        let mut per_example: Vec<(usize, Vec<usize>)> = Vec::with_capacity(examples.len());
        let mut union = BTreeSet::new();
        for ex in examples {
            let gold = *k
                .gold_ids(ex)?
                .iter()
                .next()
                .ok_or_else(|| Error::invalid("no gold example"))?;
            let own = k.own_element(ex);
            let pool: Vec<usize> = (0..k.kb.len())
                .filter(|&i| i != gold && Some(i) != own)
                .collect();
            let m = self.config.negatives.min(pool.len());
            let negs: Vec<usize> = sample(rng, pool.len(), m)
                .into_iter()
                .map(|i| pool[i])
                .collect();
            union.insert(gold);
            union.extend(negs.iter().copied());
            per_example.push((gold, negs));
        }
        let candidates: Vec<usize> = union.into_iter().collect();
        let mut labels = vec![0.0; examples.len() * candidates.len()];
        let mut weights = vec![0.0; examples.len() * candidates.len()];
        for (i, (gold, negs)) in per_example.iter().enumerate() {
            for (j, c) in candidates.iter().enumerate() {
                if c == gold {
                    labels[i * candidates.len() + j] = 1.0;
                    weights[i * candidates.len() + j] = 1.0 / b;
                } else if negs.contains(c) {
                    weights[i * candidates.len() + j] = 1.0 / b;
                }
            }
        }
        Ok((candidates, labels, weights))
    }

    fn arrange(
        &self,
        ranked: &RetrievalResult,
        ex: &Example,
        k: &KnowledgeSetup,
        max_len: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<u32>> {
        let arrangement = match self.config.integration {
            IntegrationMode::Shuffled => Arrangement::Shuffled(rng.gen()),
            _ => Arrangement::Ordered,
        };
        Ok(integrate(ranked, &ex.context, &k.tokens, arrangement, max_len)?.tokens)
    }
}

fn run_to_end(trainer: Trainer) -> Result<TrainOutcome> {
    let mut trainer = trainer;
    trainer.run()?;
    trainer.finish()
}

/// Training and development dialogs with their shared vocabulary and
/// ontology.
#[derive(Clone, Copy)]
pub struct Data<'a> {
    pub train: &'a [Dialog],
    pub dev: &'a [Dialog],
    pub vocab: &'a Vocabulary,
    pub ontology: &'a Ontology,
}

/// Multitask training on retrieval and DST.
pub fn train_joint(
    data: Data<'_>,
    kb: KnowledgeBase,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    if config.schedule != Schedule::Joint {
        return Err(Error::invalid("train_joint needs the joint schedule"));
    }
    run_to_end(Trainer::new(
        config.clone(),
        data.vocab.clone(),
        data.ontology.clone(),
        data.train,
        data.dev,
        Some(kb),
    )?)
}

/// Retrieval first, then DST with the retriever frozen.
pub fn train_sequential(
    data: Data<'_>,
    kb: KnowledgeBase,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    if !matches!(config.schedule, Schedule::RetrievalThenDst { .. }) {
        return Err(Error::invalid(
            "train_sequential needs the retrieval_then_dst schedule",
        ));
    }
    run_to_end(Trainer::new(
        config.clone(),
        data.vocab.clone(),
        data.ontology.clone(),
        data.train,
        data.dev,
        Some(kb),
    )?)
}

/// Context-only generation with the same model, optimizer and budget.
pub fn seq2seq_baseline(data: Data<'_>, config: &TrainConfig) -> Result<TrainOutcome> {
    let config = TrainConfig {
        kb_kind: None,
        retrieval_weight: 0.0,
        schedule: Schedule::Joint,
        integration: IntegrationMode::Ordered,
        ..config.clone()
    };
    run_to_end(Trainer::new(
        config,
        data.vocab.clone(),
        data.ontology.clone(),
        data.train,
        data.dev,
        None,
    )?)
}
