//! Dot-product knowledge retrieval: scoring, the binary cross-entropy
//! retrieval loss, top-k selection and precision/recall.

use std::cmp::Ordering;
use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::corpus::DialogContext;
use crate::error::{Error, Result};
use crate::knowledge::KnowledgeBase;
use crate::model::graph::sigmoid;
use crate::model::vocab::{Vocabulary, BOS};
use crate::model::{Model, Tensor};

/// Elements encoded per graph when indexing a knowledge base.
const INDEX_CHUNK: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ranked {
    pub id: usize,
    pub score: f64,
    pub probability: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    /// Highest score first.
    pub ranked: Vec<Ranked>,
    pub k: usize,
}

impl RetrievalResult {
    pub fn ids(&self) -> BTreeSet<usize> {
        self.ranked.iter().map(|r| r.id).collect()
    }
}

/// Dot product of two representation vectors.
pub fn sim(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!(
            "similarity between vectors of dimension {} and {}",
            a.len(),
            b.len()
        )));
    }
    Ok(a.iter().zip(b).map(|(x, y)| x * y).sum())
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// `−Σ [y·log σ(s) + (1−y)·log(1−σ(s))]`, evaluated without overflow.
pub fn retrieval_loss(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() || scores.is_empty() {
        return Err(Error::invalid(
            "scores and labels must be non-empty and equally long",
        ));
    }
    Ok(scores
        .iter()
        .zip(labels)
        .map(|(&s, &y)| if y { softplus(-s) } else { softplus(s) })
        .sum())
}

/// Closed-form `∂L/∂s_i = σ(s_i) − y_i`.
pub fn retrieval_loss_grad(scores: &[f64], labels: &[bool]) -> Vec<f64> {
    scores
        .iter()
        .zip(labels)
        .map(|(&s, &y)| sigmoid(s) - if y { 1.0 } else { 0.0 })
        .collect()
}

/// Order by score descending, then id ascending. Adding zero folds -0.0
/// into 0.0 so the two tie.
fn by_score(a: &(usize, f64), b: &(usize, f64)) -> Ordering {
    (b.1 + 0.0).total_cmp(&(a.1 + 0.0)).then(a.0.cmp(&b.0))
}

/// The `k` best-scoring ids; ties go to the lower id.
pub fn rank_scores(scores: &[f64], k: usize) -> RetrievalResult {
    let k = k.min(scores.len());
    let mut order: Vec<(usize, f64)> = scores.iter().copied().enumerate().collect();
    if k < order.len() && k > 0 {
        order.select_nth_unstable_by(k - 1, by_score);
    }
    order.truncate(k);
    order.sort_by(by_score);
    RetrievalResult {
        ranked: order
            .into_iter()
            .map(|(id, score)| Ranked {
                id,
                score,
                probability: sigmoid(score),
            })
            .collect(),
        k,
    }
}

/// Knowledge elements encoded once with fixed parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct KnowledgeIndex {
    /// One retrieval vector per element, in id order.
    pub vectors: Tensor,
}

impl KnowledgeIndex {
    pub fn build(model: &Model, element_tokens: &[Vec<u32>]) -> Result<Self> {
        let d = model.config.d_model;
        let mut data = Vec::with_capacity(element_tokens.len() * d);
        for chunk in element_tokens.chunks(INDEX_CHUNK) {
            let seqs: Vec<Vec<u32>> = chunk.iter().map(|t| with_bos(t)).collect();
            let refs: Vec<&[u32]> = seqs.iter().map(Vec::as_slice).collect();
            data.extend(model.retrieval_matrix(&refs)?.data);
        }
        Ok(KnowledgeIndex {
            vectors: Tensor::new(element_tokens.len(), d, data),
        })
    }

    pub fn len(&self) -> usize {
        self.vectors.rows
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.rows == 0
    }

    pub fn scores(&self, query: &[f64]) -> Vec<f64> {
        (0..self.vectors.rows)
            .map(|i| {
                self.vectors
                    .row(i)
                    .iter()
                    .zip(query)
                    .map(|(a, b)| a * b)
                    .sum()
            })
            .collect()
    }

    pub fn top_k(&self, query: &[f64], k: usize) -> Result<RetrievalResult> {
        if k == 0 || k > self.len() {
            return Err(Error::invalid(format!(
                "k = {k} outside 1..={}",
                self.len()
            )));
        }
        Ok(rank_scores(&self.scores(query), k))
    }
}

pub fn with_bos(tokens: &[u32]) -> Vec<u32> {
    let mut v = Vec::with_capacity(tokens.len() + 1);
    v.push(BOS);
    v.extend_from_slice(tokens);
    v
}

/// Retrieval vector of one context.
pub fn context_vector(model: &Model, ctx: &DialogContext) -> Result<Vec<f64>> {
    Ok(model.retrieval_matrix(&[&with_bos(&ctx.tokens)])?.data)
}

/// Scores every element of `kb` against `ctx` with the model's current
/// parameters and keeps the best `k`.
pub fn top_k(
    ctx: &DialogContext,
    kb: &KnowledgeBase,
    model: &Model,
    vocab: &Vocabulary,
    k: usize,
) -> Result<RetrievalResult> {
    let index = KnowledgeIndex::build(model, &kb.tokenize(vocab))?;
    index.top_k(&context_vector(model, ctx)?, k)
}

/// `(precision, recall)`; an empty gold set scores `(1, 1)`.
pub fn retrieval_metrics(retrieved: &BTreeSet<usize>, gold: &BTreeSet<usize>) -> (f64, f64) {
    if gold.is_empty() {
        return (1.0, 1.0);
    }
    if retrieved.is_empty() {
        return (0.0, 0.0);
    }
    let hit = retrieved.intersection(gold).count() as f64;
    (hit / retrieved.len() as f64, hit / gold.len() as f64)
}
