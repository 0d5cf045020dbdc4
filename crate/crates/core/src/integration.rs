//! Builds the knowledge-augmented encoder input: retrieved elements, least
//! similar first, each followed by a knowledge separator, then the context.

use std::collections::BTreeSet;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{DialogContext, DialogState};
use crate::error::{Error, Result};
use crate::knowledge::{gold_labels, KnowledgeBase, KnowledgeKind};
use crate::model::vocab::KNOWLEDGE_SEP;
use crate::retrieval::RetrievalResult;

/// Placement of the retrieved elements.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arrangement {
    /// Ascending similarity: the best element sits next to the context.
    Ordered,
    /// Seeded uniform permutation.
    Shuffled(u64),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AugmentedContext {
    pub tokens: Vec<u32>,
    /// Element ids in the order they appear in `tokens`.
    pub provenance: Vec<usize>,
}

impl AugmentedContext {
    /// Fraction of `gold` present in the provenance (1 when `gold` is empty).
    pub fn recall(&self, gold: &BTreeSet<usize>) -> f64 {
        if gold.is_empty() {
            return 1.0;
        }
        let hit = self
            .provenance
            .iter()
            .filter(|id| gold.contains(id))
            .count();
        hit as f64 / gold.len() as f64
    }
}

fn element_cost(element_tokens: &[Vec<u32>], id: usize) -> Result<usize> {
    element_tokens
        .get(id)
        .map(|t| t.len() + 1)
        .ok_or_else(|| Error::invalid(format!("element id {id} has no tokens")))
}

fn assemble(order: &[usize], ctx: &DialogContext, element_tokens: &[Vec<u32>]) -> AugmentedContext {
    let mut tokens = Vec::new();
    for &id in order {
        tokens.extend_from_slice(&element_tokens[id]);
        tokens.push(KNOWLEDGE_SEP);
    }
    tokens.extend_from_slice(&ctx.tokens);
    AugmentedContext {
        tokens,
        provenance: order.to_vec(),
    }
}

fn check_context(ctx: &DialogContext, max_len: usize) -> Result<()> {
    if ctx.tokens.len() > max_len {
        return Err(Error::TooLong {
            len: ctx.tokens.len(),
            max: max_len,
        });
    }
    Ok(())
}

/// Prepends retrieved elements to the context. If the result does not fit in
/// `max_len` tokens, the least similar elements are dropped first.
pub fn integrate(
    result: &RetrievalResult,
    ctx: &DialogContext,
    element_tokens: &[Vec<u32>],
    arrangement: Arrangement,
    max_len: usize,
) -> Result<AugmentedContext> {
    if result.ranked.is_empty() {
        return Err(Error::invalid("cannot integrate an empty retrieval result"));
    }
    check_context(ctx, max_len)?;
    // `ranked` is best-first; keep the longest prefix that fits.
    let mut kept: Vec<usize> = result.ranked.iter().map(|r| r.id).collect();
    let mut total = ctx.tokens.len();
    for &id in &kept {
        total += element_cost(element_tokens, id)?;
    }
    while total > max_len {
        let id = kept.pop().expect("context alone fits");
        total -= element_cost(element_tokens, id)?;
    }
    match arrangement {
        Arrangement::Ordered => kept.reverse(),
        Arrangement::Shuffled(seed) => kept.shuffle(&mut ChaCha8Rng::seed_from_u64(seed)),
    }
    Ok(assemble(&kept, ctx, element_tokens))
}

/// Number of gold elements an oracle input carries for a recall target.
pub fn oracle_gold_count(recall_target: f64, gold: usize) -> usize {
    ((recall_target * gold as f64).round() as usize).min(gold)
}

/// Controlled-recall input: `round(recall·|gold|)` gold slot-value elements
/// plus distinct non-gold distractors up to `k`, in seeded random order.
#[allow(clippy::too_many_arguments)]
pub fn oracle_integrate(
    gold: &DialogState,
    kb: &KnowledgeBase,
    ctx: &DialogContext,
    element_tokens: &[Vec<u32>],
    k: usize,
    recall_target: f64,
    seed: u64,
    max_len: usize,
) -> Result<AugmentedContext> {
    if kb.kind != KnowledgeKind::TypeValue {
        return Err(Error::invalid(
            "oracle integration needs a type_value knowledge base",
        ));
    }
    if !(0.0..=1.0).contains(&recall_target) {
        return Err(Error::invalid(format!(
            "recall target {recall_target} outside [0, 1]"
        )));
    }
    if k > kb.len() {
        return Err(Error::invalid(format!(
            "k = {k} exceeds knowledge base size {}",
            kb.len()
        )));
    }
    check_context(ctx, max_len)?;
    let labels = gold_labels(gold, kb)?;
    let gold_ids: Vec<usize> = (0..labels.len()).filter(|&i| labels[i]).collect();
    let others: Vec<usize> = (0..labels.len()).filter(|&i| !labels[i]).collect();
    if k < gold_ids.len() {
        return Err(Error::invalid(format!(
            "k = {k} is smaller than the {} gold elements",
            gold_ids.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_gold = oracle_gold_count(recall_target, gold_ids.len());
    let mut chosen: Vec<usize> = sample(&mut rng, gold_ids.len(), n_gold)
        .into_iter()
        .map(|i| gold_ids[i])
        .collect();
    let n_other = (k - n_gold).min(others.len());
    chosen.extend(
        sample(&mut rng, others.len(), n_other)
            .into_iter()
            .map(|i| others[i]),
    );
    chosen.shuffle(&mut rng);
    let mut total = ctx.tokens.len();
    for &id in &chosen {
        total += element_cost(element_tokens, id)?;
    }
    while total > max_len {
        let id = chosen.remove(0);
        total -= element_cost(element_tokens, id)?;
    }
    Ok(assemble(&chosen, ctx, element_tokens))
}
