//! Joint goal accuracy, retrieval metrics, the controlled-recall sanity check
//! and report output.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::corpus::{
    linearize_state, Dialog, DialogState, Ontology, OrderPolicy, EMPTY_STATE, VALUE_SEPARATOR,
};
use crate::error::{Error, Result};
use crate::integration::{integrate, oracle_integrate, Arrangement};
use crate::knowledge::{KnowledgeBase, KnowledgeKind};
use crate::model::vocab::EOS;
use crate::model::{EncodedSequence, Graph, Model, Tensor, Vocabulary};
use crate::retrieval::{retrieval_metrics, with_bos, KnowledgeIndex, Ranked};
use crate::training::{
    context_budget, derive_seed, prepare_examples, Example, IntegrationMode, KnowledgeSetup,
    TrainConfig, STREAM_EVAL,
};

/// Result of parsing one generated state string.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedState {
    pub state: DialogState,
    /// Pieces that could not be read as a known `slot=value` pair.
    pub failures: Vec<String>,
}

impl ParsedState {
    /// True when something was generated but nothing usable came out.
    pub fn failed(&self) -> bool {
        self.state.is_empty() && !self.failures.is_empty()
    }
}

/// Reads `slot=value ; slot=value` (whitespace around separators is
/// ignored). Never fails: unreadable pairs are collected in `failures`.
pub fn parse_linearized_state(text: &str, ontology: &Ontology) -> ParsedState {
    let mut out = ParsedState::default();
    let text = text.trim();
    if text.is_empty() || text == EMPTY_STATE {
        return out;
    }
    for piece in text.split(';') {
        let piece = piece.trim();
        let Some((slot, value)) = piece.split_once(VALUE_SEPARATOR) else {
            out.failures.push(piece.to_string());
            continue;
        };
        let (slot, value) = (slot.trim(), value.trim());
        if slot.is_empty() || value.is_empty() || !ontology.has_slot(slot) {
            out.failures.push(piece.to_string());
            continue;
        }
        out.state.insert(slot, value);
    }
    out
}

/// Fraction of positions where the predicted set equals the gold set.
pub fn jga(predictions: &[DialogState], golds: &[DialogState]) -> Result<f64> {
    if predictions.len() != golds.len() || golds.is_empty() {
        return Err(Error::invalid(format!(
            "jga needs equally many predictions ({}) and golds ({}), at least one",
            predictions.len(),
            golds.len()
        )));
    }
    let hits = predictions
        .iter()
        .zip(golds)
        .filter(|(p, g)| p == g)
        .count();
    Ok(hits as f64 / golds.len() as f64)
}

/// How `evaluate` builds the encoder input.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub k: usize,
    pub integration: IntegrationMode,
    /// Recall target in oracle mode.
    pub oracle_recall: Option<f64>,
    pub seed: u64,
    pub order: OrderPolicy,
    /// Turns decoded together.
    pub batch_size: usize,
}

impl EvalOptions {
    pub fn from_config(config: &TrainConfig, kb: Option<&KnowledgeBase>) -> Self {
        EvalOptions {
            k: kb.map_or(0, |kb| config.k_for(kb)),
            integration: config.integration,
            oracle_recall: (config.integration == IntegrationMode::Oracle).then_some(1.0),
            seed: config.seed,
            order: config.order,
            batch_size: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TurnRecord {
    pub dialog_id: String,
    pub turn: usize,
    pub gold: String,
    pub predicted: String,
    pub generated: String,
    pub parse_failures: Vec<String>,
    /// Retrieved elements, best first (absent in oracle mode).
    pub ranked: Option<Vec<Ranked>>,
    /// Elements actually placed in the input, in input order.
    pub integrated: Vec<usize>,
    pub gold_ids: Vec<usize>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    /// Share of gold elements present in the input.
    pub input_recall: Option<f64>,
    pub correct: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub jga: f64,
    pub retrieval_precision: Option<f64>,
    pub retrieval_recall: Option<f64>,
    /// Mean share of gold elements present in the encoder input.
    pub input_recall: Option<f64>,
    /// Turns whose generation could not be parsed at all.
    pub parse_failures: usize,
    pub turns: Vec<TurnRecord>,
    pub config: serde_json::Value,
    pub seeds: Vec<u64>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    /// One JSON line per turn with the ranked retrieval list.
    pub fn retrieval_dump(&self) -> String {
        self.turns
            .iter()
            .map(|t| {
                let line = serde_json::json!({
                    "dialog_id": t.dialog_id,
                    "turn": t.turn,
                    "ranked": t.ranked,
                    "integrated": t.integrated,
                    "gold_ids": t.gold_ids,
                    "correct": t.correct,
                });
                line.to_string() + "\n"
            })
            .collect()
    }
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Encodes BOS-prefixed inputs in one graph and splits the result.
fn encode_many(model: &Model, inputs: &[Vec<u32>]) -> Result<Vec<EncodedSequence>> {
    let mut g = Graph::new(&model.params);
    let refs: Vec<&[u32]> = inputs.iter().map(Vec::as_slice).collect();
    let packed = model.encode_packed(&mut g, &refs)?;
    g.check()?;
    let states = g.value(packed.states);
    Ok(packed
        .segments
        .iter()
        .map(|s| EncodedSequence {
            states: Tensor::new(
                s.len,
                states.cols,
                states.data[s.start * states.cols..(s.start + s.len) * states.cols].to_vec(),
            ),
        })
        .collect())
}

/// Retrieves, integrates, generates and scores every example.
///
/// `generator` produces states; `scorer` ranks knowledge (they differ only
/// for the sequential schedule).
pub fn evaluate_examples(
    generator: &Model,
    scorer: &Model,
    examples: &[Example],
    knowledge: Option<&KnowledgeSetup>,
    vocab: &Vocabulary,
    ontology: &Ontology,
    options: &EvalOptions,
) -> Result<EvalReport> {
    if examples.is_empty() {
        return Err(Error::invalid("nothing to evaluate"));
    }
    let oracle = options.integration == IntegrationMode::Oracle;
    if let Some(k) = knowledge {
        if options.k == 0 || options.k > k.kb.len() {
            return Err(Error::invalid(format!(
                "k = {} outside 1..={}",
                options.k,
                k.kb.len()
            )));
        }
        if oracle && options.oracle_recall.is_none() {
            return Err(Error::invalid("oracle evaluation needs a recall target"));
        }
    } else if options.integration != IntegrationMode::Ordered {
        return Err(Error::invalid("integration mode needs a knowledge base"));
    }
    let index = match knowledge {
        Some(k) if !oracle => Some(KnowledgeIndex::build(scorer, &k.tokens)?),
        _ => None,
    };
    let max_aug = context_budget(&generator.config);
    let mut turns = Vec::with_capacity(examples.len());
    let mut parse_failures = 0;
    let mut recalls = Vec::new();
    let mut precisions = Vec::new();
    let mut input_recalls = Vec::new();
    for (chunk_no, chunk) in examples.chunks(options.batch_size.max(1)).enumerate() {
        let base = chunk_no * options.batch_size.max(1);
        let ctx_vectors = match &index {
            Some(_) => {
                let inputs: Vec<Vec<u32>> =
                    chunk.iter().map(|e| with_bos(&e.context.tokens)).collect();
                let refs: Vec<&[u32]> = inputs.iter().map(Vec::as_slice).collect();
                Some(scorer.retrieval_matrix(&refs)?)
            }
            None => None,
        };
        let mut inputs = Vec::with_capacity(chunk.len());
        let mut partial = Vec::with_capacity(chunk.len());
        for (i, ex) in chunk.iter().enumerate() {
            let turn_seed = derive_seed(options.seed, STREAM_EVAL, (base + i) as u64);
            let mut record = TurnRecord {
                dialog_id: ex.dialog_id.clone(),
                turn: ex.turn,
                gold: linearize_state(&ex.gold, options.order),
                predicted: String::new(),
                generated: String::new(),
                parse_failures: Vec::new(),
                ranked: None,
                integrated: Vec::new(),
                gold_ids: Vec::new(),
                precision: None,
                recall: None,
                input_recall: None,
                correct: false,
            };
            let tokens = match knowledge {
                None => ex.context.tokens.clone(),
                Some(k) => {
                    let gold = k.gold_ids(ex)?;
                    record.gold_ids = gold.iter().copied().collect();
                    let aug = if oracle {
                        let recall = options.oracle_recall.expect("checked");
                        oracle_integrate(
                            &ex.gold,
                            &k.kb,
                            &ex.context,
                            &k.tokens,
                            options.k,
                            recall,
                            turn_seed,
                            max_aug,
                        )?
                    } else {
                        let index = index.as_ref().expect("built");
                        let cv = ctx_vectors.as_ref().expect("built");
                        let ranked = k.rank(index.scores(cv.row(i)), ex, options.k);
                        let (p, r) = retrieval_metrics(&ranked.ids(), &gold);
                        record.precision = Some(p);
                        record.recall = Some(r);
                        let arrangement = match options.integration {
                            IntegrationMode::Shuffled => Arrangement::Shuffled(turn_seed),
                            _ => Arrangement::Ordered,
                        };
                        let aug = integrate(&ranked, &ex.context, &k.tokens, arrangement, max_aug)?;
                        record.ranked = Some(ranked.ranked);
                        aug
                    };
                    if oracle {
                        let retrieved: BTreeSet<usize> = aug.provenance.iter().copied().collect();
                        let (p, r) = retrieval_metrics(&retrieved, &gold);
                        record.precision = Some(p);
                        record.recall = Some(r);
                    }
                    record.input_recall = Some(aug.recall(&gold));
                    record.integrated = aug.provenance.clone();
                    aug.tokens
                }
            };
            inputs.push(with_bos(&tokens));
            partial.push(record);
        }
        let encoded = encode_many(generator, &inputs)?;
        let refs: Vec<&EncodedSequence> = encoded.iter().collect();
        let outputs = generator.generate_batch(&refs, generator.config.max_dec_len)?;
        for ((ex, mut record), out) in chunk.iter().zip(partial).zip(outputs) {
            let body: Vec<u32> = out.into_iter().take_while(|&t| t != EOS).collect();
            record.generated = vocab.decode(&body);
            let parsed = parse_linearized_state(&record.generated, ontology);
            if parsed.failed() || record.generated.trim().is_empty() {
                parse_failures += 1;
            }
            record.predicted = linearize_state(&parsed.state, options.order);
            record.parse_failures = parsed.failures;
            record.correct = parsed.state == ex.gold;
            recalls.extend(record.recall);
            precisions.extend(record.precision);
            input_recalls.extend(record.input_recall);
            turns.push(record);
        }
    }
    let correct = turns.iter().filter(|t| t.correct).count();
    Ok(EvalReport {
        jga: correct as f64 / turns.len() as f64,
        retrieval_precision: mean(precisions.into_iter()),
        retrieval_recall: mean(recalls.into_iter()),
        input_recall: mean(input_recalls.into_iter()),
        parse_failures,
        turns,
        config: serde_json::to_value(options).expect("options serialize"),
        seeds: vec![options.seed],
    })
}

/// Evaluates `model` on every user turn of `dialogs`.
pub fn evaluate(
    model: &Model,
    vocab: &Vocabulary,
    ontology: &Ontology,
    dialogs: &[Dialog],
    kb: Option<&KnowledgeBase>,
    options: &EvalOptions,
) -> Result<EvalReport> {
    let examples = prepare_examples(dialogs, vocab, options.order, &model.config)?;
    let knowledge = kb.map(|kb| KnowledgeSetup::new(kb.clone(), vocab));
    evaluate_examples(
        model,
        model,
        &examples,
        knowledge.as_ref(),
        vocab,
        ontology,
        options,
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SanityRow {
    pub recall_target: f64,
    pub measured_recall: f64,
    pub jga: f64,
}

/// JGA as a function of the share of gold pairs placed in the input.
#[allow(clippy::too_many_arguments)]
pub fn sanity_check(
    model: &Model,
    vocab: &Vocabulary,
    ontology: &Ontology,
    dialogs: &[Dialog],
    kb: &KnowledgeBase,
    recall_targets: &[f64],
    k: usize,
    seed: u64,
    order: OrderPolicy,
) -> Result<Vec<SanityRow>> {
    if kb.kind != KnowledgeKind::TypeValue {
        return Err(Error::invalid(
            "the sanity check needs a type_value knowledge base",
        ));
    }
    let examples = prepare_examples(dialogs, vocab, order, &model.config)?;
    let knowledge = KnowledgeSetup::new(kb.clone(), vocab);
    recall_targets
        .iter()
        .map(|&target| {
            let options = EvalOptions {
                k,
                integration: IntegrationMode::Oracle,
                oracle_recall: Some(target),
                seed,
                order,
                batch_size: 32,
            };
            let report = evaluate_examples(
                model,
                model,
                &examples,
                Some(&knowledge),
                vocab,
                ontology,
                &options,
            )?;
            Ok(SanityRow {
                recall_target: target,
                measured_recall: report.input_recall.unwrap_or(1.0),
                jga: report.jga,
            })
        })
        .collect()
}

pub fn sanity_csv(rows: &[SanityRow]) -> String {
    let mut out = String::from("recall_target,measured_recall,jga\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{}\n",
            r.recall_target, r.measured_recall, r.jga
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::SlotSpec;

    fn onto() -> Ontology {
        Ontology::new(vec![
            SlotSpec {
                name: "hotel-area".into(),
                values: vec!["west".into(), "east".into()],
            },
            SlotSpec {
                name: "hotel-parking".into(),
                values: vec!["yes".into(), "no".into()],
            },
        ])
        .unwrap()
    }

    #[test]
    fn parse_examples() {
        let o = onto();
        assert!(parse_linearized_state("none", &o).state.is_empty());
        let p = parse_linearized_state("hotel-area=west ; hotel-parking=yes", &o);
        assert_eq!(p.state.len(), 2);
        assert!(p.failures.is_empty());
        let p = parse_linearized_state("hotel-area = west ; hotel-parking = yes", &o);
        assert_eq!(p.state.get("hotel-parking"), Some("yes"));
        let p = parse_linearized_state("garbage tokens", &o);
        assert!(p.state.is_empty() && p.failed());
        let p = parse_linearized_state("hotel-area=west ; taxi-color=red ; =x", &o);
        assert_eq!(p.state.len(), 1);
        assert_eq!(p.failures.len(), 2);
        assert!(!p.failed());
    }

    #[test]
    fn jga_examples() {
        let mut a = DialogState::new();
        a.insert("hotel-area", "west");
        a.insert("hotel-parking", "yes");
        let mut b = DialogState::new();
        b.insert("hotel-parking", "yes");
        b.insert("hotel-area", "west");
        let mut c = DialogState::new();
        c.insert("hotel-area", "west");
        let golds = vec![a.clone(), a.clone(), a.clone(), a.clone()];
        assert_eq!(jga(&golds, &golds).unwrap(), 1.0);
        assert_eq!(jga(&[b.clone(), b.clone(), b, c], &golds).unwrap(), 0.75);
        assert!(jga(&[a.clone()], &golds).is_err());
        assert!(jga(&[], &[]).is_err());
    }

    #[test]
    fn csv_shape() {
        let rows = [
            SanityRow {
                recall_target: 0.5,
                measured_recall: 0.5,
                jga: 0.25,
            },
            SanityRow {
                recall_target: 1.0,
                measured_recall: 1.0,
                jga: 0.75,
            },
        ];
        let csv = sanity_csv(&rows);
        assert_eq!(csv.lines().count(), 3);
        assert_eq!(csv.lines().nth(2), Some("1,1,0.75"));
    }
}
