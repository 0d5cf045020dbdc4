//! Knowledge bases built from an ontology (slot types, slot-value pairs) or
//! from training turns, plus the gold relevance labels used to train the
//! retriever.

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{
    linearize_state, user_turns, Dialog, DialogState, Ontology, OrderPolicy, SlotValue, Speaker,
};
use crate::error::{Error, Result};
use crate::model::vocab::Vocabulary;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KnowledgeKind {
    Type,
    TypeValue,
    TrainingExample,
}

impl KnowledgeKind {
    pub fn default_top_k(self) -> usize {
        match self {
            KnowledgeKind::Type => 10,
            KnowledgeKind::TypeValue => 30,
            KnowledgeKind::TrainingExample => 1,
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "type" => Ok(KnowledgeKind::Type),
            "type_value" | "type+value" => Ok(KnowledgeKind::TypeValue),
            "training" | "training_example" => Ok(KnowledgeKind::TrainingExample),
            other => Err(Error::invalid(format!("unknown knowledge kind {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Payload {
    Slot(String),
    Pair(SlotValue),
    Example {
        context: String,
        state: String,
        slots: BTreeSet<String>,
    },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnowledgeElement {
    pub id: usize,
    pub kind: KnowledgeKind,
    pub text: String,
    pub payload: Payload,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KnowledgeBase {
    pub kind: KnowledgeKind,
    pub elements: Vec<KnowledgeElement>,
    pub top_k: usize,
}

/// Renders the text of a training-example element.
pub fn render_example(context: &str, state: &str) -> String {
    format!("{context} state : {state}")
}

/// Renders the dialog history up to user turn `turn` with speaker markers.
pub fn render_context(dialog: &Dialog, turn: usize) -> String {
    let end = dialog
        .user_turn_position(turn)
        .unwrap_or(dialog.turns.len().saturating_sub(1));
    dialog.turns[..=end]
        .iter()
        .map(|t| {
            let tag = match t.speaker {
                Speaker::User => "<user>",
                Speaker::System => "<system>",
            };
            format!("{tag} {}", t.text)
        })
        .collect::<Vec<_>>()
        .join(" ")
}

impl KnowledgeBase {
    fn from_elements(kind: KnowledgeKind, elements: Vec<KnowledgeElement>) -> Self {
        let top_k = kind.default_top_k().min(elements.len());
        KnowledgeBase {
            kind,
            elements,
            top_k,
        }
    }

    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    pub fn with_top_k(mut self, k: usize) -> Result<Self> {
        if k == 0 || k > self.elements.len() {
            return Err(Error::invalid(format!(
                "top_k {k} outside 1..={}",
                self.elements.len()
            )));
        }
        self.top_k = k;
        Ok(self)
    }

    /// BOS-free token ids of every element, indexed by id.
    pub fn tokenize(&self, vocab: &Vocabulary) -> Vec<Vec<u32>> {
        self.elements
            .iter()
            .map(|e| vocab.encode(&e.text))
            .collect()
    }

    /// Ids of the elements that count as retrieved-correctly for `state`.
    pub fn gold_ids(&self, state: &DialogState) -> Result<BTreeSet<usize>> {
        match self.kind {
            KnowledgeKind::TrainingExample => Ok([gold_training_example(state, self)?].into()),
            _ => Ok(gold_labels(state, self)?
                .into_iter()
                .enumerate()
                .filter_map(|(i, y)| y.then_some(i))
                .collect()),
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(&self.elements).expect("knowledge serializes");
        s.push('\n');
        s
    }

    /// Parses the JSON element list; `top_k` is reset to the kind's default.
    pub fn parse(text: &str) -> Result<Self> {
        let elements: Vec<KnowledgeElement> =
            serde_json::from_str(text).map_err(|e| Error::Format {
                locus: format!("line {} column {}", e.line(), e.column()),
                message: e.to_string(),
            })?;
        let kind = elements
            .first()
            .map(|e| e.kind)
            .ok_or_else(|| Error::Format {
                locus: "knowledge base".into(),
                message: "no elements".into(),
            })?;
        for (i, e) in elements.iter().enumerate() {
            let consistent = matches!(
                (e.kind, &e.payload),
                (KnowledgeKind::Type, Payload::Slot(_))
                    | (KnowledgeKind::TypeValue, Payload::Pair(_))
                    | (KnowledgeKind::TrainingExample, Payload::Example { .. })
            );
            if e.id != i || e.kind != kind || !consistent || e.text.trim().is_empty() {
                return Err(Error::Format {
                    locus: format!("element {i}"),
                    message: "ids must be dense, kinds uniform and payloads match the kind".into(),
                });
            }
        }
        Ok(KnowledgeBase::from_elements(kind, elements))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        KnowledgeBase::parse(&text)
    }
}

/// One element per slot; text is the slot name.
pub fn build_type_kb(ontology: &Ontology) -> KnowledgeBase {
    let elements = ontology
        .slots
        .iter()
        .enumerate()
        .map(|(id, s)| KnowledgeElement {
            id,
            kind: KnowledgeKind::Type,
            text: s.name.clone(),
            payload: Payload::Slot(s.name.clone()),
        })
        .collect();
    KnowledgeBase::from_elements(KnowledgeKind::Type, elements)
}

/// One element per (slot, value); text is `"slot: value"`.
pub fn build_type_value_kb(ontology: &Ontology) -> KnowledgeBase {
    let elements = ontology
        .slots
        .iter()
        .flat_map(|s| s.values.iter().map(move |v| SlotValue::new(&s.name, v)))
        .enumerate()
        .map(|(id, pair)| KnowledgeElement {
            id,
            kind: KnowledgeKind::TypeValue,
            text: format!("{}: {}", pair.slot, pair.value),
            payload: Payload::Pair(pair),
        })
        .collect();
    KnowledgeBase::from_elements(KnowledgeKind::TypeValue, elements)
}

/// Samples `n` user turns without replacement as demonstration elements.
pub fn build_training_kb(corpus: &[Dialog], n: usize, seed: u64) -> Result<KnowledgeBase> {
    let turns = user_turns(corpus);
    if n == 0 || n > turns.len() {
        return Err(Error::invalid(format!(
            "cannot sample {n} training examples from {} turns",
            turns.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picked = sample(&mut rng, turns.len(), n).into_vec();
    let elements = picked
        .into_iter()
        .enumerate()
        .map(|(id, i)| {
            let t = turns[i];
            let dialog = &corpus[t.dialog];
            let state = &dialog.states[t.turn];
            let context = render_context(dialog, t.turn);
            let linear = linearize_state(state, OrderPolicy::Annotation);
            KnowledgeElement {
                id,
                kind: KnowledgeKind::TrainingExample,
                text: render_example(&context, &linear),
                payload: Payload::Example {
                    context,
                    state: linear,
                    slots: state.slot_names(),
                },
            }
        })
        .collect();
    Ok(KnowledgeBase::from_elements(
        KnowledgeKind::TrainingExample,
        elements,
    ))
}

/// Binary relevance of every element of a TYPE or TYPE_VALUE base.
pub fn gold_labels(state: &DialogState, kb: &KnowledgeBase) -> Result<Vec<bool>> {
    kb.elements
        .iter()
        .map(|e| match &e.payload {
            Payload::Slot(slot) => Ok(state.get(slot).is_some()),
            Payload::Pair(pair) => Ok(state.contains(pair)),
            Payload::Example { .. } => Err(Error::invalid(
                "training-example bases use gold_training_example",
            )),
        })
        .collect()
}

/// `2|A∩B| / (|A|+|B|)`, with two empty sets scoring 1.
pub fn slot_f1(a: &BTreeSet<String>, b: &BTreeSet<String>) -> f64 {
    if a.is_empty() && b.is_empty() {
        return 1.0;
    }
    let inter = a.intersection(b).count();
    2.0 * inter as f64 / (a.len() + b.len()) as f64
}

/// Element whose slot-name set has the highest F1 with the state's slots;
/// ties go to the lowest id.
pub fn gold_training_example(state: &DialogState, kb: &KnowledgeBase) -> Result<usize> {
    if kb.kind != KnowledgeKind::TrainingExample || kb.is_empty() {
        return Err(Error::invalid(
            "gold_training_example needs a non-empty training-example base",
        ));
    }
    let slots = state.slot_names();
    let mut best = (0, f64::NEG_INFINITY);
    for e in &kb.elements {
        let Payload::Example { slots: other, .. } = &e.payload else {
            return Err(Error::invalid("element payload is not a training example"));
        };
        let f1 = slot_f1(&slots, other);
        if f1 > best.1 {
            best = (e.id, f1);
        }
    }
    Ok(best.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_synthetic, SlotSpec, SyntheticSpec};

    fn two_slot() -> Ontology {
        Ontology::new(vec![
            SlotSpec {
                name: "a-x".into(),
                values: vec!["p".into(), "q".into()],
            },
            SlotSpec {
                name: "a-y".into(),
                values: vec!["r".into()],
            },
        ])
        .unwrap()
    }

    #[test]
    fn type_and_value_enumeration() {
        let o = two_slot();
        let t = build_type_kb(&o);
        assert_eq!(
            t.elements
                .iter()
                .map(|e| e.text.as_str())
                .collect::<Vec<_>>(),
            ["a-x", "a-y"]
        );
        assert_eq!(t.top_k, 2);
        let tv = build_type_value_kb(&o);
        assert_eq!(
            tv.elements
                .iter()
                .map(|e| e.text.as_str())
                .collect::<Vec<_>>(),
            ["a-x: p", "a-x: q", "a-y: r"]
        );
    }

    #[test]
    fn synthetic_counts_and_defaults() {
        let c = generate_synthetic(&SyntheticSpec::default()).unwrap();
        let t = build_type_kb(&c.ontology);
        assert_eq!(t.len(), 12);
        assert_eq!(t.top_k, 10);
        let tv = build_type_value_kb(&c.ontology);
        assert_eq!(tv.len(), 72);
        assert_eq!(tv.top_k, 30);
        let texts: BTreeSet<&str> = tv.elements.iter().map(|e| e.text.as_str()).collect();
        assert_eq!(texts.len(), tv.len());
    }

    #[test]
    fn training_kb_exhaustive_and_deterministic() {
        let c = generate_synthetic(&SyntheticSpec {
            num_dialogs: 10,
            ..SyntheticSpec::default()
        })
        .unwrap();
        let total = user_turns(&c.dialogs).len();
        let kb = build_training_kb(&c.dialogs, total, 1).unwrap();
        assert_eq!(kb.top_k, 1);
        let texts: BTreeSet<&str> = kb.elements.iter().map(|e| e.text.as_str()).collect();
        assert_eq!(texts.len(), total);
        assert_eq!(kb, build_training_kb(&c.dialogs, total, 1).unwrap());
        assert!(build_training_kb(&c.dialogs, total + 1, 1).is_err());
    }

    #[test]
    fn labels_for_pairs() {
        let o = Ontology::new(vec![SlotSpec {
            name: "hotel-parking".into(),
            values: vec!["yes".into(), "no".into()],
        }])
        .unwrap();
        let tv = build_type_value_kb(&o);
        assert_eq!(
            gold_labels(&DialogState::new(), &tv).unwrap(),
            vec![false, false]
        );
        let mut s = DialogState::new();
        s.insert("hotel-parking", "yes");
        assert_eq!(gold_labels(&s, &tv).unwrap(), vec![true, false]);
    }

    #[test]
    fn f1_argmax_example() {
        let mk = |slots: &[&str]| Payload::Example {
            context: "c".into(),
            state: "s".into(),
            slots: slots.iter().map(|s| s.to_string()).collect(),
        };
        let kb = KnowledgeBase::from_elements(
            KnowledgeKind::TrainingExample,
            vec![
                KnowledgeElement {
                    id: 0,
                    kind: KnowledgeKind::TrainingExample,
                    text: "x".into(),
                    payload: mk(&["d"]),
                },
                KnowledgeElement {
                    id: 1,
                    kind: KnowledgeKind::TrainingExample,
                    text: "y".into(),
                    payload: mk(&["b", "c"]),
                },
            ],
        );
        let mut s = DialogState::new();
        s.insert("a", "1");
        s.insert("b", "1");
        assert_eq!(gold_training_example(&s, &kb).unwrap(), 1);
        assert!(gold_labels(&s, &kb).is_err());
        let empty: BTreeSet<String> = BTreeSet::new();
        assert_eq!(slot_f1(&empty, &empty), 1.0);
    }

    #[test]
    fn json_round_trip() {
        let tv = build_type_value_kb(&two_slot());
        assert_eq!(KnowledgeBase::parse(&tv.to_json()).unwrap(), tv);
        assert!(KnowledgeBase::parse("[]").is_err());
    }
}
