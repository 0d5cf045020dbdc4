//! Dialog corpora: the interchange format, a synthetic generator with a known
//! ontology, few-shot subsampling, and dialog-state linearization.

use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::path::Path;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::vocab::Vocabulary;

/// Separator between `slot=value` pairs in a linearized state.
pub const PAIR_SEPARATOR: &str = " ; ";
/// Separator between a slot and its value.
pub const VALUE_SEPARATOR: &str = "=";
/// Linearization of the empty state.
pub const EMPTY_STATE: &str = "none";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotSpec {
    pub name: String,
    pub values: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ontology {
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub domains: Vec<String>,
    pub slots: Vec<SlotSpec>,
}

fn has_separator(s: &str) -> bool {
    s.contains(';') || s.contains('=')
}

impl Ontology {
    /// Builds and validates an ontology; `domains` is derived from the slot
    /// name prefixes when not given.
    pub fn new(slots: Vec<SlotSpec>) -> Result<Self> {
        let mut onto = Ontology {
            domains: Vec::new(),
            slots,
        };
        onto.fill_domains();
        onto.validate()?;
        Ok(onto)
    }

    /// Converts a MultiWOZ-style `{"domain-slot": [values...]}` map. Keys are
    /// taken in sorted order.
    pub fn from_slot_map(map: &serde_json::Map<String, serde_json::Value>) -> Result<Self> {
        let mut keys: Vec<&String> = map.keys().collect();
        keys.sort();
        let mut slots = Vec::with_capacity(keys.len());
        for key in keys {
            let values = map[key]
                .as_array()
                .ok_or_else(|| Error::Ontology(format!("slot {key}: values must be a list")))?
                .iter()
                .map(|v| {
                    v.as_str()
                        .map(str::to_string)
                        .ok_or_else(|| Error::Ontology(format!("slot {key}: non-string value")))
                })
                .collect::<Result<Vec<_>>>()?;
            slots.push(SlotSpec {
                name: key.clone(),
                values,
            });
        }
        Ontology::new(slots)
    }

    fn fill_domains(&mut self) {
        if !self.domains.is_empty() {
            return;
        }
        let mut seen = HashSet::new();
        for slot in &self.slots {
            let domain = slot.name.split('-').next().unwrap_or(&slot.name);
            if seen.insert(domain.to_string()) {
                self.domains.push(domain.to_string());
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut names = HashSet::new();
        for slot in &self.slots {
            if slot.name.trim().is_empty() || slot.name.trim() != slot.name {
                return Err(Error::Ontology(format!("bad slot name {:?}", slot.name)));
            }
            if has_separator(&slot.name) {
                return Err(Error::Ontology(format!(
                    "slot name {:?} contains a reserved separator",
                    slot.name
                )));
            }
            if !names.insert(slot.name.as_str()) {
                return Err(Error::Ontology(format!("duplicate slot {:?}", slot.name)));
            }
            if slot.values.is_empty() {
                return Err(Error::Ontology(format!(
                    "slot {:?} has no values",
                    slot.name
                )));
            }
            let mut values = HashSet::new();
            for v in &slot.values {
                if v.trim().is_empty() || v.trim() != v || has_separator(v) {
                    return Err(Error::Ontology(format!(
                        "slot {:?} has malformed value {v:?}",
                        slot.name
                    )));
                }
                if !values.insert(v.as_str()) {
                    return Err(Error::Ontology(format!(
                        "slot {:?} lists value {v:?} twice",
                        slot.name
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn slot(&self, name: &str) -> Option<&SlotSpec> {
        self.slots.iter().find(|s| s.name == name)
    }

    pub fn has_slot(&self, name: &str) -> bool {
        self.slot(name).is_some()
    }

    /// Number of (slot, value) combinations.
    pub fn num_pairs(&self) -> usize {
        self.slots.iter().map(|s| s.values.len()).sum()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SlotValue {
    pub slot: String,
    pub value: String,
}

impl SlotValue {
    pub fn new(slot: impl Into<String>, value: impl Into<String>) -> Self {
        SlotValue {
            slot: slot.into(),
            value: value.into(),
        }
    }
}

impl fmt::Display for SlotValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{}{}", self.slot, VALUE_SEPARATOR, self.value)
    }
}

/// A slot → value mapping. Pairs are kept in annotation order; equality is
/// set equality.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DialogState {
    pairs: Vec<SlotValue>,
}

impl DialogState {
    pub fn new() -> Self {
        Self::default()
    }

    /// Builds a state, rejecting a slot that appears twice.
    pub fn from_pairs(pairs: impl IntoIterator<Item = SlotValue>) -> Result<Self> {
        let mut state = DialogState::new();
        for p in pairs {
            if state.get(&p.slot).is_some() {
                return Err(Error::invalid(format!("slot {} assigned twice", p.slot)));
            }
            state.pairs.push(p);
        }
        Ok(state)
    }

    /// Sets `slot` to `value`, overwriting in place if the slot is present.
    pub fn insert(&mut self, slot: impl Into<String>, value: impl Into<String>) {
        let slot = slot.into();
        let value = value.into();
        match self.pairs.iter_mut().find(|p| p.slot == slot) {
            Some(p) => p.value = value,
            None => self.pairs.push(SlotValue { slot, value }),
        }
    }

    pub fn get(&self, slot: &str) -> Option<&str> {
        self.pairs
            .iter()
            .find(|p| p.slot == slot)
            .map(|p| p.value.as_str())
    }

    pub fn contains(&self, pair: &SlotValue) -> bool {
        self.get(&pair.slot) == Some(pair.value.as_str())
    }

    pub fn pairs(&self) -> &[SlotValue] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn slot_names(&self) -> BTreeSet<String> {
        self.pairs.iter().map(|p| p.slot.clone()).collect()
    }

    pub fn sorted_pairs(&self) -> Vec<SlotValue> {
        let mut v = self.pairs.clone();
        v.sort();
        v
    }
}

impl PartialEq for DialogState {
    fn eq(&self, other: &Self) -> bool {
        self.len() == other.len() && self.pairs.iter().all(|p| other.contains(p))
    }
}

impl Eq for DialogState {}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Speaker {
    User,
    System,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub speaker: Speaker,
    pub text: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dialog {
    pub id: String,
    pub turns: Vec<Turn>,
    /// Cumulative state after each USER turn.
    pub states: Vec<DialogState>,
}

impl Dialog {
    pub fn num_user_turns(&self) -> usize {
        self.turns
            .iter()
            .filter(|t| t.speaker == Speaker::User)
            .count()
    }

    /// Position in `turns` of the `n`-th user turn.
    pub fn user_turn_position(&self, n: usize) -> Option<usize> {
        self.turns
            .iter()
            .enumerate()
            .filter(|(_, t)| t.speaker == Speaker::User)
            .nth(n)
            .map(|(i, _)| i)
    }

    pub fn validate(&self, ontology: &Ontology) -> Result<()> {
        let fail = |message: String| Error::Validation {
            dialog: self.id.clone(),
            message,
        };
        if self.turns.is_empty() {
            return Err(fail("dialog has no turns".into()));
        }
        for (i, turn) in self.turns.iter().enumerate() {
            let expected = if i % 2 == 0 {
                Speaker::User
            } else {
                Speaker::System
            };
            if turn.speaker != expected {
                return Err(fail(format!(
                    "turn {i} has speaker {:?}; speakers must alternate starting with USER",
                    turn.speaker
                )));
            }
        }
        let users = self.num_user_turns();
        if self.states.len() != users {
            return Err(fail(format!(
                "{} states for {users} user turns",
                self.states.len()
            )));
        }
        for (t, state) in self.states.iter().enumerate() {
            let mut seen = HashSet::new();
            for pair in state.pairs() {
                if !ontology.has_slot(&pair.slot) {
                    return Err(fail(format!(
                        "state {t} references unknown slot {:?}",
                        pair.slot
                    )));
                }
                if pair.value.trim().is_empty() || has_separator(&pair.value) {
                    return Err(fail(format!(
                        "state {t} has malformed value {:?} for slot {}",
                        pair.value, pair.slot
                    )));
                }
                if !seen.insert(pair.slot.as_str()) {
                    return Err(fail(format!("state {t} assigns slot {} twice", pair.slot)));
                }
            }
        }
        Ok(())
    }
}

/// Identifies one user turn inside a list of dialogs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TurnRef {
    pub dialog: usize,
    pub turn: usize,
}

/// Every user turn in corpus order.
pub fn user_turns(dialogs: &[Dialog]) -> Vec<TurnRef> {
    dialogs
        .iter()
        .enumerate()
        .flat_map(|(d, dialog)| {
            (0..dialog.states.len()).map(move |turn| TurnRef { dialog: d, turn })
        })
        .collect()
}

/// Token ids for the dialog history up to and including one user turn.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DialogContext {
    pub tokens: Vec<u32>,
}

impl DialogContext {
    /// Tokenizes history turns with speaker separators. Whole turns are
    /// dropped oldest-first to respect `max_len`; if the current turn alone is
    /// too long, its leading tokens are cut.
    pub fn build(
        dialog: &Dialog,
        user_turn: usize,
        vocab: &Vocabulary,
        max_len: usize,
    ) -> Result<Self> {
        let end = dialog.user_turn_position(user_turn).ok_or_else(|| {
            Error::invalid(format!("dialog {} has no user turn {user_turn}", dialog.id))
        })?;
        let mut pieces: Vec<Vec<u32>> = dialog.turns[..=end]
            .iter()
            .map(|turn| {
                let mut toks = vec![vocab.speaker_token(turn.speaker)];
                toks.extend(vocab.encode(&turn.text));
                toks
            })
            .collect();
        let mut total: usize = pieces.iter().map(Vec::len).sum();
        while total > max_len && pieces.len() > 1 {
            total -= pieces.remove(0).len();
        }
        let mut tokens: Vec<u32> = pieces.concat();
        if tokens.len() > max_len {
            tokens.drain(..tokens.len() - max_len);
        }
        Ok(DialogContext { tokens })
    }
}

/// A corpus as stored on disk.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Corpus {
    pub ontology: Ontology,
    pub dialogs: Vec<Dialog>,
}

#[derive(Deserialize)]
struct RawTurn {
    speaker: Speaker,
    text: String,
}

#[derive(Deserialize)]
struct RawDialog {
    id: String,
    turns: Vec<RawTurn>,
    states: Vec<Vec<(String, String)>>,
}

#[derive(Deserialize)]
struct RawCorpus {
    ontology: Ontology,
    dialogs: Vec<RawDialog>,
}

#[derive(Serialize)]
struct RawCorpusOut<'a> {
    ontology: &'a Ontology,
    dialogs: Vec<RawDialogOut<'a>>,
}

#[derive(Serialize)]
struct RawDialogOut<'a> {
    id: &'a str,
    turns: &'a [Turn],
    states: Vec<Vec<(&'a str, &'a str)>>,
}

fn json_locus(e: &serde_json::Error) -> String {
    format!("line {} column {}", e.line(), e.column())
}

impl Corpus {
    /// Parses and validates a corpus document against its embedded ontology.
    pub fn parse(text: &str) -> Result<Self> {
        let raw: RawCorpus = serde_json::from_str(text).map_err(|e| Error::Format {
            locus: json_locus(&e),
            message: e.to_string(),
        })?;
        let mut ontology = raw.ontology;
        ontology.fill_domains();
        ontology.validate()?;
        let dialogs = convert_dialogs(raw.dialogs)?;
        validate_dialogs(&dialogs, &ontology)?;
        Ok(Corpus { ontology, dialogs })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Corpus::parse(&text)
    }

    pub fn to_json(&self) -> String {
        let out = RawCorpusOut {
            ontology: &self.ontology,
            dialogs: self
                .dialogs
                .iter()
                .map(|d| RawDialogOut {
                    id: &d.id,
                    turns: &d.turns,
                    states: d
                        .states
                        .iter()
                        .map(|s| {
                            s.pairs()
                                .iter()
                                .map(|p| (p.slot.as_str(), p.value.as_str()))
                                .collect()
                        })
                        .collect(),
                })
                .collect(),
        };
        let mut text = serde_json::to_string_pretty(&out).expect("corpus serializes");
        text.push('\n');
        text
    }
}

fn convert_dialogs(raw: Vec<RawDialog>) -> Result<Vec<Dialog>> {
    raw.into_iter()
        .map(|d| {
            let states = d
                .states
                .into_iter()
                .enumerate()
                .map(|(t, pairs)| {
                    DialogState::from_pairs(pairs.into_iter().map(|(s, v)| SlotValue::new(s, v)))
                        .map_err(|e| Error::Validation {
                            dialog: d.id.clone(),
                            message: format!("state {t}: {e}"),
                        })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(Dialog {
                id: d.id,
                turns: d
                    .turns
                    .into_iter()
                    .map(|t| Turn {
                        speaker: t.speaker,
                        text: t.text,
                    })
                    .collect(),
                states,
            })
        })
        .collect()
}

fn validate_dialogs(dialogs: &[Dialog], ontology: &Ontology) -> Result<()> {
    let mut ids = HashSet::new();
    for d in dialogs {
        d.validate(ontology)?;
        if !ids.insert(d.id.as_str()) {
            return Err(Error::Validation {
                dialog: d.id.clone(),
                message: "duplicate dialog id".into(),
            });
        }
    }
    Ok(())
}

/// Loads the dialogs of a corpus file, validating them against `ontology`
/// rather than the ontology embedded in the file.
pub fn load_corpus(path: impl AsRef<Path>, ontology: &Ontology) -> Result<Vec<Dialog>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let raw: RawCorpus = serde_json::from_str(&text).map_err(|e| Error::Format {
        locus: format!("{}: {}", path.display(), json_locus(&e)),
        message: e.to_string(),
    })?;
    let dialogs = convert_dialogs(raw.dialogs)?;
    validate_dialogs(&dialogs, ontology)?;
    Ok(dialogs)
}

/// Reads an ontology from either a corpus document, a bare
/// `{"slots": [...]}` document, or a MultiWOZ-style slot → values map.
pub fn read_ontology(path: impl AsRef<Path>) -> Result<Ontology> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::Format {
        locus: format!("{}: {}", path.display(), json_locus(&e)),
        message: e.to_string(),
    })?;
    let obj = value.as_object().ok_or_else(|| Error::Format {
        locus: path.display().to_string(),
        message: "expected a JSON object".into(),
    })?;
    let onto_value = if let Some(o) = obj.get("ontology") {
        o.clone()
    } else if obj.contains_key("slots") {
        value.clone()
    } else {
        return Ontology::from_slot_map(obj);
    };
    let mut onto: Ontology = serde_json::from_value(onto_value).map_err(|e| Error::Format {
        locus: path.display().to_string(),
        message: e.to_string(),
    })?;
    onto.fill_domains();
    onto.validate()?;
    Ok(onto)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OrderPolicy {
    /// Keep the order in which pairs were annotated.
    #[default]
    Annotation,
    /// Sort pairs by slot name.
    Lexicographic,
}

pub fn linearize_state(state: &DialogState, policy: OrderPolicy) -> String {
    if state.is_empty() {
        return EMPTY_STATE.to_string();
    }
    let pairs = match policy {
        OrderPolicy::Annotation => state.pairs().to_vec(),
        OrderPolicy::Lexicographic => state.sorted_pairs(),
    };
    pairs
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join(PAIR_SEPARATOR)
}

/// Deterministic, order-preserving subsample of `⌈fraction·|corpus|⌉` dialogs.
pub fn few_shot_sample(corpus: &[Dialog], fraction: f64, seed: u64) -> Result<Vec<Dialog>> {
    if corpus.is_empty() {
        return Err(Error::invalid("cannot subsample an empty corpus"));
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::invalid(format!(
            "fraction {fraction} outside (0, 1]"
        )));
    }
    let n = few_shot_count(corpus.len(), fraction);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = sample(&mut rng, corpus.len(), n).into_vec();
    picked.sort_unstable();
    Ok(picked.into_iter().map(|i| corpus[i].clone()).collect())
}

/// `⌈fraction·n⌉`, tolerant of floating-point noise such as 0.05·200.
pub fn few_shot_count(n: usize, fraction: f64) -> usize {
    let raw = fraction * n as f64;
    let nearest = raw.round();
    let count = if (raw - nearest).abs() < 1e-9 {
        nearest
    } else {
        raw.ceil()
    };
    (count as usize).clamp(1, n)
}

/// Shape of a generated corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_dialogs: usize,
    pub num_domains: usize,
    pub slots_per_domain: usize,
    pub values_per_slot: usize,
    /// Inclusive range of user turns per dialog.
    pub min_user_turns: usize,
    pub max_user_turns: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            num_dialogs: 200,
            num_domains: 3,
            slots_per_domain: 4,
            values_per_slot: 6,
            min_user_turns: 2,
            max_user_turns: 4,
            seed: 7,
        }
    }
}

const DOMAIN_POOL: &[&str] = &[
    "hotel",
    "restaurant",
    "attraction",
    "train",
    "taxi",
    "hospital",
    "police",
    "bus",
];

struct SlotKind {
    name: &'static str,
    values: &'static [&'static str],
    templates: &'static [&'static str],
}

const SLOT_KINDS: &[SlotKind] = &[
    SlotKind {
        name: "area",
        values: &[
            "centre",
            "north",
            "south",
            "east",
            "west",
            "riverside",
            "northeast",
            "southwest",
        ],
        templates: &["in the {}", "located in the {}"],
    },
    SlotKind {
        name: "price",
        values: &[
            "cheap",
            "moderate",
            "expensive",
            "budget",
            "luxury",
            "affordable",
            "pricey",
            "economical",
        ],
        templates: &["that is {}", "with a {} price"],
    },
    SlotKind {
        name: "day",
        values: &[
            "monday",
            "tuesday",
            "wednesday",
            "thursday",
            "friday",
            "saturday",
            "sunday",
            "weekend",
        ],
        templates: &["on {}", "for {}"],
    },
    SlotKind {
        name: "people",
        values: &[
            "one", "two", "three", "four", "five", "six", "seven", "eight",
        ],
        templates: &["for {} people", "for a group of {}"],
    },
    SlotKind {
        name: "time",
        values: &[
            "morning",
            "noon",
            "afternoon",
            "evening",
            "night",
            "midnight",
            "dawn",
            "dusk",
        ],
        templates: &["at {}", "around {}"],
    },
    SlotKind {
        name: "food",
        values: &[
            "italian", "chinese", "indian", "french", "thai", "british", "korean", "mexican",
        ],
        templates: &["serving {} food", "with {} cuisine"],
    },
    SlotKind {
        name: "rating",
        values: &[
            "poor",
            "fair",
            "good",
            "great",
            "excellent",
            "superb",
            "average",
            "decent",
        ],
        templates: &["rated {}", "with a {} rating"],
    },
];

const INTRO_TEMPLATES: &[&str] = &[
    "i am looking for a {}",
    "i need a {}",
    "can you find me a {}",
];
const RESTATE_TEMPLATES: &[&str] = &["the {} should be", "i want the {} to be"];
const FOLLOW_TEMPLATES: &[&str] = &["also", "and it should be", "i would like it"];
const SYSTEM_ASK: &[&str] = &[
    "sure , any other preference ?",
    "what else do you need ?",
    "ok , anything else ?",
];
const SYSTEM_CLOSE: &[&str] = &["you are welcome , goodbye .", "glad to help ."];
const USER_CLOSE: &[&str] = &["thank you , that is all .", "great , thanks ."];

#[derive(Clone)]
struct KindInfo {
    name: String,
    values: Vec<String>,
    templates: Vec<String>,
}

fn kind_info(index: usize, values_per_slot: usize) -> KindInfo {
    match SLOT_KINDS.get(index) {
        Some(kind) => KindInfo {
            name: kind.name.to_string(),
            values: (0..values_per_slot)
                .map(|j| match kind.values.get(j) {
                    Some(v) => v.to_string(),
                    None => format!("{}{j}", kind.name),
                })
                .collect(),
            templates: kind.templates.iter().map(|t| t.to_string()).collect(),
        },
        None => {
            let name = format!("slot{index}");
            KindInfo {
                values: (0..values_per_slot)
                    .map(|j| format!("{name}v{j}"))
                    .collect(),
                templates: vec![format!("with {name} {{}}")],
                name,
            }
        }
    }
}

fn fill(template: &str, word: &str) -> String {
    template.replacen("{}", word, 1)
}

/// Generates a deterministic synthetic task-oriented corpus. Slot kinds (area,
/// price, ...) are shared across domains with identical value sets, so a
/// value alone does not identify its slot.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Corpus> {
    if spec.num_dialogs == 0
        || spec.num_domains == 0
        || spec.slots_per_domain == 0
        || spec.values_per_slot == 0
        || spec.min_user_turns == 0
    {
        return Err(Error::invalid("all synthetic counts must be at least 1"));
    }
    if spec.max_user_turns < spec.min_user_turns {
        return Err(Error::invalid("max_user_turns < min_user_turns"));
    }
    let num_kinds = SLOT_KINDS.len().max(spec.slots_per_domain);
    let kinds: Vec<KindInfo> = (0..num_kinds)
        .map(|i| kind_info(i, spec.values_per_slot))
        .collect();
    let domains: Vec<String> = (0..spec.num_domains)
        .map(|i| match DOMAIN_POOL.get(i) {
            Some(d) => d.to_string(),
            None => format!("domain{i}"),
        })
        .collect();
    // Per domain: kind indices, rotated so domains share some slot kinds.
    let domain_kinds: Vec<Vec<usize>> = (0..spec.num_domains)
        .map(|d| {
            (0..spec.slots_per_domain)
                .map(|j| (d + j) % num_kinds)
                .collect()
        })
        .collect();
    let mut slots = Vec::new();
    for (d, domain) in domains.iter().enumerate() {
        for &k in &domain_kinds[d] {
            slots.push(SlotSpec {
                name: format!("{domain}-{}", kinds[k].name),
                values: kinds[k].values.clone(),
            });
        }
    }
    let ontology = Ontology {
        domains: domains.clone(),
        slots,
    };
    ontology.validate()?;

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut dialogs = Vec::with_capacity(spec.num_dialogs);
    for n in 0..spec.num_dialogs {
        let user_turns = rng.gen_range(spec.min_user_turns..=spec.max_user_turns);
        let two_domains = spec.num_domains >= 2 && user_turns >= 2 && rng.gen_bool(0.4);
        let chosen: Vec<usize> = if two_domains {
            sample(&mut rng, spec.num_domains, 2).into_vec()
        } else {
            vec![rng.gen_range(0..spec.num_domains)]
        };
        // Goal: (domain, kind, value index) triples, grouped by domain.
        let mut goal: Vec<(usize, usize, usize)> = Vec::new();
        for &d in &chosen {
            let max_slots = spec.slots_per_domain.min(3);
            let m = rng.gen_range(1..=max_slots);
            for j in sample(&mut rng, spec.slots_per_domain, m).into_vec() {
                let k = domain_kinds[d][j];
                goal.push((d, k, rng.gen_range(0..spec.values_per_slot)));
            }
        }
        // Split the goal into contiguous non-empty chunks, one per active turn.
        let active = goal.len().min(user_turns);
        let mut cuts: Vec<usize> = if active > 1 {
            sample(&mut rng, goal.len() - 1, active - 1)
                .into_iter()
                .map(|c| c + 1)
                .collect()
        } else {
            Vec::new()
        };
        cuts.sort_unstable();
        let mut chunks: Vec<&[(usize, usize, usize)]> = Vec::new();
        let mut start = 0;
        for &c in &cuts {
            chunks.push(&goal[start..c]);
            start = c;
        }
        chunks.push(&goal[start..]);

        let mut turns = Vec::new();
        let mut states = Vec::new();
        let mut state = DialogState::new();
        let mut current_domain: Option<usize> = None;
        for t in 0..user_turns {
            let text = match chunks.get(t) {
                Some(chunk) => {
                    let mut phrases: Vec<String> = Vec::new();
                    let mut i = 0;
                    while i < chunk.len() {
                        let d = chunk[i].0;
                        let mut mentions = Vec::new();
                        while i < chunk.len() && chunk[i].0 == d {
                            let (_, k, v) = chunk[i];
                            let kind = &kinds[k];
                            let template = kind.templates.choose(&mut rng).expect("templates");
                            mentions.push(fill(template, &kind.values[v]));
                            state.insert(
                                format!("{}-{}", domains[d], kind.name),
                                kind.values[v].clone(),
                            );
                            i += 1;
                        }
                        let lead = if current_domain != Some(d) {
                            fill(
                                INTRO_TEMPLATES.choose(&mut rng).expect("intro"),
                                &domains[d],
                            )
                        } else if rng.gen_bool(0.5) {
                            fill(
                                RESTATE_TEMPLATES.choose(&mut rng).expect("restate"),
                                &domains[d],
                            )
                        } else {
                            FOLLOW_TEMPLATES
                                .choose(&mut rng)
                                .expect("follow")
                                .to_string()
                        };
                        current_domain = Some(d);
                        phrases.push(format!("{lead} {}", mentions.join(" and ")));
                    }
                    format!("{} .", phrases.join(" and "))
                }
                None => USER_CLOSE.choose(&mut rng).expect("close").to_string(),
            };
            turns.push(Turn {
                speaker: Speaker::User,
                text,
            });
            let mut snapshot = state.clone();
            snapshot.pairs.sort();
            states.push(snapshot);
            let reply = if t + 1 < user_turns {
                SYSTEM_ASK.choose(&mut rng).expect("ask")
            } else {
                SYSTEM_CLOSE.choose(&mut rng).expect("close")
            };
            turns.push(Turn {
                speaker: Speaker::System,
                text: reply.to_string(),
            });
        }
        dialogs.push(Dialog {
            id: format!("syn-{:05}", n),
            turns,
            states,
        });
    }
    Ok(Corpus { ontology, dialogs })
}
