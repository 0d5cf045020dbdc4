//! Word-level tokenizer with reserved control tokens.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Speaker};
use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const USER: u32 = 3;
pub const SYSTEM: u32 = 4;
pub const KNOWLEDGE_SEP: u32 = 5;
pub const UNK: u32 = 6;

const RESERVED: [&str; 7] = [
    "<pad>", "<bos>", "<eos>", "<user>", "<system>", "<k>", "<unk>",
];

/// Characters split off as standalone tokens. `-`, `'` and `_` stay inside
/// words so slot names like `hotel-area` and values like `don't` are atomic.
const PUNCTUATION: &[char] = &[',', '.', '?', '!', ':', ';', '=', '(', ')', '"'];

/// Splits text on whitespace and punctuation.
pub fn tokenize(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    for word in text.split_whitespace() {
        if RESERVED.contains(&word) {
            out.push(word);
            continue;
        }
        let mut start = 0;
        for (i, c) in word.char_indices() {
            if PUNCTUATION.contains(&c) {
                if start < i {
                    out.push(&word[start..i]);
                }
                out.push(&word[i..i + c.len_utf8()]);
                start = i + c.len_utf8();
            }
        }
        if start < word.len() {
            out.push(&word[start..]);
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl TryFrom<Vec<String>> for Vocabulary {
    type Error = Error;

    fn try_from(tokens: Vec<String>) -> Result<Self> {
        Vocabulary::from_tokens(tokens)
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.tokens
    }
}

impl Vocabulary {
    /// Restores a vocabulary from its id-ordered token list.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < RESERVED.len() || tokens[..RESERVED.len()] != RESERVED {
            return Err(Error::invalid(
                "vocabulary does not start with the reserved tokens",
            ));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::invalid(format!("duplicate vocabulary entry {t:?}")));
            }
        }
        Ok(Vocabulary { tokens, index })
    }

    /// Builds a vocabulary from texts; words are sorted so the id assignment
    /// does not depend on text order.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut words = BTreeSet::new();
        for text in texts {
            for tok in tokenize(text) {
                if !RESERVED.contains(&tok) {
                    words.insert(tok.to_string());
                }
            }
        }
        let tokens: Vec<String> = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(words)
            .collect();
        Vocabulary::from_tokens(tokens).expect("reserved tokens are distinct")
    }

    /// Vocabulary covering every utterance, slot, value and the state syntax.
    pub fn for_corpus(corpus: &Corpus) -> Self {
        let mut texts: Vec<String> = vec!["none = ; : state".to_string()];
        for slot in &corpus.ontology.slots {
            texts.push(slot.name.clone());
            texts.extend(slot.values.iter().cloned());
        }
        for d in &corpus.dialogs {
            texts.extend(d.turns.iter().map(|t| t.text.clone()));
        }
        Vocabulary::build(texts.iter().map(String::as_str))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> &str {
        self.tokens
            .get(id as usize)
            .map(String::as_str)
            .unwrap_or(RESERVED[UNK as usize])
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        tokenize(text).into_iter().map(|t| self.id(t)).collect()
    }

    /// Joins tokens with single spaces, dropping PAD/BOS/EOS.
    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .filter(|&&id| !matches!(id, PAD | BOS | EOS))
            .map(|&id| self.token(id))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn speaker_token(&self, speaker: Speaker) -> u32 {
        match speaker {
            Speaker::User => USER,
            Speaker::System => SYSTEM,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splits_punctuation_but_keeps_slot_names() {
        assert_eq!(
            tokenize("hotel-area=west ; hotel-parking=don't care"),
            vec![
                "hotel-area",
                "=",
                "west",
                ";",
                "hotel-parking",
                "=",
                "don't",
                "care"
            ]
        );
        assert_eq!(
            tokenize("ok , anything else?"),
            vec!["ok", ",", "anything", "else", "?"]
        );
        assert_eq!(tokenize("<user> hi"), vec!["<user>", "hi"]);
    }

    #[test]
    fn reserved_ids_are_fixed() {
        let v = Vocabulary::build(["a b c"]);
        assert_eq!(v.id("<pad>"), PAD);
        assert_eq!(v.id("<k>"), KNOWLEDGE_SEP);
        assert_eq!(v.id("never-seen"), UNK);
        assert_eq!(v.encode("<user> a"), vec![USER, v.id("a")]);
        for (i, t) in v.tokens.iter().enumerate() {
            assert_eq!(v.id(t), i as u32);
        }
    }

    #[test]
    fn serde_round_trip() {
        let v = Vocabulary::build(["x y z"]);
        let json = serde_json::to_string(&v).unwrap();
        let back: Vocabulary = serde_json::from_str(&json).unwrap();
        assert_eq!(v, back);
        assert!(serde_json::from_str::<Vocabulary>("[\"a\"]").is_err());
    }
}
