//! Replays the checked-in fuzz seed corpora through the same entry points
//! and invariants as the fuzz targets, on stable.

use std::path::PathBuf;

use kgdst::corpus::{linearize_state, Corpus, Ontology, OrderPolicy, SlotSpec};
use kgdst::eval::parse_linearized_state;
use kgdst::knowledge::{build_type_kb, build_type_value_kb, KnowledgeBase};
use kgdst::model::vocab::{tokenize, BOS, EOS, PAD};
use kgdst::model::{Checkpoint, Vocabulary};

fn seeds(target: &str) -> Vec<Vec<u8>> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../fuzz/corpus")
        .join(target);
    let mut files: Vec<PathBuf> = std::fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| e.unwrap().path())
        .collect();
    files.sort();
    assert!(!files.is_empty(), "no seeds for {target}");
    files.iter().map(|p| std::fs::read(p).unwrap()).collect()
}

#[test]
fn corpus_parse() {
    let mut parsed = 0;
    for data in seeds("corpus_parse") {
        let Ok(text) = std::str::from_utf8(&data) else {
            continue;
        };
        if let Ok(corpus) = Corpus::parse(text) {
            assert_eq!(Corpus::parse(&corpus.to_json()).unwrap(), corpus);
            parsed += 1;
        }
    }
    assert!(parsed >= 2);
}

#[test]
fn state_parse() {
    let slot = |name: &str, values: &[&str]| SlotSpec {
        name: name.into(),
        values: values.iter().map(|v| v.to_string()).collect(),
    };
    let onto = Ontology::new(vec![
        slot("hotel-area", &["north", "south", "city centre"]),
        slot("hotel-stars", &["3", "4"]),
        slot("train-leaveat", &["05:30", "don't care"]),
    ])
    .unwrap();
    for data in seeds("state_parse") {
        let parsed = parse_linearized_state(&String::from_utf8_lossy(&data), &onto);
        let again = parse_linearized_state(
            &linearize_state(&parsed.state, OrderPolicy::Annotation),
            &onto,
        );
        assert!(again.failures.is_empty());
        assert_eq!(again.state, parsed.state);
    }
}

#[test]
fn kb_parse() {
    for data in seeds("kb_parse") {
        let kb = KnowledgeBase::parse(std::str::from_utf8(&data).unwrap()).unwrap();
        assert_eq!(KnowledgeBase::parse(&kb.to_json()).unwrap(), kb);
    }
}

#[test]
fn checkpoint_decode() {
    let mut decoded = 0;
    for data in seeds("checkpoint_decode") {
        if let Ok(ck) = Checkpoint::decode(&data) {
            assert_eq!(Checkpoint::decode(&ck.encode()).unwrap(), ck);
            ck.model().unwrap();
            decoded += 1;
        }
    }
    assert_eq!(decoded, 1);
}

#[test]
fn slot_map() {
    for data in seeds("slot_map") {
        let Ok(serde_json::Value::Object(map)) = serde_json::from_slice(&data) else {
            continue;
        };
        if let Ok(onto) = Ontology::from_slot_map(&map) {
            assert_eq!(build_type_kb(&onto).len(), onto.slots.len());
            assert_eq!(build_type_value_kb(&onto).len(), onto.num_pairs());
        }
    }
}

#[test]
fn tokenize_seeds() {
    for data in seeds("tokenize") {
        let text = String::from_utf8_lossy(&data);
        let tokens = tokenize(&text);
        let vocab = Vocabulary::build([text.as_ref()]);
        let ids = vocab.encode(&text);
        assert_eq!(ids.len(), tokens.len());
        let kept: Vec<&str> = tokens
            .into_iter()
            .filter(|t| !matches!(vocab.id(t), PAD | BOS | EOS))
            .collect();
        assert_eq!(vocab.decode(&ids), kept.join(" "));
    }
}
