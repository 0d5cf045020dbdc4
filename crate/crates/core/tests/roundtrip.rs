use kgdst::corpus::{
    generate_synthetic, linearize_state, load_corpus, Corpus, Dialog, DialogState, Ontology,
    OrderPolicy, SlotSpec, SlotValue, Speaker, SyntheticSpec, Turn,
};
use kgdst::eval::parse_linearized_state;
use kgdst::knowledge::{build_training_kb, build_type_kb, build_type_value_kb, KnowledgeBase};
use kgdst::model::{Checkpoint, Model, ModelConfig, Vocabulary};
use kgdst::training::{ModelDims, TrainConfig, Trainer};
use proptest::prelude::*;

fn word() -> impl Strategy<Value = String> {
    "[a-z]{1,6}"
}

/// Values may contain spaces and punctuation other than the separators.
fn value() -> impl Strategy<Value = String> {
    prop::collection::vec(
        prop_oneof![word(), Just("don't".to_string()), Just("5:30".to_string())],
        1..4,
    )
    .prop_map(|ws| ws.join(" "))
}

fn ontology() -> impl Strategy<Value = Ontology> {
    prop::collection::vec(prop::collection::btree_set(value(), 1..6), 1..8).prop_map(|slots| {
        Ontology::new(
            slots
                .into_iter()
                .enumerate()
                .map(|(i, vs)| SlotSpec {
                    name: format!("dom{}-slot{i}", i % 3),
                    values: vs.into_iter().collect(),
                })
                .collect(),
        )
        .unwrap()
    })
}

/// An ontology and a random valid state over it, in random annotation order.
fn state() -> impl Strategy<Value = (Ontology, DialogState)> {
    ontology().prop_flat_map(|onto| {
        let n = onto.slots.len();
        let picks = prop::collection::vec((any::<prop::sample::Index>(), any::<bool>()), n);
        let order = Just((0..n).collect::<Vec<_>>()).prop_shuffle();
        (Just(onto), picks, order).prop_map(|(onto, picks, order)| {
            let mut st = DialogState::new();
            for i in order {
                let (idx, keep) = picks[i];
                if keep {
                    let slot = &onto.slots[i];
                    st.insert(slot.name.clone(), idx.get(&slot.values).clone());
                }
            }
            (onto, st)
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn linearize_then_parse_is_identity((onto, st) in state()) {
        for policy in [OrderPolicy::Annotation, OrderPolicy::Lexicographic] {
            let text = linearize_state(&st, policy);
            let parsed = parse_linearized_state(&text, &onto);
            prop_assert!(parsed.failures.is_empty());
            prop_assert_eq!(&parsed.state, &st);
            if policy == OrderPolicy::Annotation {
                prop_assert_eq!(parsed.state.pairs(), st.pairs());
            }
        }
    }

    /// Lexicographic linearization is injective on valid states.
    #[test]
    fn lexicographic_is_canonical((_onto, st) in state()) {
        let mut reversed = st.pairs().to_vec();
        reversed.reverse();
        let other = DialogState::from_pairs(reversed).unwrap();
        prop_assert_eq!(
            linearize_state(&st, OrderPolicy::Lexicographic),
            linearize_state(&other, OrderPolicy::Lexicographic)
        );
    }
}

fn dialogs_for(onto: &Ontology, states: &[DialogState]) -> Vec<Dialog> {
    states
        .iter()
        .enumerate()
        .map(|(i, st)| Dialog {
            id: format!("d{i}"),
            turns: vec![
                Turn {
                    speaker: Speaker::User,
                    text: format!("hello {i} ; with \"quotes\" and unicode é"),
                },
                Turn {
                    speaker: Speaker::System,
                    text: "ok".into(),
                },
                Turn {
                    speaker: Speaker::User,
                    text: "thanks".into(),
                },
            ],
            states: vec![DialogState::new(), st.clone()],
        })
        .filter(|d| d.validate(onto).is_ok())
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn corpus_json_round_trip((onto, st) in state()) {
        let dialogs = dialogs_for(&onto, &[st.clone(), DialogState::new(), st]);
        let corpus = Corpus { ontology: onto, dialogs };
        let text = corpus.to_json();
        let back = Corpus::parse(&text).unwrap();
        prop_assert_eq!(&back, &corpus);
        prop_assert_eq!(back.to_json(), text);
        for (a, b) in back.dialogs.iter().zip(&corpus.dialogs) {
            for (sa, sb) in a.states.iter().zip(&b.states) {
                prop_assert_eq!(sa.pairs(), sb.pairs());
            }
        }
    }

    #[test]
    fn synthetic_corpora_validate_and_round_trip(
        dialogs in 1usize..30,
        domains in 1usize..4,
        slots in 1usize..5,
        values in 1usize..7,
        min_turns in 1usize..4,
        extra in 0usize..3,
        seed in any::<u64>(),
    ) {
        let spec = SyntheticSpec {
            num_dialogs: dialogs,
            num_domains: domains,
            slots_per_domain: slots,
            values_per_slot: values,
            min_user_turns: min_turns,
            max_user_turns: min_turns + extra,
            seed,
        };
        let corpus = generate_synthetic(&spec).unwrap();
        prop_assert_eq!(corpus.dialogs.len(), dialogs);
        prop_assert_eq!(corpus.ontology.slots.len(), domains * slots);
        for d in &corpus.dialogs {
            d.validate(&corpus.ontology).unwrap();
            for w in d.states.windows(2) {
                // cumulative: nothing is ever dropped
                for p in w[0].pairs() {
                    prop_assert!(w[1].get(&p.slot).is_some());
                }
            }
        }
        let text = corpus.to_json();
        prop_assert_eq!(Corpus::parse(&text).unwrap().to_json(), text);
        prop_assert_eq!(generate_synthetic(&spec).unwrap(), corpus);
    }
}

#[test]
fn corpus_file_round_trip() {
    let corpus = generate_synthetic(&SyntheticSpec::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.json");
    kgdst::fsio::write_atomic(&path, corpus.to_json().as_bytes()).unwrap();
    assert_eq!(Corpus::read(&path).unwrap(), corpus);
    assert_eq!(
        load_corpus(&path, &corpus.ontology).unwrap(),
        corpus.dialogs
    );
}

#[test]
fn every_synthetic_value_is_reachable() {
    let corpus = generate_synthetic(&SyntheticSpec::default()).unwrap();
    let kb = build_type_value_kb(&corpus.ontology);
    let mut seen = vec![false; kb.len()];
    for d in &corpus.dialogs {
        for s in &d.states {
            for id in kb.gold_ids(s).unwrap() {
                seen[id] = true;
            }
        }
    }
    assert!(seen.iter().all(|&x| x));
}

#[test]
fn knowledge_base_round_trip() {
    let corpus = generate_synthetic(&SyntheticSpec {
        num_dialogs: 20,
        ..SyntheticSpec::default()
    })
    .unwrap();
    for kb in [
        build_type_kb(&corpus.ontology),
        build_type_value_kb(&corpus.ontology),
        build_training_kb(&corpus.dialogs, 15, 2).unwrap(),
    ] {
        let back = KnowledgeBase::parse(&kb.to_json()).unwrap();
        assert_eq!(back, kb);
    }
}

#[test]
fn vocabulary_round_trip() {
    let corpus = generate_synthetic(&SyntheticSpec::default()).unwrap();
    let vocab = Vocabulary::for_corpus(&corpus);
    let back: Vocabulary = serde_json::from_str(&serde_json::to_string(&vocab).unwrap()).unwrap();
    assert_eq!(back, vocab);
    let pair = SlotValue::new("hotel-area", "north");
    let ids = vocab.encode(&pair.to_string());
    assert_eq!(vocab.decode(&ids), "hotel-area = north");
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let vocab = Vocabulary::build(["a b c d"]);
    let mut cfg = ModelConfig::new(vocab.len());
    cfg.d_model = 8;
    cfg.heads = 2;
    cfg.ffn_dim = 8;
    cfg.retrieval_head = true;
    let model = Model::new(cfg, 1).unwrap();
    let ck = Checkpoint::from_model(&model, &vocab, serde_json::json!({"note": "x"}));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("sub/m.ckpt");
    ck.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back, ck);
    assert_eq!(back.encode(), ck.encode());
    assert_eq!(back.model().unwrap().params, model.params);
}

fn small_trainer(steps: usize) -> (Trainer, Corpus) {
    let corpus = generate_synthetic(&SyntheticSpec {
        num_dialogs: 12,
        ..SyntheticSpec::default()
    })
    .unwrap();
    let config = TrainConfig {
        steps,
        batch_size: 4,
        lr: 1e-3,
        top_k: Some(4),
        eval_every: 3,
        seed: 9,
        model: ModelDims {
            d_model: 16,
            heads: 2,
            enc_layers: 1,
            dec_layers: 1,
            ffn_dim: 32,
            max_enc_len: 128,
            max_dec_len: 40,
            tie_embeddings: true,
        },
        ..TrainConfig::default()
    };
    let vocab = Vocabulary::for_corpus(&corpus);
    let kb = build_type_value_kb(&corpus.ontology);
    let t = Trainer::new(
        config,
        vocab,
        corpus.ontology.clone(),
        &corpus.dialogs[..9],
        &corpus.dialogs[9..],
        Some(kb),
    )
    .unwrap();
    (t, corpus)
}

#[test]
fn resume_matches_an_uninterrupted_run() {
    let (mut full, corpus) = small_trainer(8);
    full.run().unwrap();

    let (mut first, _) = small_trainer(8);
    for _ in 0..4 {
        first.train_step().unwrap();
    }
    let bytes = first.checkpoint().encode();
    let ck = Checkpoint::decode(&bytes).unwrap();
    let mut resumed = Trainer::resume(
        &ck,
        corpus.ontology.clone(),
        &corpus.dialogs[..9],
        &corpus.dialogs[9..],
        Some(build_type_value_kb(&corpus.ontology)),
    )
    .unwrap();
    resumed.run().unwrap();
    assert_eq!(resumed.log(), full.log());
    assert_eq!(resumed.checkpoint().encode(), full.checkpoint().encode());
}
