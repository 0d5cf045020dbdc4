use std::collections::BTreeSet;

use kgdst::corpus::{
    few_shot_count, few_shot_sample, generate_synthetic, DialogState, Ontology, SlotSpec,
    SyntheticSpec,
};
use kgdst::eval::jga;
use kgdst::knowledge::{
    build_training_kb, build_type_kb, build_type_value_kb, gold_labels, gold_training_example,
    slot_f1, Payload,
};
use proptest::prelude::*;

fn ontology() -> impl Strategy<Value = Ontology> {
    prop::collection::vec(prop::collection::btree_set("[a-z]{1,4}", 1..8), 1..10).prop_map(
        |slots| {
            Ontology::new(
                slots
                    .into_iter()
                    .enumerate()
                    .map(|(i, vs)| SlotSpec {
                        name: format!("d-s{i}"),
                        values: vs.into_iter().collect(),
                    })
                    .collect(),
            )
            .unwrap()
        },
    )
}

fn state_over(onto: &Ontology, picks: &[(usize, bool)]) -> DialogState {
    let mut st = DialogState::new();
    for (slot, &(v, keep)) in onto.slots.iter().zip(picks) {
        if keep {
            st.insert(
                slot.name.clone(),
                slot.values[v % slot.values.len()].clone(),
            );
        }
    }
    st
}

proptest! {
    #[test]
    fn knowledge_base_sizes(onto in ontology()) {
        let t = build_type_kb(&onto);
        let tv = build_type_value_kb(&onto);
        prop_assert_eq!(t.len(), onto.slots.len());
        prop_assert_eq!(tv.len(), onto.slots.iter().map(|s| s.values.len()).sum::<usize>());
        // ids are positions
        for (i, e) in tv.elements.iter().enumerate() {
            prop_assert_eq!(e.id, i);
        }
        let pairs: BTreeSet<String> = tv.elements.iter().map(|e| e.text.clone()).collect();
        prop_assert_eq!(pairs.len(), tv.len());
    }

    #[test]
    fn gold_labels_count_the_state(
        onto in ontology(),
        picks in prop::collection::vec((0usize..8, any::<bool>()), 10),
    ) {
        let st = state_over(&onto, &picks);
        let t = gold_labels(&st, &build_type_kb(&onto)).unwrap();
        let tv = gold_labels(&st, &build_type_value_kb(&onto)).unwrap();
        prop_assert_eq!(t.iter().filter(|&&y| y).count(), st.slot_names().len());
        prop_assert_eq!(tv.iter().filter(|&&y| y).count(), st.len());
        let ids = build_type_value_kb(&onto).gold_ids(&st).unwrap();
        prop_assert_eq!(ids.len(), st.len());
    }

    /// Fixing one wrong prediction never lowers JGA.
    #[test]
    fn jga_is_monotone_under_correction(
        onto in ontology(),
        rows in prop::collection::vec(
            (prop::collection::vec((0usize..8, any::<bool>()), 10), prop::collection::vec((0usize..8, any::<bool>()), 10)),
            1..20,
        ),
        fix in any::<prop::sample::Index>(),
    ) {
        let golds: Vec<DialogState> = rows.iter().map(|(g, _)| state_over(&onto, g)).collect();
        let mut preds: Vec<DialogState> = rows.iter().map(|(_, p)| state_over(&onto, p)).collect();
        let before = jga(&preds, &golds).unwrap();
        let hits = preds.iter().zip(&golds).filter(|(p, g)| p == g).count();
        prop_assert_eq!(before, hits as f64 / golds.len() as f64);
        let i = fix.index(golds.len());
        preds[i] = golds[i].clone();
        prop_assert!(jga(&preds, &golds).unwrap() >= before);
    }

    /// Pair order inside a state does not matter.
    #[test]
    fn jga_ignores_pair_order(onto in ontology(), picks in prop::collection::vec((0usize..8, any::<bool>()), 10)) {
        let st = state_over(&onto, &picks);
        let mut rev = st.pairs().to_vec();
        rev.reverse();
        let rev = DialogState::from_pairs(rev).unwrap();
        prop_assert_eq!(jga(&[rev], &[st]).unwrap(), 1.0);
    }

    #[test]
    fn few_shot_is_a_seeded_subset(n in 1usize..80, fraction in 0.001f64..=1.0, seed in any::<u64>()) {
        let corpus = generate_synthetic(&SyntheticSpec { num_dialogs: n, ..SyntheticSpec::default() }).unwrap();
        let kept = few_shot_sample(&corpus.dialogs, fraction, seed).unwrap();
        prop_assert_eq!(kept.len(), few_shot_count(n, fraction));
        prop_assert!(kept.len() as f64 >= (fraction * n as f64 - 1e-9).min(n as f64));
        let ids: Vec<&str> = kept.iter().map(|d| d.id.as_str()).collect();
        let unique: BTreeSet<&str> = ids.iter().copied().collect();
        prop_assert_eq!(unique.len(), ids.len());
        // order-preserving subsequence
        let mut it = corpus.dialogs.iter();
        for d in &kept {
            prop_assert!(it.any(|c| c == d));
        }
        prop_assert_eq!(few_shot_sample(&corpus.dialogs, fraction, seed).unwrap(), kept);
    }

    #[test]
    fn slot_f1_matches_definition(
        a in prop::collection::btree_set("[a-c]", 0..3),
        b in prop::collection::btree_set("[a-c]", 0..3),
    ) {
        let f = slot_f1(&a, &b);
        prop_assert_eq!(f, slot_f1(&b, &a));
        prop_assert!((0.0..=1.0).contains(&f));
        if a == b {
            prop_assert_eq!(f, 1.0);
        }
        if !a.is_empty() && a.is_disjoint(&b) {
            prop_assert_eq!(f, 0.0);
        }
    }
}

#[test]
fn few_shot_count_examples() {
    assert_eq!(few_shot_count(200, 0.05), 10);
    assert_eq!(few_shot_count(200, 0.01), 2);
    assert_eq!(few_shot_count(160, 0.05), 8);
    assert_eq!(few_shot_count(7, 0.5), 4);
    assert_eq!(few_shot_count(3, 0.001), 1);
    assert!(few_shot_sample(&[], 0.5, 0).is_err());
}

#[test]
fn gold_training_example_matches_brute_force() {
    let corpus = generate_synthetic(&SyntheticSpec {
        num_dialogs: 40,
        ..SyntheticSpec::default()
    })
    .unwrap();
    let kb = build_training_kb(&corpus.dialogs, 30, 1).unwrap();
    for d in &corpus.dialogs {
        for st in &d.states {
            let slots = st.slot_names();
            let f1s: Vec<f64> = kb
                .elements
                .iter()
                .map(|e| match &e.payload {
                    Payload::Example { slots: s, .. } => {
                        // independent F1 via precision and recall
                        if slots.is_empty() && s.is_empty() {
                            1.0
                        } else if slots.is_empty() || s.is_empty() {
                            0.0
                        } else {
                            let tp = slots.intersection(s).count() as f64;
                            let (p, r) = (tp / s.len() as f64, tp / slots.len() as f64);
                            if tp == 0.0 {
                                0.0
                            } else {
                                2.0 * p * r / (p + r)
                            }
                        }
                    }
                    _ => unreachable!(),
                })
                .collect();
            let best = f1s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let want = f1s.iter().position(|&f| (f - best).abs() < 1e-12).unwrap();
            let got = gold_training_example(st, &kb).unwrap();
            assert!((f1s[got] - best).abs() < 1e-12);
            assert_eq!(got, want);
        }
    }
}
