use std::collections::BTreeSet;

use kgdst::corpus::{DialogContext, DialogState};
use kgdst::integration::{integrate, oracle_integrate, Arrangement};
use kgdst::knowledge::build_type_value_kb;
use kgdst::model::{Graph, ParamSet, Tensor};
use kgdst::retrieval::{
    rank_scores, retrieval_loss, retrieval_loss_grad, retrieval_metrics, KnowledgeIndex,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Direct transcription of the binary cross-entropy on σ(s).
fn hand_bce(scores: &[f64], labels: &[bool]) -> f64 {
    scores
        .iter()
        .zip(labels)
        .map(|(&s, &y)| {
            let p = 1.0 / (1.0 + (-s).exp());
            if y {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum()
}

#[test]
fn loss_matches_hand_computed_bce() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..50 {
        let n = rng.gen_range(1..40);
        let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(-8.0..8.0)).collect();
        let labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.3)).collect();
        let ours = retrieval_loss(&scores, &labels).unwrap();
        assert!((ours - hand_bce(&scores, &labels)).abs() <= 1e-10);

        // closed form against autograd
        let mut ps = ParamSet::new();
        ps.add("s", Tensor::row_vector(scores.clone()));
        let mut g = Graph::new(&ps);
        let s = g.param(0);
        let y = labels.iter().map(|&b| b as u8 as f64).collect();
        let loss = g.bce_with_logits(s, y, vec![1.0; n]);
        assert!((g.value(loss).item() - ours).abs() <= 1e-10);
        let auto = g.backward(loss).unwrap().into_params();
        for (a, c) in auto[0]
            .data
            .iter()
            .zip(retrieval_loss_grad(&scores, &labels))
        {
            assert!((a - c).abs() <= 1e-10);
        }
    }
}

#[test]
fn loss_is_stable_for_large_scores() {
    let l = retrieval_loss(&[800.0, -800.0], &[true, false]).unwrap();
    assert!(l.is_finite() && l < 1e-300);
    let l = retrieval_loss(&[-800.0], &[true]).unwrap();
    assert!((l - 800.0).abs() < 1e-9);
}

/// Brute force: sort every id by (score desc, id asc) and cut at k.
fn brute_top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let mut ids: Vec<usize> = (0..scores.len()).collect();
    ids.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    ids.truncate(k);
    ids
}

#[test]
fn top_k_matches_brute_force_with_ties() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut tied_instances = 0;
    for _ in 0..1000 {
        let n = rng.gen_range(1..60);
        let d = rng.gen_range(1..6);
        // Small integer coordinates make exactly equal scores common.
        let vectors = Tensor::new(
            n,
            d,
            (0..n * d).map(|_| rng.gen_range(-2..=2) as f64).collect(),
        );
        let query: Vec<f64> = (0..d).map(|_| rng.gen_range(-2..=2) as f64).collect();
        let index = KnowledgeIndex { vectors };
        let k = rng.gen_range(1..=n);
        let scores = index.scores(&query);
        let distinct: BTreeSet<i64> = scores.iter().map(|&s| s as i64).collect();
        tied_instances += (distinct.len() < n) as usize;
        let got: Vec<usize> = index
            .top_k(&query, k)
            .unwrap()
            .ranked
            .iter()
            .map(|r| r.id)
            .collect();
        assert_eq!(got, brute_top_k(&scores, k));
    }
    assert!(tied_instances > 500);
}

#[test]
fn top_k_rejects_bad_k() {
    let index = KnowledgeIndex {
        vectors: Tensor::zeros(3, 2),
    };
    assert!(index.top_k(&[0.0, 0.0], 0).is_err());
    assert!(index.top_k(&[0.0, 0.0], 4).is_err());
}

proptest! {
    /// Permuting the knowledge base permutes the selected ids and nothing else
    /// (distinct scores, so the tie rule is not involved).
    #[test]
    fn top_k_is_permutation_invariant(
        scores in prop::collection::btree_set(-10_000i32..10_000, 1..40),
        seed in any::<u64>(),
        k_frac in 0.0f64..1.0,
    ) {
        use rand::seq::SliceRandom;
        let scores: Vec<f64> = scores.into_iter().map(|s| s as f64 / 7.0).collect();
        let n = scores.len();
        let k = 1 + ((n - 1) as f64 * k_frac) as usize;
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let permuted: Vec<f64> = perm.iter().map(|&i| scores[i]).collect();
        let a: BTreeSet<usize> = rank_scores(&scores, k).ids();
        let b: BTreeSet<usize> = rank_scores(&permuted, k).ids().into_iter().map(|j| perm[j]).collect();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn recall_is_monotone_in_k(
        scores in prop::collection::vec(-5.0f64..5.0, 1..50),
        gold in prop::collection::btree_set(0usize..50, 0..6),
    ) {
        let gold: BTreeSet<usize> = gold.into_iter().filter(|&g| g < scores.len()).collect();
        let mut prev = 0.0;
        for k in 1..=scores.len() {
            let (_, r) = retrieval_metrics(&rank_scores(&scores, k).ids(), &gold);
            prop_assert!(r >= prev);
            prev = r;
        }
        prop_assert_eq!(prev, 1.0);
    }

    #[test]
    fn probabilities_are_sigmoid_of_scores(scores in prop::collection::vec(-30.0f64..30.0, 1..20)) {
        for r in rank_scores(&scores, scores.len()).ranked {
            prop_assert!((r.probability - 1.0 / (1.0 + (-r.score).exp())).abs() < 1e-12);
        }
    }
}

#[test]
fn corpus_recall_is_mean_of_turn_recalls() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut per_turn = Vec::new();
    let (mut num, mut den) = (0.0, 0usize);
    for _ in 0..200 {
        let scores: Vec<f64> = (0..30).map(|_| rng.gen()).collect();
        let gold: BTreeSet<usize> = (0..rng.gen_range(0..4))
            .map(|_| rng.gen_range(0..30))
            .collect();
        let (_, r) = retrieval_metrics(&rank_scores(&scores, 8).ids(), &gold);
        per_turn.push(r);
        num += r;
        den += 1;
    }
    let mean: f64 = per_turn.iter().sum::<f64>() / per_turn.len() as f64;
    assert!((mean - num / den as f64).abs() <= 1e-12);
}

#[test]
fn integrated_layout_and_provenance() {
    let onto = kgdst::corpus::Ontology::new(vec![kgdst::corpus::SlotSpec {
        name: "hotel-area".into(),
        values: vec!["north".into(), "south".into(), "east".into()],
    }])
    .unwrap();
    let kb = build_type_value_kb(&onto);
    let element_tokens: Vec<Vec<u32>> = (0..kb.len()).map(|i| vec![50 + i as u32]).collect();
    let ctx = DialogContext { tokens: vec![9, 9] };
    let r = rank_scores(&[0.1, 0.7, 0.4], 3);
    let a = integrate(&r, &ctx, &element_tokens, Arrangement::Ordered, 64).unwrap();
    let sep = kgdst::model::vocab::KNOWLEDGE_SEP;
    assert_eq!(a.tokens, vec![50, sep, 52, sep, 51, sep, 9, 9]);
    assert_eq!(a.provenance, vec![0, 2, 1]);

    let mut gold = DialogState::new();
    gold.insert("hotel-area", "south");
    let o = oracle_integrate(&gold, &kb, &ctx, &element_tokens, 2, 1.0, 1, 64).unwrap();
    assert!(o.provenance.contains(&1));
    assert_eq!(o.recall(&kb.gold_ids(&gold).unwrap()), 1.0);
}

#[test]
fn similarity_is_multiply_and_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..100 {
        let a: Vec<f64> = (0..16).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let b: Vec<f64> = (0..16).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let mut want = 0.0;
        for i in 0..16 {
            want += a[i] * b[i];
        }
        assert!((kgdst::retrieval::sim(&a, &b).unwrap() - want).abs() <= 1e-12);
    }
}

#[test]
fn oracle_draws_hit_the_requested_gold_count() {
    let slots = (0..4)
        .map(|i| kgdst::corpus::SlotSpec {
            name: format!("d-s{i}"),
            values: (0..10).map(|v| format!("v{v}")).collect(),
        })
        .collect();
    let onto = kgdst::corpus::Ontology::new(slots).unwrap();
    let kb = build_type_value_kb(&onto);
    let element_tokens: Vec<Vec<u32>> = (0..kb.len()).map(|i| vec![100 + i as u32]).collect();
    let mut gold = DialogState::new();
    for i in 0..4 {
        gold.insert(format!("d-s{i}"), format!("v{i}"));
    }
    let gold_ids = kb.gold_ids(&gold).unwrap();
    let ctx = DialogContext { tokens: vec![9] };
    for seed in 0..1000 {
        let o = oracle_integrate(&gold, &kb, &ctx, &element_tokens, 30, 0.5, seed, 512).unwrap();
        let distinct: BTreeSet<usize> = o.provenance.iter().copied().collect();
        assert_eq!(o.provenance.len(), 30);
        assert_eq!(distinct.len(), 30);
        assert_eq!(distinct.intersection(&gold_ids).count(), 2);
    }
}
