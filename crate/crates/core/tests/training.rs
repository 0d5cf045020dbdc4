use kgdst::corpus::{generate_synthetic, Corpus, SyntheticSpec};
use kgdst::knowledge::{build_training_kb, build_type_value_kb, KnowledgeBase, KnowledgeKind};
use kgdst::model::Vocabulary;
use kgdst::training::{
    seq2seq_baseline, train_joint, Data, HeadMode, IntegrationMode, LogRecord, ModelDims, Schedule,
    TrainConfig, Trainer,
};

fn corpus(n: usize) -> Corpus {
    generate_synthetic(&SyntheticSpec {
        num_dialogs: n,
        ..SyntheticSpec::default()
    })
    .unwrap()
}

fn config() -> TrainConfig {
    TrainConfig {
        steps: 6,
        batch_size: 4,
        lr: 1e-3,
        top_k: Some(4),
        eval_every: 0,
        seed: 3,
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
    }
}

fn trainer(config: TrainConfig, c: &Corpus, kb: Option<KnowledgeBase>) -> Trainer {
    let n = c.dialogs.len();
    Trainer::new(
        config,
        Vocabulary::for_corpus(c),
        c.ontology.clone(),
        &c.dialogs[..n - 2],
        &c.dialogs[n - 2..],
        kb,
    )
    .unwrap()
}

fn steps(log: &[LogRecord]) -> Vec<(Option<f64>, Option<f64>, f64)> {
    log.iter()
        .filter_map(|r| match r {
            LogRecord::Step {
                l_ret,
                l_dst,
                l_total,
                ..
            } => Some((*l_ret, *l_dst, *l_total)),
            _ => None,
        })
        .collect()
}

#[test]
fn same_config_same_log() {
    let c = corpus(10);
    let kb = build_type_value_kb(&c.ontology);
    let mut a = trainer(config(), &c, Some(kb.clone()));
    let mut b = trainer(config(), &c, Some(kb));
    a.run().unwrap();
    b.run().unwrap();
    assert_eq!(a.log(), b.log());
    assert_eq!(a.model().params, b.model().params);
    assert_eq!(LogRecord::to_jsonl(a.log()), LogRecord::to_jsonl(b.log()));
}

#[test]
fn different_seed_different_run() {
    let c = corpus(10);
    let kb = build_type_value_kb(&c.ontology);
    let mut a = trainer(config(), &c, Some(kb.clone()));
    let mut b = trainer(
        TrainConfig {
            seed: 4,
            ..config()
        },
        &c,
        Some(kb),
    );
    a.run().unwrap();
    b.run().unwrap();
    assert_ne!(a.model().params, b.model().params);
}

#[test]
fn total_loss_is_the_weighted_sum() {
    let c = corpus(10);
    let kb = build_type_value_kb(&c.ontology);
    for (dw, rw) in [(1.0, 0.1), (0.7, 0.3), (0.0, 1.0), (2.0, 0.0)] {
        let mut t = trainer(
            TrainConfig {
                dst_weight: dw,
                retrieval_weight: rw,
                ..config()
            },
            &c,
            Some(kb.clone()),
        );
        let o = t.objective().unwrap();
        let (ret, dst) = (o.l_ret.unwrap(), o.l_dst.unwrap());
        assert!(ret > 0.0 && dst > 0.0);
        assert!((o.l_total - (dw * dst + rw * ret)).abs() <= 1e-12 * o.l_total.abs().max(1.0));
        // objective leaves the trainer untouched
        assert_eq!(t.objective().unwrap(), o);
        t.train_step().unwrap();
        let (r, d, total) = steps(t.log())[0];
        assert_eq!((r, d, total), (o.l_ret, o.l_dst, o.l_total));
    }
}

/// With a zero retrieval weight the retrieval head receives no gradient.
#[test]
fn zero_retrieval_weight_leaves_the_head_untouched() {
    let c = corpus(10);
    let kb = build_type_value_kb(&c.ontology);
    let mut t = trainer(
        TrainConfig {
            retrieval_weight: 0.0,
            head_mode: HeadMode::SeparateHead,
            top_k: Some(kb.len()),
            ..config()
        },
        &c,
        Some(kb),
    );
    let o = t.objective().unwrap();
    assert_eq!(o.l_total, o.l_dst.unwrap());
    let head = t.model().retrieval_head_ids();
    assert!(!head.is_empty());
    for id in head {
        assert!(o.gradients[id].data.iter().all(|&g| g == 0.0));
    }
}

/// Oracle integration has no retrieval loss, so a separate head changes only
/// the parameter list, not the DST gradients.
#[test]
fn separate_head_does_not_change_dst_gradients() {
    let c = corpus(10);
    let kb = build_type_value_kb(&c.ontology);
    let oracle = TrainConfig {
        integration: IntegrationMode::Oracle,
        top_k: Some(8),
        ..config()
    };
    let mut shared = trainer(oracle.clone(), &c, Some(kb.clone()));
    let mut separate = trainer(
        TrainConfig {
            head_mode: HeadMode::SeparateHead,
            ..oracle
        },
        &c,
        Some(kb),
    );
    let a = shared.objective().unwrap();
    let b = separate.objective().unwrap();
    assert!(a.l_ret.is_none() && b.l_ret.is_none());
    assert_eq!(a.l_dst, b.l_dst);
    let n = a.gradients.len();
    assert_eq!(
        n + separate.model().retrieval_head_ids().len(),
        b.gradients.len()
    );
    assert_eq!(a.gradients[..], b.gradients[..n]);
}

#[test]
fn sequential_schedule_logs_its_phases() {
    let c = corpus(10);
    let kb = build_type_value_kb(&c.ontology);
    let mut t = trainer(
        TrainConfig {
            schedule: Schedule::RetrievalThenDst { retrieval_steps: 3 },
            ..config()
        },
        &c,
        Some(kb),
    );
    t.run().unwrap();
    let phases: Vec<(usize, &str)> = t
        .log()
        .iter()
        .filter_map(|r| match r {
            LogRecord::Phase { step, phase } => Some((*step, phase.as_str())),
            _ => None,
        })
        .collect();
    assert_eq!(phases, vec![(0, "retrieval"), (3, "dst")]);
    let s = steps(t.log());
    for (i, (ret, dst, total)) in s.iter().enumerate() {
        if i < 3 {
            assert!(ret.is_some() && dst.is_none());
            assert_eq!(*total, ret.unwrap());
        } else {
            assert!(ret.is_none() && dst.is_some());
            assert_eq!(*total, dst.unwrap());
        }
    }
    // the scorer is frozen after the retrieval phase
    let frozen = t.scorer().params.clone();
    assert_ne!(&frozen, &t.model().params);
}

#[test]
fn baseline_has_no_retrieval_loss() {
    let c = corpus(10);
    let n = c.dialogs.len();
    let vocab = Vocabulary::for_corpus(&c);
    let data = Data {
        train: &c.dialogs[..n - 2],
        dev: &c.dialogs[n - 2..],
        vocab: &vocab,
        ontology: &c.ontology,
    };
    let out = seq2seq_baseline(
        data,
        &TrainConfig {
            kb_kind: None,
            ..config()
        },
    )
    .unwrap();
    assert!(steps(&out.log)
        .iter()
        .all(|(r, d, _)| r.is_none() && d.is_some()));
    assert!(out.model.params.all_finite());
}

#[test]
fn training_example_knowledge_trains() {
    let c = corpus(12);
    let kb = build_training_kb(&c.dialogs[..10], 20, 1).unwrap();
    assert_eq!(kb.kind, KnowledgeKind::TrainingExample);
    let mut t = trainer(
        TrainConfig {
            kb_kind: Some(KnowledgeKind::TrainingExample),
            top_k: Some(2),
            ..config()
        },
        &c,
        Some(kb),
    );
    t.run().unwrap();
    assert!(steps(t.log())
        .iter()
        .all(|(r, d, _)| r.is_some() && d.is_some()));
}

#[test]
fn invalid_configs_are_rejected() {
    let bad = [
        TrainConfig {
            lr: 0.0,
            ..config()
        },
        TrainConfig {
            steps: 0,
            ..config()
        },
        TrainConfig {
            batch_size: 0,
            ..config()
        },
        TrainConfig {
            retrieval_weight: -1.0,
            ..config()
        },
        TrainConfig {
            top_k: Some(0),
            ..config()
        },
        TrainConfig {
            few_shot_fraction: Some(0.0),
            ..config()
        },
        TrainConfig {
            integration: IntegrationMode::Oracle,
            oracle_recalls: vec![1.5],
            ..config()
        },
        TrainConfig {
            kb_kind: None,
            integration: IntegrationMode::Shuffled,
            ..config()
        },
    ];
    for cfg in bad {
        assert!(cfg.validate().is_err(), "{cfg:?}");
    }
    config().validate().unwrap();
}

#[test]
fn loss_falls_on_a_small_corpus() {
    let c = corpus(50);
    let vocab = Vocabulary::for_corpus(&c);
    let kb = build_type_value_kb(&c.ontology);
    let data = Data {
        train: &c.dialogs[..40],
        dev: &c.dialogs[40..],
        vocab: &vocab,
        ontology: &c.ontology,
    };
    let cfg = TrainConfig {
        steps: 300,
        batch_size: 8,
        eval_every: 100,
        top_k: Some(8),
        ..config()
    };
    let out = train_joint(data, kb, &cfg).unwrap();
    let s = steps(&out.log);
    let mean = |xs: &[(Option<f64>, Option<f64>, f64)]| {
        xs.iter().map(|x| x.2).sum::<f64>() / xs.len() as f64
    };
    assert!(mean(&s[s.len() - 20..]) < 0.5 * mean(&s[..20]));
    assert!(out.model.params.all_finite());
    let dev: Vec<f64> = out
        .log
        .iter()
        .filter_map(|r| match r {
            LogRecord::Dev { dev_jga, .. } => Some(*dev_jga),
            _ => None,
        })
        .collect();
    assert_eq!(dev.len(), 3);
}
