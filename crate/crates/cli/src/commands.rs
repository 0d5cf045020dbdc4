use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use kgdst::corpus::{
    few_shot_sample, generate_synthetic, load_corpus, read_ontology, user_turns, Corpus, Ontology,
    OrderPolicy, SyntheticSpec,
};
use kgdst::eval::{evaluate_examples, sanity_check, sanity_csv, EvalOptions};
use kgdst::fsio::write_atomic;
use kgdst::knowledge::{
    build_training_kb, build_type_kb, build_type_value_kb, KnowledgeBase, KnowledgeKind,
};
use kgdst::model::{Checkpoint, Model, Vocabulary};
use kgdst::training::{
    prepare_examples, HeadMode, IntegrationMode, KnowledgeSetup, LogRecord, Schedule, TrainConfig,
    Trainer,
};
use kgdst::Error;

/// Relative output paths are resolved against this directory when set.
pub const OUTPUT_DIR_ENV: &str = "KGDST_OUTPUT_DIR";

const AFTER_HELP: &str = "\
Settings are resolved in this order: command-line flags, then the JSON file
given with --config, then built-in defaults. Every run writes the resolved
settings next to its outputs (*.config.json); passing that file back with
--config repeats the run.

Relative output paths are resolved against $KGDST_OUTPUT_DIR when it is set.

Exit status: 0 on success, 1 on invalid input or usage, 2 on runtime failure.";

#[derive(Parser)]
#[command(name = "kgdst", version, about = "Knowledge-grounded dialog state tracking", after_help = AFTER_HELP)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus with a known ontology.
    GenData(GenDataArgs),
    /// Build a knowledge base from an ontology or a corpus.
    BuildKb(BuildKbArgs),
    /// Train a model (joint, sequential or the seq2seq baseline).
    Train(Box<TrainArgs>),
    /// Evaluate a checkpoint: JGA plus retrieval precision/recall.
    Evaluate(EvaluateArgs),
    /// JGA under controlled retrieval recall (CSV).
    SanityCheck(SanityArgs),
    /// Write a seeded few-shot subsample of a corpus.
    FewShot(FewShotArgs),
}

pub enum Failure {
    /// Bad flags, configuration or input data (exit 1).
    Invalid(String),
    /// Anything else (exit 2).
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Io { .. } | Error::NonFinite { .. } | Error::Diverged { .. } => {
                Failure::Runtime(e.to_string())
            }
            _ => Failure::Invalid(e.to_string()),
        }
    }
}

type Outcome<T = ()> = std::result::Result<T, Failure>;

fn invalid<T>(msg: impl Into<String>) -> Outcome<T> {
    Err(Failure::Invalid(msg.into()))
}

pub fn run(cli: Cli) -> Outcome {
    match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::BuildKb(a) => build_kb(a),
        Command::Train(a) => train(*a),
        Command::Evaluate(a) => evaluate(a),
        Command::SanityCheck(a) => sanity(a),
        Command::FewShot(a) => few_shot(a),
    }
}

fn load_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Outcome<T> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure::Invalid(format!("cannot read config {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| Failure::Invalid(format!("bad config {}: {e}", path.display())))
}

/// Copies every flag that was given into the configuration.
macro_rules! overlay {
    ($cfg:expr, $args:expr; $($field:ident),* $(,)?) => {
        $( if let Some(v) = $args.$field.clone() { $cfg.$field = v.into(); } )*
    };
}

fn output_path(path: &Path) -> PathBuf {
    match std::env::var_os(OUTPUT_DIR_ENV) {
        Some(dir) if path.is_relative() && !dir.is_empty() => Path::new(&dir).join(path),
        _ => path.to_path_buf(),
    }
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path
        .file_name()
        .map(|n| n.to_os_string())
        .unwrap_or_default();
    name.push(suffix);
    path.with_file_name(name)
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Outcome {
    write_atomic(path, bytes.as_ref()).map_err(Failure::from)
}

fn write_snapshot<T: Serialize>(path: &Path, config: &T) -> Outcome {
    let json = serde_json::to_string_pretty(config).expect("configuration serializes") + "\n";
    write(path, json)
}

fn required<'a>(path: &'a Option<PathBuf>, flag: &str) -> Outcome<&'a Path> {
    match path {
        Some(p) => Ok(p),
        None => invalid(format!("missing --{flag}")),
    }
}

fn parse_kind(s: &str) -> std::result::Result<KnowledgeKind, String> {
    KnowledgeKind::parse(s).map_err(|e| e.to_string())
}

/// `none` selects the knowledge-free baseline.
fn parse_kind_or_none(s: &str) -> std::result::Result<KindChoice, String> {
    if s == "none" {
        Ok(KindChoice(None))
    } else {
        parse_kind(s).map(|k| KindChoice(Some(k)))
    }
}

#[derive(Clone, Copy)]
struct KindChoice(Option<KnowledgeKind>);

impl From<KindChoice> for Option<KnowledgeKind> {
    fn from(k: KindChoice) -> Self {
        k.0
    }
}

fn parse_integration(s: &str) -> std::result::Result<IntegrationMode, String> {
    match s {
        "ordered" => Ok(IntegrationMode::Ordered),
        "shuffled" => Ok(IntegrationMode::Shuffled),
        "oracle" => Ok(IntegrationMode::Oracle),
        other => Err(format!(
            "unknown integration {other:?} (ordered, shuffled, oracle)"
        )),
    }
}

fn parse_order(s: &str) -> std::result::Result<OrderPolicy, String> {
    match s {
        "annotation" => Ok(OrderPolicy::Annotation),
        "lexicographic" => Ok(OrderPolicy::Lexicographic),
        other => Err(format!(
            "unknown order {other:?} (annotation, lexicographic)"
        )),
    }
}

fn parse_head(s: &str) -> std::result::Result<HeadMode, String> {
    match s {
        "shared" => Ok(HeadMode::Shared),
        "separate" | "separate_head" => Ok(HeadMode::SeparateHead),
        other => Err(format!("unknown head mode {other:?} (shared, separate)")),
    }
}

// ---------------------------------------------------------------- gen-data

#[derive(Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct GenDataConfig {
    dialogs: usize,
    domains: usize,
    slots: usize,
    values: usize,
    min_turns: usize,
    max_turns: usize,
    seed: u64,
    out: PathBuf,
}

impl Default for GenDataConfig {
    fn default() -> Self {
        let s = SyntheticSpec::default();
        GenDataConfig {
            dialogs: s.num_dialogs,
            domains: s.num_domains,
            slots: s.slots_per_domain,
            values: s.values_per_slot,
            min_turns: s.min_user_turns,
            max_turns: s.max_user_turns,
            seed: s.seed,
            out: "corpus.json".into(),
        }
    }
}

#[derive(Args)]
struct GenDataArgs {
    /// JSON settings file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dialogs: Option<usize>,
    #[arg(long)]
    domains: Option<usize>,
    /// Slots per domain.
    #[arg(long)]
    slots: Option<usize>,
    /// Values per slot.
    #[arg(long)]
    values: Option<usize>,
    /// Fewest user turns per dialog.
    #[arg(long)]
    min_turns: Option<usize>,
    #[arg(long)]
    max_turns: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn gen_data(args: GenDataArgs) -> Outcome {
    let mut cfg: GenDataConfig = load_config(args.config.as_deref())?;
    overlay!(cfg, args; dialogs, domains, slots, values, min_turns, max_turns, seed, out);
    let corpus = generate_synthetic(&SyntheticSpec {
        num_dialogs: cfg.dialogs,
        num_domains: cfg.domains,
        slots_per_domain: cfg.slots,
        values_per_slot: cfg.values,
        min_user_turns: cfg.min_turns,
        max_user_turns: cfg.max_turns,
        seed: cfg.seed,
    })?;
    let out = output_path(&cfg.out);
    write(&out, corpus.to_json())?;
    write_snapshot(&with_suffix(&out, ".config.json"), &cfg)?;
    println!(
        "wrote {} dialogs over {} slots to {}",
        corpus.dialogs.len(),
        corpus.ontology.slots.len(),
        out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------- build-kb

#[derive(Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct BuildKbConfig {
    corpus: Option<PathBuf>,
    ontology: Option<PathBuf>,
    kind: KnowledgeKind,
    /// Training examples to sample (training_example only).
    size: usize,
    seed: u64,
    out: PathBuf,
}

impl Default for BuildKbConfig {
    fn default() -> Self {
        BuildKbConfig {
            corpus: None,
            ontology: None,
            kind: KnowledgeKind::TypeValue,
            size: 500,
            seed: 0,
            out: "kb.json".into(),
        }
    }
}

#[derive(Args)]
struct BuildKbArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Corpus file (its ontology, or its dialogs for training_example).
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Ontology or MultiWOZ-style schema file; takes precedence over --corpus.
    #[arg(long)]
    ontology: Option<PathBuf>,
    /// type, type_value or training_example.
    #[arg(long, value_parser = parse_kind)]
    kind: Option<KnowledgeKind>,
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn build_kb(args: BuildKbArgs) -> Outcome {
    let mut cfg: BuildKbConfig = load_config(args.config.as_deref())?;
    if let Some(p) = &args.corpus {
        cfg.corpus = Some(p.clone());
    }
    if let Some(p) = &args.ontology {
        cfg.ontology = Some(p.clone());
    }
    overlay!(cfg, args; kind, size, seed, out);
    let kb = match cfg.kind {
        KnowledgeKind::TrainingExample => {
            let corpus = Corpus::read(required(&cfg.corpus, "corpus")?)?;
            build_training_kb(
                &corpus.dialogs,
                cfg.size.min(user_turns(&corpus.dialogs).len()),
                cfg.seed,
            )?
        }
        kind => {
            let ontology = match (&cfg.ontology, &cfg.corpus) {
                (Some(p), _) | (None, Some(p)) => read_ontology(p)?,
                (None, None) => return invalid("missing --ontology or --corpus"),
            };
            if kind == KnowledgeKind::Type {
                build_type_kb(&ontology)
            } else {
                build_type_value_kb(&ontology)
            }
        }
    };
    let out = output_path(&cfg.out);
    write(&out, kb.to_json())?;
    write_snapshot(&with_suffix(&out, ".config.json"), &cfg)?;
    println!(
        "wrote {} {:?} elements to {}",
        kb.len(),
        kb.kind,
        out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------- train

#[derive(Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct TrainCommand {
    corpus: Option<PathBuf>,
    /// Development corpus for periodic evaluation and best-model selection.
    dev: Option<PathBuf>,
    /// Knowledge base file; slot and slot-value bases are built from the
    /// corpus ontology when absent.
    kb: Option<PathBuf>,
    out: Option<PathBuf>,
    /// Checkpoint to continue from; its training settings win except `steps`.
    resume: Option<PathBuf>,
    train: TrainConfig,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    dev: Option<PathBuf>,
    #[arg(long)]
    kb: Option<PathBuf>,
    /// type, type_value, training_example or none (seq2seq baseline).
    #[arg(long, value_parser = parse_kind_or_none)]
    kb_kind: Option<KindChoice>,
    #[arg(long)]
    top_k: Option<usize>,
    #[arg(long)]
    retrieval_weight: Option<f64>,
    #[arg(long)]
    dst_weight: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Train retrieval alone for this many steps, then DST with retrieval frozen.
    #[arg(long)]
    retrieval_steps: Option<usize>,
    /// shared or separate.
    #[arg(long, value_parser = parse_head)]
    head_mode: Option<HeadMode>,
    /// ordered, shuffled or oracle.
    #[arg(long, value_parser = parse_integration)]
    integration: Option<IntegrationMode>,
    /// Recall targets sampled in oracle mode, comma separated.
    #[arg(long, value_delimiter = ',')]
    oracle_recalls: Option<Vec<f64>>,
    /// Train on this share of the training dialogs.
    #[arg(long)]
    few_shot: Option<f64>,
    #[arg(long)]
    eval_every: Option<usize>,
    /// annotation or lexicographic.
    #[arg(long, value_parser = parse_order)]
    order: Option<OrderPolicy>,
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    enc_layers: Option<usize>,
    #[arg(long)]
    dec_layers: Option<usize>,
    #[arg(long)]
    ffn_dim: Option<usize>,
    #[arg(long)]
    max_enc_len: Option<usize>,
    #[arg(long)]
    max_dec_len: Option<usize>,
    /// Output directory (checkpoint, log, settings).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    resume: Option<PathBuf>,
}

fn train_command(args: &TrainArgs) -> Outcome<TrainCommand> {
    let mut cmd: TrainCommand = load_config(args.config.as_deref())?;
    for (slot, flag) in [
        (&mut cmd.corpus, &args.corpus),
        (&mut cmd.dev, &args.dev),
        (&mut cmd.kb, &args.kb),
        (&mut cmd.out, &args.out),
        (&mut cmd.resume, &args.resume),
    ] {
        if flag.is_some() {
            slot.clone_from(flag);
        }
    }
    let t = &mut cmd.train;
    overlay!(t, args; kb_kind, retrieval_weight, dst_weight, steps, lr, batch_size, seed, head_mode,
        integration, oracle_recalls, eval_every, order);
    if let Some(k) = args.top_k {
        t.top_k = Some(k);
    }
    if let Some(f) = args.few_shot {
        t.few_shot_fraction = Some(f);
    }
    if let Some(n) = args.retrieval_steps {
        t.schedule = Schedule::RetrievalThenDst { retrieval_steps: n };
    }
    let m = &mut t.model;
    overlay!(m, args; d_model, heads, enc_layers, dec_layers, ffn_dim, max_enc_len, max_dec_len);
    Ok(cmd)
}

/// The knowledge base named by `path`, or one built from `ontology`.
fn knowledge_for(
    kind: Option<KnowledgeKind>,
    path: Option<&Path>,
    ontology: &Ontology,
) -> Outcome<Option<KnowledgeBase>> {
    let Some(kind) = kind else {
        return Ok(None);
    };
    let kb = match (path, kind) {
        (Some(p), _) => KnowledgeBase::read(p)?,
        (None, KnowledgeKind::Type) => build_type_kb(ontology),
        (None, KnowledgeKind::TypeValue) => build_type_value_kb(ontology),
        (None, KnowledgeKind::TrainingExample) => {
            return invalid("training_example knowledge needs --kb")
        }
    };
    Ok(Some(kb))
}

fn train(args: TrainArgs) -> Outcome {
    let cmd = train_command(&args)?;
    let corpus = Corpus::read(required(&cmd.corpus, "corpus")?)?;
    let dev = match &cmd.dev {
        Some(p) => load_corpus(p, &corpus.ontology)?,
        None => Vec::new(),
    };
    let out_dir = output_path(cmd.out.as_deref().unwrap_or(Path::new("run")));
    let mut trainer = match &cmd.resume {
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            let kind = ck
                .meta
                .get("config")
                .and_then(|c| serde_json::from_value::<TrainConfig>(c.clone()).ok())
                .ok_or_else(|| {
                    Failure::Invalid(format!("{} holds no training state", p.display()))
                })?
                .kb_kind;
            let kb = knowledge_for(kind, cmd.kb.as_deref(), &corpus.ontology)?;
            let mut t = Trainer::resume(&ck, corpus.ontology.clone(), &corpus.dialogs, &dev, kb)?;
            t.config.steps = cmd.train.steps;
            t
        }
        None => {
            let kb = knowledge_for(cmd.train.kb_kind, cmd.kb.as_deref(), &corpus.ontology)?;
            let vocab = Vocabulary::for_corpus(&corpus);
            Trainer::new(
                cmd.train.clone(),
                vocab,
                corpus.ontology.clone(),
                &corpus.dialogs,
                &dev,
                kb,
            )?
        }
    }
    .with_checkpoint_dir(&out_dir);
    trainer.run()?;
    write(&out_dir.join("model.ckpt"), trainer.checkpoint().encode())?;
    write(
        &out_dir.join("log.jsonl"),
        LogRecord::to_jsonl(trainer.log()),
    )?;
    write_snapshot(&out_dir.join("train.config.json"), &cmd)?;
    let last_dev = trainer.log().iter().rev().find_map(|r| match r {
        LogRecord::Dev { dev_jga, .. } => Some(*dev_jga),
        _ => None,
    });
    match last_dev {
        Some(jga) => println!(
            "trained {} steps, dev jga {jga:.4}, wrote {}",
            trainer.step(),
            out_dir.display()
        ),
        None => println!(
            "trained {} steps, wrote {}",
            trainer.step(),
            out_dir.display()
        ),
    }
    Ok(())
}

// ---------------------------------------------------------------- evaluate

#[derive(Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct EvaluateConfig {
    corpus: Option<PathBuf>,
    checkpoint: Option<PathBuf>,
    kb: Option<PathBuf>,
    /// Defaults to the training configuration's width.
    k: Option<usize>,
    /// Defaults to ordered.
    integration: Option<IntegrationMode>,
    oracle_recall: Option<f64>,
    seed: Option<u64>,
    /// Use the final instead of the best development parameters.
    last: bool,
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    kb: Option<PathBuf>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long, value_parser = parse_integration)]
    integration: Option<IntegrationMode>,
    #[arg(long)]
    oracle_recall: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Evaluate the final parameters rather than the best ones.
    #[arg(long)]
    last: bool,
    /// Report path; the per-turn retrieval dump goes next to it.
    #[arg(long)]
    out: Option<PathBuf>,
}

struct Loaded {
    corpus: Corpus,
    checkpoint: Checkpoint,
    config: TrainConfig,
}

fn load_run(corpus: &Option<PathBuf>, checkpoint: &Option<PathBuf>) -> Outcome<Loaded> {
    let corpus = Corpus::read(required(corpus, "corpus")?)?;
    let path = required(checkpoint, "checkpoint")?;
    let checkpoint = Checkpoint::load(path)?;
    let config = checkpoint
        .meta
        .get("config")
        .and_then(|c| serde_json::from_value::<TrainConfig>(c.clone()).ok())
        .unwrap_or_default();
    Ok(Loaded {
        corpus,
        checkpoint,
        config,
    })
}

fn evaluate(args: EvaluateArgs) -> Outcome {
    let mut cfg: EvaluateConfig = load_config(args.config.as_deref())?;
    for (slot, flag) in [
        (&mut cfg.corpus, &args.corpus),
        (&mut cfg.checkpoint, &args.checkpoint),
        (&mut cfg.kb, &args.kb),
        (&mut cfg.out, &args.out),
    ] {
        if flag.is_some() {
            slot.clone_from(flag);
        }
    }
    if args.k.is_some() {
        cfg.k = args.k;
    }
    if args.integration.is_some() {
        cfg.integration = args.integration;
    }
    if args.oracle_recall.is_some() {
        cfg.oracle_recall = args.oracle_recall;
    }
    if args.seed.is_some() {
        cfg.seed = args.seed;
    }
    cfg.last |= args.last;

    let run = load_run(&cfg.corpus, &cfg.checkpoint)?;
    let ck = &run.checkpoint;
    let generator = if cfg.last {
        ck.model()?
    } else {
        ck.best_model()?
    };
    let scorer = match &ck.frozen {
        Some(p) => Model::from_params(ck.model.clone(), p.clone())?,
        None => generator.clone(),
    };
    let kb = knowledge_for(run.config.kb_kind, cfg.kb.as_deref(), &run.corpus.ontology)?;
    let mut options = EvalOptions::from_config(&run.config, kb.as_ref());
    options.integration = cfg.integration.unwrap_or(IntegrationMode::Ordered);
    if let Some(k) = cfg.k {
        options.k = k;
    }
    if let Some(seed) = cfg.seed {
        options.seed = seed;
    }
    options.oracle_recall = match options.integration {
        IntegrationMode::Oracle => Some(cfg.oracle_recall.unwrap_or(1.0)),
        _ => None,
    };
    let examples = prepare_examples(
        &run.corpus.dialogs,
        &ck.vocab,
        options.order,
        &generator.config,
    )?;
    let knowledge = kb.map(|kb| KnowledgeSetup::new(kb, &ck.vocab));
    let report = evaluate_examples(
        &generator,
        &scorer,
        &examples,
        knowledge.as_ref(),
        &ck.vocab,
        &run.corpus.ontology,
        &options,
    )?;
    let out = output_path(cfg.out.as_deref().unwrap_or(Path::new("report.json")));
    write(&out, report.to_json())?;
    if knowledge.is_some() {
        write(
            &with_suffix(&out, ".retrieval.jsonl"),
            report.retrieval_dump(),
        )?;
    }
    write_snapshot(&with_suffix(&out, ".config.json"), &cfg)?;
    let fmt = |x: Option<f64>| x.map_or("n/a".to_string(), |v| format!("{v:.4}"));
    println!(
        "jga {:.4} precision {} recall {} over {} turns",
        report.jga,
        fmt(report.retrieval_precision),
        fmt(report.retrieval_recall),
        report.turns.len()
    );
    Ok(())
}

// ---------------------------------------------------------------- sanity-check

#[derive(Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct SanityConfig {
    corpus: Option<PathBuf>,
    checkpoint: Option<PathBuf>,
    kb: Option<PathBuf>,
    recalls: Vec<f64>,
    k: Option<usize>,
    seed: u64,
    out: PathBuf,
}

impl Default for SanityConfig {
    fn default() -> Self {
        SanityConfig {
            corpus: None,
            checkpoint: None,
            kb: None,
            recalls: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            k: None,
            seed: 0,
            out: "sanity.csv".into(),
        }
    }
}

#[derive(Args)]
struct SanityArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Slot-value knowledge base; built from the corpus ontology when absent.
    #[arg(long)]
    kb: Option<PathBuf>,
    /// Recall targets, comma separated.
    #[arg(long, value_delimiter = ',')]
    recalls: Option<Vec<f64>>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn sanity(args: SanityArgs) -> Outcome {
    let mut cfg: SanityConfig = load_config(args.config.as_deref())?;
    for (slot, flag) in [
        (&mut cfg.corpus, &args.corpus),
        (&mut cfg.checkpoint, &args.checkpoint),
        (&mut cfg.kb, &args.kb),
    ] {
        if flag.is_some() {
            slot.clone_from(flag);
        }
    }
    if args.k.is_some() {
        cfg.k = args.k;
    }
    overlay!(cfg, args; recalls, seed, out);
    let run = load_run(&cfg.corpus, &cfg.checkpoint)?;
    let model = run.checkpoint.best_model()?;
    let kb = knowledge_for(
        Some(KnowledgeKind::TypeValue),
        cfg.kb.as_deref(),
        &run.corpus.ontology,
    )?
    .expect("kind given");
    let k = cfg.k.unwrap_or_else(|| run.config.k_for(&kb));
    let rows = sanity_check(
        &model,
        &run.checkpoint.vocab,
        &run.corpus.ontology,
        &run.corpus.dialogs,
        &kb,
        &cfg.recalls,
        k,
        cfg.seed,
        run.config.order,
    )?;
    let csv = sanity_csv(&rows);
    let out = output_path(&cfg.out);
    write(&out, &csv)?;
    write_snapshot(&with_suffix(&out, ".config.json"), &cfg)?;
    print!("{csv}");
    Ok(())
}

// ---------------------------------------------------------------- few-shot

#[derive(Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct FewShotConfig {
    corpus: Option<PathBuf>,
    fraction: f64,
    seed: u64,
    out: PathBuf,
}

impl Default for FewShotConfig {
    fn default() -> Self {
        FewShotConfig {
            corpus: None,
            fraction: 0.01,
            seed: 0,
            out: "few-shot.json".into(),
        }
    }
}

#[derive(Args)]
struct FewShotArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Share of dialogs to keep, in (0, 1].
    #[arg(long)]
    fraction: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn few_shot(args: FewShotArgs) -> Outcome {
    let mut cfg: FewShotConfig = load_config(args.config.as_deref())?;
    if args.corpus.is_some() {
        cfg.corpus.clone_from(&args.corpus);
    }
    overlay!(cfg, args; fraction, seed, out);
    let corpus = Corpus::read(required(&cfg.corpus, "corpus")?)?;
    let dialogs = few_shot_sample(&corpus.dialogs, cfg.fraction, cfg.seed)?;
    let sampled = Corpus {
        ontology: corpus.ontology,
        dialogs,
    };
    let out = output_path(&cfg.out);
    write(&out, sampled.to_json())?;
    write_snapshot(&with_suffix(&out, ".config.json"), &cfg)?;
    println!(
        "kept {} of {} dialogs in {}",
        sampled.dialogs.len(),
        corpus.dialogs.len(),
        out.display()
    );
    Ok(())
}
