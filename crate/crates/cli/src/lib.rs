//! Command implementations behind the `kgqa` binary: train the coarse
//! ranker, fine-tune the expression scorer on weak labels, answer single
//! questions, evaluate datasets, generate synthetic benchmarks, and run an
//! interactive ask-and-inspect loop.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{BufRead, Write as IoWrite};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use kgqa_core::checkpoint::{Checkpoint, CheckpointError};
use kgqa_core::dataset::{load_examples, save_examples, DatasetError, QaExample};
use kgqa_core::encoder::{tokenize, FrozenVocab, TokenProvider};
use kgqa_core::gnn::{
    corpus_tokens, forward, masked_tokens, select_candidates, train, GnnConfig, GnnModel,
};
use kgqa_core::kg::{EntityId, KgError, KnowledgeGraph};
use kgqa_core::numerics::Tape;
use kgqa_core::pipeline::{
    answer, evaluate_explanations, evaluate_qa, AnswerMode, AnswerResult, Metrics, Models,
    PipelineConfig,
};
use kgqa_core::reason::rewrite_vocabulary;
use kgqa_core::scorer::{
    finetune, load_labels, predict_pos_neg, save_labels, FinetuneConfig, TextEncoder,
    WeakLabelSet,
};
use kgqa_core::synth::{generate_synthetic, SynthConfig};

/// Command failures, classified for the exit code: 2 usage or config, 3
/// unreadable or unwritable path, 4 malformed data, 5 runtime failure.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    PathIo(String),
    Data(String),
    Run(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::PathIo(_) => 3,
            CliError::Data(_) => 4,
            CliError::Run(_) => 5,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::PathIo(m) | CliError::Data(m) | CliError::Run(m) => {
                f.write_str(m)
            }
        }
    }
}

impl std::error::Error for CliError {}

/// Everything a command needs: paths, hyperparameters, and mode flags.
/// Built from defaults, then a config file, then command-line flags, each
/// layer overriding the previous one.
#[derive(Clone, Debug)]
pub struct RunConfig {
    pub kg: Option<PathBuf>,
    pub train: Option<PathBuf>,
    pub valid: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub tokens: Option<PathBuf>,
    pub ckpt_gnn: Option<PathBuf>,
    pub ckpt_encoder: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub layers: usize,
    pub dim: usize,
    pub margin: f64,
    pub margin_ft: f64,
    pub top_n: usize,
    pub max_len: usize,
    pub multiplier: f64,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
    pub pairs_per_question: usize,
    pub fast: bool,
    pub skip_finetune: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            kg: None,
            train: None,
            valid: None,
            test: None,
            tokens: None,
            ckpt_gnn: None,
            ckpt_encoder: None,
            labels: None,
            out: None,
            layers: 3,
            dim: 64,
            margin: 1.0,
            margin_ft: 0.1,
            top_n: 10,
            max_len: 2,
            multiplier: 1.05,
            epochs: 30,
            lr: 1e-3,
            seed: 0,
            pairs_per_question: 32,
            fast: false,
            skip_finetune: false,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, CliError> {
    value
        .parse()
        .map_err(|_| CliError::Usage(format!("config key {key}: cannot parse {value:?}")))
}

impl RunConfig {
    /// Applies one config-file entry. Keys mirror the command-line flags.
    pub fn set_key(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        match key {
            "kg" => self.kg = Some(PathBuf::from(value)),
            "train" => self.train = Some(PathBuf::from(value)),
            "valid" => self.valid = Some(PathBuf::from(value)),
            "test" => self.test = Some(PathBuf::from(value)),
            "tokens" => self.tokens = Some(PathBuf::from(value)),
            "ckpt-gnn" => self.ckpt_gnn = Some(PathBuf::from(value)),
            "ckpt-encoder" => self.ckpt_encoder = Some(PathBuf::from(value)),
            "labels" => self.labels = Some(PathBuf::from(value)),
            "out" => self.out = Some(PathBuf::from(value)),
            "layers" => self.layers = parse_num(key, value)?,
            "dim" => self.dim = parse_num(key, value)?,
            "margin" => self.margin = parse_num(key, value)?,
            "margin-ft" => self.margin_ft = parse_num(key, value)?,
            "top-n" => self.top_n = parse_num(key, value)?,
            "max-len" => self.max_len = parse_num(key, value)?,
            "multiplier" => self.multiplier = parse_num(key, value)?,
            "epochs" => self.epochs = parse_num(key, value)?,
            "lr" => self.lr = parse_num(key, value)?,
            "seed" => self.seed = parse_num(key, value)?,
            "pairs-per-question" => self.pairs_per_question = parse_num(key, value)?,
            "fast" => self.fast = parse_num(key, value)?,
            "skip-finetune" => self.skip_finetune = parse_num(key, value)?,
            other => {
                return Err(CliError::Usage(format!("unknown config key {other:?}")));
            }
        }
        Ok(())
    }

    /// Reads a flat `key = value` file. `#` starts a comment; blank lines
    /// are skipped.
    pub fn apply_file(&mut self, path: &Path) -> Result<(), CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::PathIo(format!("config file {}: {e}", path.display())))?;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                CliError::Usage(format!(
                    "config file {}:{}: expected key = value",
                    path.display(),
                    i + 1
                ))
            })?;
            self.set_key(key.trim(), value.trim())?;
        }
        Ok(())
    }

    fn apply_flags(&mut self, opts: &CommonOpts) {
        macro_rules! take {
            ($field:ident) => {
                if let Some(v) = &opts.$field {
                    self.$field = Some(v.clone());
                }
            };
        }
        macro_rules! take_num {
            ($field:ident) => {
                if let Some(v) = opts.$field {
                    self.$field = v;
                }
            };
        }
        take!(kg);
        take!(train);
        take!(valid);
        take!(test);
        take!(tokens);
        take!(ckpt_gnn);
        take!(ckpt_encoder);
        take!(labels);
        take!(out);
        take_num!(layers);
        take_num!(dim);
        take_num!(margin);
        take_num!(margin_ft);
        take_num!(top_n);
        take_num!(max_len);
        take_num!(multiplier);
        take_num!(epochs);
        take_num!(lr);
        take_num!(seed);
        if opts.fast {
            self.fast = true;
        }
        if opts.skip_finetune {
            self.skip_finetune = true;
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |msg: &str| Err(CliError::Usage(msg.into()));
        if self.layers == 0 {
            return bad("layers must be at least 1");
        }
        if self.dim == 0 {
            return bad("dim must be at least 1");
        }
        if self.top_n == 0 {
            return bad("top-n must be at least 1");
        }
        if self.max_len == 0 {
            return bad("max-len must be at least 1");
        }
        if self.pairs_per_question == 0 {
            return bad("pairs-per-question must be at least 1");
        }
        if !(self.multiplier >= 1.0) {
            return bad("multiplier must be at least 1");
        }
        if !(self.margin >= 0.0) {
            return bad("margin must be nonnegative");
        }
        if !(self.margin_ft >= 0.0) {
            return bad("margin-ft must be nonnegative");
        }
        if !(self.lr > 0.0) {
            return bad("lr must be positive");
        }
        Ok(())
    }

    /// Defaults, overridden by the config file, overridden by flags.
    pub fn resolve(opts: &CommonOpts) -> Result<Self, CliError> {
        let mut cfg = RunConfig::default();
        if let Some(path) = &opts.config {
            cfg.apply_file(path)?;
        }
        cfg.apply_flags(opts);
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Flags shared by every command. All are optional; unset flags fall back
/// to config-file entries and then to defaults.
#[derive(Args, Clone, Debug, Default)]
pub struct CommonOpts {
    /// Flat key = value config file; flags override its entries.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Knowledge-graph directory (entities.tsv, relations.tsv, triples.tsv).
    #[arg(long)]
    pub kg: Option<PathBuf>,
    /// Training questions, one JSON record per line.
    #[arg(long)]
    pub train: Option<PathBuf>,
    /// Validation questions.
    #[arg(long)]
    pub valid: Option<PathBuf>,
    /// Test questions.
    #[arg(long)]
    pub test: Option<PathBuf>,
    /// Pretrained token-embedding table; omit to train embeddings jointly.
    #[arg(long)]
    pub tokens: Option<PathBuf>,
    /// Ranker checkpoint path (written by train-gnn, read elsewhere).
    #[arg(long = "ckpt-gnn")]
    pub ckpt_gnn: Option<PathBuf>,
    /// Text-encoder checkpoint path (written by finetune, read elsewhere).
    #[arg(long = "ckpt-encoder")]
    pub ckpt_encoder: Option<PathBuf>,
    /// Weak-label cache; defaults to <ckpt-encoder>.labels.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// Output path (synth: directory; answer/eval: report file).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Network depth: reasoning reaches answers this many hops out.
    #[arg(long)]
    pub layers: Option<usize>,
    /// Embedding width for the ranker and the text encoder.
    #[arg(long)]
    pub dim: Option<usize>,
    /// Rank-loss margin separating answers from non-answers.
    #[arg(long)]
    pub margin: Option<f64>,
    /// Triplet margin for fine-tuning the text encoder.
    #[arg(long = "margin-ft")]
    pub margin_ft: Option<f64>,
    /// Candidates kept from the coarse ranking.
    #[arg(long = "top-n")]
    pub top_n: Option<usize>,
    /// Path length budget when extracting reasoning subgraphs.
    #[arg(long = "max-len")]
    pub max_len: Option<usize>,
    /// Distance multiplier bounding returned answer sets.
    #[arg(long)]
    pub multiplier: Option<f64>,
    /// Training epochs.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
    /// Master random seed; every run is deterministic given it.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Restrict subgraph extraction to shortest paths.
    #[arg(long)]
    pub fast: bool,
    /// Write the freshly initialized encoder without fine-tuning it.
    #[arg(long = "skip-finetune")]
    pub skip_finetune: bool,
}

fn required<'a>(value: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path, CliError> {
    value
        .as_deref()
        .ok_or_else(|| CliError::Usage(format!("{flag} is required for this command")))
}

fn load_kg(path: &Path) -> Result<KnowledgeGraph, CliError> {
    KnowledgeGraph::load(path).map_err(|e| {
        let msg = format!("knowledge graph at {}: {e}", path.display());
        match e {
            KgError::Io(_) => CliError::PathIo(msg),
            _ => CliError::Data(msg),
        }
    })
}

fn load_dataset(path: &Path) -> Result<Vec<QaExample>, CliError> {
    load_examples(path).map_err(|e| {
        let msg = format!("dataset {}: {e}", path.display());
        match e {
            DatasetError::Io { .. } => CliError::PathIo(msg),
            DatasetError::Malformed { .. } => CliError::Data(msg),
        }
    })
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint, CliError> {
    Checkpoint::load(path).map_err(|e| {
        let msg = format!("checkpoint {}: {e}", path.display());
        match e {
            CheckpointError::Io { .. } => CliError::PathIo(msg),
            _ => CliError::Data(msg),
        }
    })
}

fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<(), CliError> {
    ck.save(path)
        .map_err(|e| CliError::PathIo(format!("writing checkpoint {}: {e}", path.display())))
}

fn load_gnn(path: &Path) -> Result<GnnModel, CliError> {
    let ck = load_checkpoint(path)?;
    GnnModel::from_checkpoint(&ck)
        .map_err(|e| CliError::Data(format!("checkpoint {}: {e}", path.display())))
}

fn load_encoder(path: &Path) -> Result<TextEncoder, CliError> {
    let ck = load_checkpoint(path)?;
    TextEncoder::from_checkpoint(&ck)
        .map_err(|e| CliError::Data(format!("checkpoint {}: {e}", path.display())))
}

/// Token provider for training: file-backed when --tokens is given,
/// otherwise trainable over the question/label corpus plus the fixed
/// rewriting vocabulary (so expressions stay distinguishable downstream).
fn build_provider(
    cfg: &RunConfig,
    kg: &KnowledgeGraph,
    datasets: &[&[QaExample]],
) -> Result<TokenProvider, CliError> {
    match &cfg.tokens {
        Some(path) => TokenProvider::from_file(path).map_err(|e| {
            let msg = format!("token table {}: {e}", path.display());
            match e {
                kgqa_core::encoder::EncoderError::Io(_) => CliError::PathIo(msg),
                _ => CliError::Data(msg),
            }
        }),
        None => {
            let mut corpus = corpus_tokens(kg, datasets);
            corpus.extend(rewrite_vocabulary());
            Ok(TokenProvider::trainable(corpus, cfg.dim))
        }
    }
}

fn run_err(e: impl fmt::Display) -> CliError {
    CliError::Run(e.to_string())
}

/// Trains the coarse ranker and writes its checkpoint to --ckpt-gnn.
pub fn cmd_train_gnn(cfg: &RunConfig) -> Result<(), CliError> {
    let ckpt_path = required(&cfg.ckpt_gnn, "--ckpt-gnn")?;
    let kg = load_kg(required(&cfg.kg, "--kg")?)?;
    let train_set = load_dataset(required(&cfg.train, "--train")?)?;
    let valid_set = match &cfg.valid {
        Some(p) => load_dataset(p)?,
        None => Vec::new(),
    };
    let provider = build_provider(cfg, &kg, &[&train_set, &valid_set])?;
    let gnn_config = GnnConfig {
        layers: cfg.layers,
        dim: cfg.dim,
        margin: cfg.margin,
        pairs_per_question: cfg.pairs_per_question,
        lr: cfg.lr,
        epochs: cfg.epochs,
        seed: cfg.seed,
    };
    let model = train(&kg, &train_set, &valid_set, provider, gnn_config, |s| {
        println!(
            "epoch {:>3}  loss {:>12.6}  valid hits@1 {:.4}",
            s.epoch, s.mean_loss, s.valid_hits_at_1
        );
    })
    .map_err(run_err)?;
    save_checkpoint(&model.to_checkpoint(), ckpt_path)?;
    println!("wrote {}", ckpt_path.display());
    Ok(())
}

fn default_labels_path(cfg: &RunConfig) -> Result<PathBuf, CliError> {
    if let Some(p) = &cfg.labels {
        return Ok(p.clone());
    }
    let encoder = required(&cfg.ckpt_encoder, "--ckpt-encoder")?;
    Ok(PathBuf::from(format!("{}.labels", encoder.display())))
}

/// Step-I candidate entities for one question, distance-ascending.
fn step_one_candidates(
    gnn: &GnnModel,
    kg: &KnowledgeGraph,
    ex: &QaExample,
    top_n: usize,
) -> Result<Vec<EntityId>, CliError> {
    let mut tape = Tape::new();
    let fwd = forward(&mut tape, gnn, kg, &masked_tokens(kg, ex), &ex.topic_entities)
        .map_err(run_err)?;
    Ok(select_candidates(&fwd.distances, top_n)
        .into_iter()
        .map(|(e, _)| e)
        .collect())
}

/// Weak labels for every example, loaded from the cache when it covers
/// them all, regenerated (and cached) otherwise.
fn obtain_labels(
    cfg: &RunConfig,
    kg: &KnowledgeGraph,
    gnn: &GnnModel,
    examples: &[&QaExample],
    path: &Path,
) -> Result<BTreeMap<String, WeakLabelSet>, CliError> {
    if path.exists() {
        let cached = load_labels(path)
            .map_err(|e| CliError::Data(format!("label cache {}: {e}", path.display())))?;
        let map: BTreeMap<String, WeakLabelSet> = cached.into_iter().collect();
        if examples.iter().all(|ex| map.contains_key(&ex.id)) {
            println!(
                "weak labels: {} cached records at {}, generation skipped",
                map.len(),
                path.display()
            );
            return Ok(map);
        }
        println!(
            "weak labels: cache at {} is incomplete, regenerating",
            path.display()
        );
    }
    let mut records = Vec::with_capacity(examples.len());
    for ex in examples {
        let candidates = step_one_candidates(gnn, kg, ex, cfg.top_n)?;
        let labels =
            predict_pos_neg(kg, ex, &candidates, cfg.max_len, cfg.fast).map_err(run_err)?;
        if labels.positives.is_empty() {
            println!("question {}: no positive expressions, it will be skipped", ex.id);
        }
        records.push((ex.id.clone(), labels));
    }
    save_labels(path, &records)
        .map_err(|e| CliError::PathIo(format!("writing label cache {}: {e}", path.display())))?;
    println!("weak labels: {} records written to {}", records.len(), path.display());
    Ok(records.into_iter().collect())
}

/// Generates (or loads) weak labels from Step-I candidates, fine-tunes the
/// text encoder on them, and writes its checkpoint to --ckpt-encoder.
pub fn cmd_finetune(cfg: &RunConfig) -> Result<(), CliError> {
    let ckpt_path = required(&cfg.ckpt_encoder, "--ckpt-encoder")?.to_path_buf();
    let labels_path = default_labels_path(cfg)?;
    let kg = load_kg(required(&cfg.kg, "--kg")?)?;
    let train_set = load_dataset(required(&cfg.train, "--train")?)?;
    let valid_set = match &cfg.valid {
        Some(p) => load_dataset(p)?,
        None => Vec::new(),
    };
    let gnn = load_gnn(required(&cfg.ckpt_gnn, "--ckpt-gnn")?)?;

    let all: Vec<&QaExample> = train_set.iter().chain(valid_set.iter()).collect();
    let labels = obtain_labels(cfg, &kg, &gnn, &all, &labels_path)?;
    let records = |set: &[QaExample]| -> Vec<(String, WeakLabelSet)> {
        set.iter()
            .map(|ex| (ex.question.clone(), labels[&ex.id].clone()))
            .collect()
    };
    let train_records = records(&train_set);
    let valid_records = records(&valid_set);
    fn borrow(recs: &[(String, WeakLabelSet)]) -> Vec<(&str, &WeakLabelSet)> {
        recs.iter().map(|(q, l)| (q.as_str(), l)).collect()
    }

    let vocab = FrozenVocab::from_provider(&gnn.provider, Some(&gnn.store)).map_err(run_err)?;
    let epochs = if cfg.skip_finetune { 0 } else { cfg.epochs };
    if cfg.skip_finetune {
        println!("fine-tuning skipped: writing the freshly initialized encoder");
    }
    let ft_config = FinetuneConfig {
        dim: cfg.dim,
        margin: cfg.margin_ft,
        lr: cfg.lr,
        epochs,
        seed: cfg.seed,
    };
    let encoder = finetune(
        &borrow(&train_records),
        &borrow(&valid_records),
        vocab,
        ft_config,
        |s| {
            println!(
                "epoch {:>3}  loss {:>12.6}  valid selection accuracy {:.4}",
                s.epoch, s.mean_loss, s.valid_selection_accuracy
            );
        },
    )
    .map_err(run_err)?;
    save_checkpoint(&encoder.to_checkpoint(), &ckpt_path)?;
    println!("wrote {}", ckpt_path.display());
    Ok(())
}

/// Entities whose label occurs verbatim (token-wise, case-insensitive) in
/// the question. Labels fully contained in a longer matching label are
/// dropped, so "saint louis university" wins over "saint louis".
pub fn detect_topics(kg: &KnowledgeGraph, question: &str) -> Vec<EntityId> {
    let q = tokenize(question);
    let contains = |hay: &[String], needle: &[String]| {
        !needle.is_empty() && hay.windows(needle.len()).any(|w| w == needle)
    };
    let matches: Vec<(EntityId, Vec<String>)> = (0..kg.entity_count())
        .filter_map(|e| {
            let label = tokenize(kg.entity_label(e));
            contains(&q, &label).then_some((e, label))
        })
        .collect();
    matches
        .iter()
        .filter(|(_, label)| {
            !matches
                .iter()
                .any(|(_, other)| other.len() > label.len() && contains(other, label))
        })
        .map(|&(e, _)| e)
        .collect()
}

fn resolve_topics(kg: &KnowledgeGraph, labels: &[String]) -> Result<Vec<EntityId>, CliError> {
    let by_label: BTreeMap<&str, EntityId> = (0..kg.entity_count())
        .map(|e| (kg.entity_label(e), e))
        .collect();
    labels
        .iter()
        .map(|label| {
            by_label
                .get(label.as_str())
                .copied()
                .ok_or_else(|| CliError::Usage(format!("unknown topic entity label {label:?}")))
        })
        .collect()
}

/// One reasoning-subgraph triple rendered with labels.
#[derive(Clone, Debug, Serialize)]
pub struct TripleReport {
    pub head: String,
    pub relation: String,
    pub tail: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct EntityReport {
    pub id: EntityId,
    pub label: String,
    pub distance: f64,
}

/// Machine-readable answer for one question.
#[derive(Clone, Debug, Serialize)]
pub struct AnswerReport {
    pub question: String,
    pub topic_entities: Vec<String>,
    pub top1: Option<EntityReport>,
    pub answers: Vec<EntityReport>,
    pub expression: Option<String>,
    /// True when Step-II found no subgraphs and Step-I distances answered.
    pub fallback: bool,
    pub fast: bool,
    /// One triple list per reasoning subgraph behind the winning expression.
    pub subgraphs: Vec<Vec<TripleReport>>,
    /// Every scored expression, similarity-descending (--dump-expressions).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub expressions: Option<Vec<ExpressionReport>>,
}

#[derive(Clone, Debug, Serialize)]
pub struct ExpressionReport {
    pub text: String,
    pub similarity: f64,
}

fn report_from_result(
    kg: &KnowledgeGraph,
    question: &str,
    topics: &[EntityId],
    result: &AnswerResult,
    fast: bool,
    dump_expressions: bool,
) -> AnswerReport {
    let entity = |&(e, d): &(EntityId, f64)| EntityReport {
        id: e,
        label: kg.entity_label(e).to_string(),
        distance: d,
    };
    let top1 = result
        .answers
        .iter()
        .find(|&&(e, _)| e == result.top1)
        .map(entity);
    let subgraphs = result
        .subgraphs
        .iter()
        .map(|sg| {
            sg.triples()
                .iter()
                .map(|t| TripleReport {
                    head: kg.entity_label(t.head).to_string(),
                    relation: kg.relation_label(t.relation).to_string(),
                    tail: kg.entity_label(t.tail).to_string(),
                })
                .collect()
        })
        .collect();
    let expressions = dump_expressions.then(|| {
        let mut rows: Vec<ExpressionReport> = result
            .scored_expressions
            .iter()
            .map(|(text, similarity)| ExpressionReport {
                text: text.clone(),
                similarity: *similarity,
            })
            .collect();
        rows.sort_by(|a, b| b.similarity.total_cmp(&a.similarity).then(a.text.cmp(&b.text)));
        rows
    });
    AnswerReport {
        question: question.to_string(),
        topic_entities: topics.iter().map(|&t| kg.entity_label(t).to_string()).collect(),
        top1,
        answers: result.answers.iter().map(entity).collect(),
        expression: result.expression.clone(),
        fallback: result.fallback,
        fast,
        subgraphs,
        expressions,
    }
}

fn models_and_config(cfg: &RunConfig) -> Result<(KnowledgeGraph, Models, PipelineConfig), CliError> {
    let kg = load_kg(required(&cfg.kg, "--kg")?)?;
    let gnn = load_gnn(required(&cfg.ckpt_gnn, "--ckpt-gnn")?)?;
    let (encoder, mode) = match &cfg.ckpt_encoder {
        Some(path) => (load_encoder(path)?, AnswerMode::Full),
        None => {
            // No text encoder: answer from Step-I distances alone. The
            // placeholder encoder is never consulted in that mode.
            let vocab =
                FrozenVocab::from_provider(&gnn.provider, Some(&gnn.store)).map_err(run_err)?;
            let encoder = TextEncoder::new(vocab, cfg.dim, cfg.seed).map_err(run_err)?;
            (encoder, AnswerMode::StepOneOnly)
        }
    };
    let pipe = PipelineConfig {
        top_n: cfg.top_n,
        max_len: cfg.max_len,
        multiplier: cfg.multiplier,
        fast: cfg.fast,
        mode,
    };
    pipe.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok((kg, Models { gnn, encoder }, pipe))
}

/// Answers one question. Topic entities come from --topic labels, or are
/// detected by matching entity labels inside the question.
pub fn cmd_answer(
    cfg: &RunConfig,
    question: &str,
    topic_labels: &[String],
    dump_expressions: bool,
) -> Result<AnswerReport, CliError> {
    let (kg, models, pipe) = models_and_config(cfg)?;
    let topics = if topic_labels.is_empty() {
        detect_topics(&kg, question)
    } else {
        resolve_topics(&kg, topic_labels)?
    };
    let example = QaExample {
        id: "cli".into(),
        question: question.to_string(),
        topic_entities: topics.clone(),
        answers: Vec::new(),
        gold_chain: None,
    };
    let result = answer(&kg, &example, &models, &pipe).map_err(run_err)?;
    Ok(report_from_result(&kg, question, &topics, &result, cfg.fast, dump_expressions))
}

/// Evaluation report: answer metrics, and explanation metrics when every
/// test question carries a gold reasoning chain.
#[derive(Clone, Debug, Serialize)]
pub struct EvalReport {
    /// "full" or "step1" (no encoder checkpoint given).
    pub mode: String,
    pub fast: bool,
    pub qa: Metrics,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub explanations: Option<Metrics>,
}

/// Evaluates the pipeline on --test and returns the metrics report.
pub fn cmd_eval(cfg: &RunConfig) -> Result<EvalReport, CliError> {
    let (kg, models, pipe) = models_and_config(cfg)?;
    let test_set = load_dataset(required(&cfg.test, "--test")?)?;
    let qa = evaluate_qa(&kg, &test_set, &models, &pipe).map_err(run_err)?;
    let explanations = if test_set.iter().all(|ex| ex.gold_chain.is_some()) {
        Some(evaluate_explanations(&kg, &test_set, &models, &pipe).map_err(run_err)?)
    } else {
        None
    };
    Ok(EvalReport {
        mode: match pipe.mode {
            AnswerMode::Full => "full".into(),
            AnswerMode::StepOneOnly => "step1".into(),
        },
        fast: cfg.fast,
        qa,
        explanations,
    })
}

/// Sizes for the synthetic benchmark generator.
#[derive(Args, Clone, Debug)]
pub struct SynthArgs {
    /// Entity count.
    #[arg(long, default_value_t = 500)]
    pub entities: usize,
    /// Relation vocabulary size.
    #[arg(long, default_value_t = 12)]
    pub relations: usize,
    /// Planted reasoning-chain length.
    #[arg(long, default_value_t = 2)]
    pub hops: usize,
    /// Training questions.
    #[arg(long = "n-train", default_value_t = 200)]
    pub n_train: usize,
    /// Validation questions.
    #[arg(long = "n-valid", default_value_t = 25)]
    pub n_valid: usize,
    /// Test questions.
    #[arg(long = "n-test", default_value_t = 50)]
    pub n_test: usize,
    /// Extra random edges beyond the spanning tree, per entity.
    #[arg(long = "extra-edges", default_value_t = 0.4)]
    pub extra_edges: f64,
    /// Fraction of questions phrased with relation synonyms.
    #[arg(long = "paraphrase", default_value_t = 0.3)]
    pub paraphrase: f64,
    /// Largest allowed gold-answer set.
    #[arg(long = "max-answers", default_value_t = 4)]
    pub max_answers: usize,
}

impl Default for SynthArgs {
    fn default() -> Self {
        SynthArgs {
            entities: 500,
            relations: 12,
            hops: 2,
            n_train: 200,
            n_valid: 25,
            n_test: 50,
            extra_edges: 0.4,
            paraphrase: 0.3,
            max_answers: 4,
        }
    }
}

/// Generates a synthetic KG + question dataset under --out: kg/ plus
/// train.jsonl, valid.jsonl, test.jsonl.
pub fn cmd_synth(cfg: &RunConfig, args: &SynthArgs) -> Result<(), CliError> {
    let out = required(&cfg.out, "--out")?;
    let sc = SynthConfig {
        entities: args.entities,
        relations: args.relations,
        hops: args.hops,
        train: args.n_train,
        valid: args.n_valid,
        test: args.n_test,
        extra_edge_factor: args.extra_edges,
        paraphrase_fraction: args.paraphrase,
        max_answers: args.max_answers,
        seed: cfg.seed,
    };
    let (kg, dataset) =
        generate_synthetic(&sc).map_err(|e| CliError::Usage(format!("synth: {e}")))?;
    kg.save(&out.join("kg"))
        .map_err(|e| CliError::PathIo(format!("writing {}: {e}", out.join("kg").display())))?;
    let write = |name: &str, examples: &[QaExample]| -> Result<(), CliError> {
        let path = out.join(name);
        save_examples(&path, examples)
            .map_err(|e| CliError::PathIo(format!("writing {}: {e}", path.display())))
    };
    write("train.jsonl", &dataset.train)?;
    write("valid.jsonl", &dataset.valid)?;
    write("test.jsonl", &dataset.test)?;
    println!(
        "wrote {} entities, {} triples, {}+{}+{} questions under {}",
        kg.entity_count(),
        kg.triple_count(),
        dataset.train.len(),
        dataset.valid.len(),
        dataset.test.len(),
        out.display()
    );
    Ok(())
}

fn write_line(out: &mut impl IoWrite, line: &str) -> Result<(), CliError> {
    writeln!(out, "{line}").map_err(|e| CliError::Run(format!("writing output: {e}")))
}

/// Reads questions from `input` line by line; prints each answer plus its
/// reasoning subgraph as labeled triples. A blank line or end of input
/// stops the loop.
pub fn cmd_interactive(
    cfg: &RunConfig,
    input: impl BufRead,
    mut output: impl IoWrite,
) -> Result<(), CliError> {
    let (kg, models, pipe) = models_and_config(cfg)?;
    if pipe.mode == AnswerMode::StepOneOnly {
        write_line(&mut output, "note: no text encoder loaded, answering from distances alone")?;
    }
    write_line(&mut output, "ask a question (blank line quits):")?;
    for line in input.lines() {
        let line = line.map_err(|e| CliError::Run(format!("reading input: {e}")))?;
        let question = line.trim();
        if question.is_empty() {
            break;
        }
        let topics = detect_topics(&kg, question);
        if topics.is_empty() {
            write_line(&mut output, "no topic entity recognized, try naming one exactly")?;
            continue;
        }
        let labels: Vec<&str> = topics.iter().map(|&t| kg.entity_label(t)).collect();
        write_line(&mut output, &format!("topics: {}", labels.join(", ")))?;
        let example = QaExample {
            id: "interactive".into(),
            question: question.to_string(),
            topic_entities: topics,
            answers: Vec::new(),
            gold_chain: None,
        };
        match answer(&kg, &example, &models, &pipe) {
            Ok(result) => {
                let mut names: Vec<&str> = result
                    .answers
                    .iter()
                    .map(|&(e, _)| kg.entity_label(e))
                    .collect();
                names.sort();
                write_line(
                    &mut output,
                    &format!(
                        "answer: {}{}",
                        kg.entity_label(result.top1),
                        if result.fallback { "  (distance ranking only)" } else { "" }
                    ),
                )?;
                if names.len() > 1 {
                    write_line(&mut output, &format!("answer set: {}", names.join(", ")))?;
                }
                if let Some(expr) = &result.expression {
                    write_line(&mut output, &format!("reasoning: {expr}"))?;
                }
                for sg in &result.subgraphs {
                    for t in sg.triples() {
                        write_line(
                            &mut output,
                            &format!(
                                "  {} --{}--> {}",
                                kg.entity_label(t.head),
                                kg.relation_label(t.relation),
                                kg.entity_label(t.tail)
                            ),
                        )?;
                    }
                }
            }
            Err(e) => write_line(&mut output, &format!("error: {e}"))?,
        }
    }
    Ok(())
}

#[derive(Parser, Debug)]
#[command(
    name = "kgqa",
    about = "Two-step question answering over a knowledge graph",
    version
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train the coarse ranker and write its checkpoint.
    TrainGnn(CommonOpts),
    /// Fine-tune the expression scorer on weak labels.
    Finetune(CommonOpts),
    /// Answer a single question and print the result as JSON.
    Answer {
        #[command(flatten)]
        common: CommonOpts,
        /// The question text.
        #[arg(long)]
        question: String,
        /// Topic entity label; repeat for several. Detected from the
        /// question when omitted.
        #[arg(long = "topic")]
        topics: Vec<String>,
        /// Include every scored expression in the output.
        #[arg(long = "dump-expressions")]
        dump_expressions: bool,
    },
    /// Evaluate on a test set and print a metrics report as JSON.
    Eval(CommonOpts),
    /// Generate a synthetic benchmark (KG + questions).
    Synth {
        #[command(flatten)]
        common: CommonOpts,
        #[command(flatten)]
        args: SynthArgs,
    },
    /// Answer questions from standard input in a loop.
    Interactive(CommonOpts),
}

fn emit_json(value: &impl Serialize, out: &Option<PathBuf>) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::Run(format!("serializing report: {e}")))?;
    println!("{text}");
    if let Some(path) = out {
        fs::write(path, text + "\n")
            .map_err(|e| CliError::PathIo(format!("writing {}: {e}", path.display())))?;
    }
    Ok(())
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::TrainGnn(opts) => cmd_train_gnn(&RunConfig::resolve(&opts)?),
        Command::Finetune(opts) => cmd_finetune(&RunConfig::resolve(&opts)?),
        Command::Answer {
            common,
            question,
            topics,
            dump_expressions,
        } => {
            let cfg = RunConfig::resolve(&common)?;
            let report = cmd_answer(&cfg, &question, &topics, dump_expressions)?;
            emit_json(&report, &cfg.out)
        }
        Command::Eval(opts) => {
            let cfg = RunConfig::resolve(&opts)?;
            let report = cmd_eval(&cfg)?;
            emit_json(&report, &cfg.out)
        }
        Command::Synth { common, args } => cmd_synth(&RunConfig::resolve(&common)?, &args),
        Command::Interactive(opts) => {
            let cfg = RunConfig::resolve(&opts)?;
            let stdin = std::io::stdin();
            cmd_interactive(&cfg, stdin.lock(), std::io::stdout())
        }
    }
}
