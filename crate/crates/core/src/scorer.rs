//! Expression scoring: a self-contained text encoder embeds questions and
//! rewritten expressions into one cosine-similarity space, weak labels are
//! voted from KG execution, and a triplet loss fine-tunes the encoder.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path as FsPath;

use serde::{Deserialize, Serialize};

use crate::dataset::QaExample;
use crate::encoder::{tokenize, FrozenVocab};
use crate::kg::{EntityId, KgError, KnowledgeGraph};
use crate::numerics::{
    bigru_encode, Adam, AdamConfig, GruParams, NodeId, NumericsError, ParamStore, Tape, Tensor,
};
use crate::reason::{build_expression_set, extract_candidates, Expression};
use crate::{seeded_rng, RngStream};

#[derive(Debug, thiserror::Error)]
pub enum ScorerError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Kg(#[from] KgError),
    #[error("text produced no tokens")]
    EmptyText,
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}:{line}: {detail}")]
    Malformed {
        path: String,
        line: usize,
        detail: String,
    },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

const FWD_PREFIX: &str = "text.fwd";
const BWD_PREFIX: &str = "text.bwd";

/// Bidirectional GRU text encoder over frozen token vectors; the mean of
/// the two final states is the text embedding. Fine-tuning updates only
/// the GRU parameters, never the token table.
pub struct TextEncoder {
    pub vocab: FrozenVocab,
    pub store: ParamStore,
    pub fwd: GruParams,
    pub bwd: GruParams,
    /// Output dimension d_t.
    pub dim: usize,
}

impl TextEncoder {
    pub fn new(vocab: FrozenVocab, dim: usize, seed: u64) -> Result<Self, ScorerError> {
        let mut rng = seeded_rng(seed, RngStream::EncoderInit);
        let mut store = ParamStore::new();
        let fwd = GruParams::create(&mut store, FWD_PREFIX, vocab.dim, dim, &mut rng)?;
        let bwd = GruParams::create(&mut store, BWD_PREFIX, vocab.dim, dim, &mut rng)?;
        Ok(TextEncoder {
            vocab,
            store,
            fwd,
            bwd,
            dim,
        })
    }

    /// Rebuilds an encoder from checkpoint tensors.
    pub fn from_parts(
        vocab: FrozenVocab,
        dim: usize,
        tensors: &BTreeMap<String, Tensor>,
    ) -> Result<Self, ScorerError> {
        let mut store = ParamStore::new();
        for prefix in [FWD_PREFIX, BWD_PREFIX] {
            for leaf in ["wz", "uz", "bz", "wr", "ur", "br", "wh", "uh", "bh"] {
                let name = format!("{prefix}.{leaf}");
                let value = tensors
                    .get(&name)
                    .ok_or_else(|| ScorerError::Checkpoint(format!("missing tensor {name:?}")))?;
                store.add(&name, value.clone())?;
            }
        }
        let fwd = GruParams::lookup(&store, FWD_PREFIX, vocab.dim, dim)?;
        let bwd = GruParams::lookup(&store, BWD_PREFIX, vocab.dim, dim)?;
        Ok(TextEncoder {
            vocab,
            store,
            fwd,
            bwd,
            dim,
        })
    }

    /// Serializes GRU parameters plus the frozen token table and vocab.
    pub fn to_checkpoint(&self) -> crate::checkpoint::Checkpoint {
        let mut ck = crate::checkpoint::Checkpoint::from_store(&self.store);
        ck.meta.insert("format".into(), "text_encoder".into());
        ck.meta.insert("dim".into(), self.dim.to_string());
        ck.meta
            .insert("vocab".into(), self.vocab.tokens_in_order().join("\n"));
        ck.tensors.insert(
            "text.tokens".into(),
            self.vocab.table_tensor().expect("consistent vocab"),
        );
        ck
    }

    pub fn from_checkpoint(ck: &crate::checkpoint::Checkpoint) -> Result<Self, ScorerError> {
        let meta = |key: &str| {
            ck.meta
                .get(key)
                .ok_or_else(|| ScorerError::Checkpoint(format!("missing metadata {key:?}")))
        };
        if meta("format")? != "text_encoder" {
            return Err(ScorerError::Checkpoint(format!(
                "expected format \"text_encoder\", found {:?}",
                meta("format")?
            )));
        }
        let dim: usize = meta("dim")?
            .parse()
            .map_err(|_| ScorerError::Checkpoint("unparseable dim".into()))?;
        let tokens: Vec<String> = meta("vocab")?.split('\n').map(str::to_string).collect();
        let table = ck
            .tensors
            .get("text.tokens")
            .ok_or_else(|| ScorerError::Checkpoint("missing token table".into()))?;
        if table.rows() != tokens.len() {
            return Err(ScorerError::Checkpoint(format!(
                "vocab lists {} tokens but table has {} rows",
                tokens.len(),
                table.rows()
            )));
        }
        let provider = crate::encoder::TokenProvider::from_parts(
            crate::encoder::ProviderMode::FileBacked,
            &tokens,
            table,
        );
        let vocab = FrozenVocab::from_provider(&provider, None)?;
        TextEncoder::from_parts(vocab, dim, &ck.tensors)
    }

    /// Encodes text on a tape (differentiable). Token vectors enter as
    /// constants, keeping the table frozen under fine-tuning.
    pub fn encode_text_node(&self, tape: &mut Tape, text: &str) -> Result<NodeId, ScorerError> {
        let tokens = tokenize(text);
        if tokens.is_empty() {
            return Err(ScorerError::EmptyText);
        }
        let embedded: Vec<NodeId> = tokens
            .iter()
            .map(|t| tape.constant(self.vocab.vector(t).clone()))
            .collect::<Result<_, _>>()?;
        let h0f = tape.constant(Tensor::zeros(&[self.dim]))?;
        let h0b = tape.constant(Tensor::zeros(&[self.dim]))?;
        let (mean, _) = bigru_encode(tape, &self.store, &self.fwd, &self.bwd, &embedded, h0f, h0b)?;
        Ok(mean)
    }

    /// Plain-value encoding for inference paths.
    pub fn encode_text(&self, text: &str) -> Result<Tensor, ScorerError> {
        let mut tape = Tape::new();
        let node = self.encode_text_node(&mut tape, text)?;
        Ok(tape.value(node).clone())
    }

    /// Cosine similarities between the question and each expression text.
    pub fn score_expressions(
        &self,
        question: &str,
        texts: &[&str],
    ) -> Result<Vec<f64>, ScorerError> {
        let q = self.encode_text(question)?;
        texts
            .iter()
            .map(|t| Ok(cosine_values(q.values(), self.encode_text(t)?.values())))
            .collect()
    }

    /// Picks the expression most similar to the question. Ties fall to the
    /// smaller mention count, then lexicographically smaller text, so the
    /// winner is independent of input order. `None` signals an empty set
    /// (no explanation available).
    pub fn select_optimal(
        &self,
        question: &str,
        expressions: &[Expression],
    ) -> Result<Option<Selected>, ScorerError> {
        if expressions.is_empty() {
            return Ok(None);
        }
        let texts: Vec<&str> = expressions.iter().map(|e| e.text.as_str()).collect();
        let sims = self.score_expressions(question, &texts)?;
        let mut best = 0usize;
        for i in 1..expressions.len() {
            let cand = (&expressions[i], sims[i]);
            let cur = (&expressions[best], sims[best]);
            let better = match cand.1.partial_cmp(&cur.1).expect("finite similarity") {
                std::cmp::Ordering::Greater => true,
                std::cmp::Ordering::Less => false,
                std::cmp::Ordering::Equal => match cand.0.mention_count.cmp(&cur.0.mention_count)
                {
                    std::cmp::Ordering::Less => true,
                    std::cmp::Ordering::Greater => false,
                    std::cmp::Ordering::Equal => cand.0.text < cur.0.text,
                },
            };
            if better {
                best = i;
            }
        }
        Ok(Some(Selected {
            index: best,
            similarity: sims[best],
            similarities: sims,
        }))
    }

    /// Triplet hinge over every (positive, negative) pair:
    /// Σ max(Sim(nl_n, q_t) − Sim(nl_p, q_t) + margin, 0).
    pub fn triplet_finetune_loss(
        &self,
        tape: &mut Tape,
        question: &str,
        positives: &[&str],
        negatives: &[&str],
        margin: f64,
    ) -> Result<NodeId, ScorerError> {
        if positives.is_empty() || negatives.is_empty() {
            return Ok(tape.constant(Tensor::scalar(0.0))?);
        }
        let q = self.encode_text_node(tape, question)?;
        let pos: Vec<NodeId> = positives
            .iter()
            .map(|t| {
                let n = self.encode_text_node(tape, t)?;
                tape.cosine(n, q).map_err(ScorerError::from)
            })
            .collect::<Result<_, _>>()?;
        let neg: Vec<NodeId> = negatives
            .iter()
            .map(|t| {
                let n = self.encode_text_node(tape, t)?;
                tape.cosine(n, q).map_err(ScorerError::from)
            })
            .collect::<Result<_, _>>()?;
        let mut acc: Option<NodeId> = None;
        for &sp in &pos {
            for &sn in &neg {
                let gap = tape.sub(sn, sp)?;
                let shifted = tape.add_scalar(gap, margin)?;
                let hinge = tape.relu(shifted)?;
                acc = Some(match acc {
                    Some(a) => tape.add(a, hinge)?,
                    None => hinge,
                });
            }
        }
        Ok(acc.expect("both sets nonempty"))
    }
}

/// Outcome of expression selection.
#[derive(Clone, Debug)]
pub struct Selected {
    pub index: usize,
    pub similarity: f64,
    /// Similarity per input expression, for inspection.
    pub similarities: Vec<f64>,
}

/// Cosine of two plain vectors; 0 when either is the zero vector.
pub fn cosine_values(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// One expression as carried by weak labels.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledExpression {
    pub text: String,
    pub mention_count: usize,
}

/// Voted weak supervision for one question.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct WeakLabelSet {
    pub positives: Vec<LabeledExpression>,
    pub negatives: Vec<LabeledExpression>,
    /// Expression text → upvotes minus downvotes.
    pub votes: BTreeMap<String, i64>,
    /// Expression text → entities its query pattern matches.
    pub matched: BTreeMap<String, BTreeSet<EntityId>>,
}

impl WeakLabelSet {
    /// All expressions, positives first, each list sorted by text.
    pub fn all_expressions(&self) -> Vec<Expression> {
        self.positives
            .iter()
            .chain(&self.negatives)
            .map(|l| Expression {
                text: l.text.clone(),
                mention_count: l.mention_count,
                sources: Vec::new(),
            })
            .collect()
    }

    pub fn is_positive(&self, text: &str) -> bool {
        self.positives.iter().any(|l| l.text == text)
    }
}

/// Generates weak labels for one question: extract subgraphs for every
/// entity in candidates ∪ answers, execute each expression's pattern, vote
/// matched sets against the answer set, and split by (max vote, min
/// mention count).
pub fn predict_pos_neg(
    kg: &KnowledgeGraph,
    example: &QaExample,
    candidates: &[EntityId],
    max_len: usize,
    fast: bool,
) -> Result<WeakLabelSet, ScorerError> {
    let answer_set: BTreeSet<EntityId> = example.answers.iter().copied().collect();
    let mut pool: BTreeSet<EntityId> = candidates.iter().copied().collect();
    pool.extend(&answer_set);
    let topics: BTreeSet<EntityId> = example.topic_entities.iter().copied().collect();

    let mut mention_counts: BTreeMap<String, usize> = BTreeMap::new();
    let mut matched: BTreeMap<String, BTreeSet<EntityId>> = BTreeMap::new();
    for &e in &pool {
        let subgraphs = extract_candidates(kg, &[e], &example.topic_entities, max_len, fast)?;
        let expressions = build_expression_set(&subgraphs, &example.question, kg, &topics);
        for expr in expressions {
            let entry = mention_counts
                .entry(expr.text.clone())
                .or_insert(expr.mention_count);
            *entry = (*entry).min(expr.mention_count);
            let hits = matched.entry(expr.text.clone()).or_default();
            for &i in &expr.sources {
                hits.extend(kg.execute_query(&subgraphs[i].to_query())?);
            }
        }
    }
    if matched.is_empty() {
        return Ok(WeakLabelSet::default());
    }

    let votes: BTreeMap<String, i64> = matched
        .iter()
        .map(|(text, ents)| {
            let up = ents.intersection(&answer_set).count() as i64;
            let down = ents.len() as i64 - up;
            (text.clone(), up - down)
        })
        .collect();
    let max_vote = *votes.values().max().expect("nonempty");
    let min_len = votes
        .iter()
        .filter(|(_, &v)| v == max_vote)
        .map(|(text, _)| mention_counts[text])
        .min()
        .expect("nonempty");

    let mut positives = Vec::new();
    let mut negatives = Vec::new();
    for (text, &count) in &mention_counts {
        let labeled = LabeledExpression {
            text: text.clone(),
            mention_count: count,
        };
        if votes[text] == max_vote && count == min_len {
            positives.push(labeled);
        } else {
            negatives.push(labeled);
        }
    }
    Ok(WeakLabelSet {
        positives,
        negatives,
        votes,
        matched,
    })
}

#[derive(Serialize, Deserialize)]
struct RawLabelRecord {
    id: String,
    positives: Vec<LabeledExpression>,
    negatives: Vec<LabeledExpression>,
    votes: BTreeMap<String, i64>,
}

/// Writes one JSONL record per question so label generation can be skipped
/// on later runs. Matched-entity sets are recomputable and not cached.
pub fn save_labels(path: &FsPath, records: &[(String, WeakLabelSet)]) -> Result<(), ScorerError> {
    let display = path.display().to_string();
    let mut text = String::new();
    for (id, labels) in records {
        let raw = RawLabelRecord {
            id: id.clone(),
            positives: labels.positives.clone(),
            negatives: labels.negatives.clone(),
            votes: labels.votes.clone(),
        };
        text.push_str(&serde_json::to_string(&raw).expect("serializable"));
        text.push('\n');
    }
    fs::write(path, text).map_err(|source| ScorerError::Io {
        path: display,
        source,
    })
}

pub fn load_labels(path: &FsPath) -> Result<Vec<(String, WeakLabelSet)>, ScorerError> {
    let display = path.display().to_string();
    let text = fs::read_to_string(path).map_err(|source| ScorerError::Io {
        path: display.clone(),
        source,
    })?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawLabelRecord =
            serde_json::from_str(line).map_err(|e| ScorerError::Malformed {
                path: display.clone(),
                line: i + 1,
                detail: e.to_string(),
            })?;
        out.push((
            raw.id,
            WeakLabelSet {
                positives: raw.positives,
                negatives: raw.negatives,
                votes: raw.votes,
                matched: BTreeMap::new(),
            },
        ));
    }
    Ok(out)
}

/// Fine-tuning hyperparameters.
#[derive(Clone, Debug)]
pub struct FinetuneConfig {
    pub dim: usize,
    /// Triplet margin ε′.
    pub margin: f64,
    pub lr: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            dim: 64,
            margin: 0.1,
            lr: 1e-3,
            epochs: 10,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct FinetuneEpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub valid_selection_accuracy: f64,
}

/// Fraction of questions whose selected expression is a positive. A
/// question with no expressions cannot select and counts as a miss.
pub fn selection_accuracy(
    encoder: &TextEncoder,
    records: &[(&str, &WeakLabelSet)],
) -> Result<f64, ScorerError> {
    if records.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0usize;
    for (question, labels) in records {
        let expressions = labels.all_expressions();
        if let Some(sel) = encoder.select_optimal(question, &expressions)? {
            if labels.is_positive(&expressions[sel.index].text) {
                hits += 1;
            }
        }
    }
    Ok(hits as f64 / records.len() as f64)
}

/// Fine-tunes a fresh encoder on weak labels. Questions lacking positives
/// or negatives are skipped (their pair set is empty). After each epoch the
/// validation selection accuracy decides whether to snapshot parameters;
/// best snapshot wins, ties keep the earliest. Zero epochs return the
/// untouched initial encoder.
pub fn finetune(
    train: &[(&str, &WeakLabelSet)],
    valid: &[(&str, &WeakLabelSet)],
    vocab: FrozenVocab,
    config: FinetuneConfig,
    mut on_epoch: impl FnMut(&FinetuneEpochStats),
) -> Result<TextEncoder, ScorerError> {
    let mut encoder = TextEncoder::new(vocab, config.dim, config.seed)?;
    let mut adam = Adam::new(AdamConfig::with_lr(config.lr), &encoder.store);
    let mut best: Option<(f64, ParamStore)> = None;
    for epoch in 1..=config.epochs {
        let mut loss_sum = 0.0;
        let mut trained = 0usize;
        for (question, labels) in train {
            if labels.positives.is_empty() || labels.negatives.is_empty() {
                continue;
            }
            let pos: Vec<&str> = labels.positives.iter().map(|l| l.text.as_str()).collect();
            let neg: Vec<&str> = labels.negatives.iter().map(|l| l.text.as_str()).collect();
            let mut tape = Tape::new();
            let loss =
                encoder.triplet_finetune_loss(&mut tape, question, &pos, &neg, config.margin)?;
            loss_sum += tape.value(loss).item();
            trained += 1;
            encoder.store.zero_grads();
            tape.backward(loss, &mut encoder.store)?;
            adam.step(&mut encoder.store);
        }
        let accuracy = selection_accuracy(&encoder, valid)?;
        on_epoch(&FinetuneEpochStats {
            epoch,
            mean_loss: if trained == 0 {
                0.0
            } else {
                loss_sum / trained as f64
            },
            valid_selection_accuracy: accuracy,
        });
        if !valid.is_empty() {
            let improved = match &best {
                Some((b, _)) => accuracy > *b,
                None => true,
            };
            if improved {
                best = Some((accuracy, encoder.store.clone()));
            }
        }
    }
    if let Some((_, snapshot)) = best {
        encoder.store = snapshot;
    }
    Ok(encoder)
}
