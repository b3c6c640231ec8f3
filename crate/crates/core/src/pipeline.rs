//! End-to-end answering and evaluation: Step-I candidate retrieval by
//! embedding distance, Step-II subgraph extraction and expression
//! selection, answer-set construction, and QA/explanation metrics.

use std::collections::BTreeSet;

use serde::Serialize;

use crate::dataset::QaExample;
use crate::gnn::{forward, select_candidates, GnnError, GnnModel};
use crate::kg::{EntityId, KgError, KnowledgeGraph, Triple};
use crate::reason::{build_expression_set, extract_candidates, CandidateSubgraph};
use crate::scorer::{ScorerError, TextEncoder};
use crate::encoder::tokenize_and_mask;
use crate::numerics::Tape;

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Gnn(#[from] GnnError),
    #[error(transparent)]
    Scorer(#[from] ScorerError),
    #[error(transparent)]
    Kg(#[from] KgError),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("example {id}: missing gold chain")]
    MissingGoldChain { id: String },
}

/// Whether Step-II runs or answers come from Step-I distances alone.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AnswerMode {
    Full,
    StepOneOnly,
}

#[derive(Clone, Debug)]
pub struct PipelineConfig {
    /// Candidates kept after Step-I (top-N by distance).
    pub top_n: usize,
    /// Path length budget for subgraph extraction.
    pub max_len: usize,
    /// Distance multiplier bounding Step-I answer sets.
    pub multiplier: f64,
    /// Shortest-paths-only extraction.
    pub fast: bool,
    pub mode: AnswerMode,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            top_n: 10,
            max_len: 2,
            multiplier: 1.05,
            fast: false,
            mode: AnswerMode::Full,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.top_n == 0 {
            return Err(PipelineError::InvalidConfig("top_n must be >= 1".into()));
        }
        if self.max_len == 0 {
            return Err(PipelineError::InvalidConfig("max_len must be >= 1".into()));
        }
        if self.multiplier < 1.0 {
            return Err(PipelineError::InvalidConfig(
                "multiplier must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Both trained models.
pub struct Models {
    pub gnn: GnnModel,
    pub encoder: TextEncoder,
}

/// One answered question.
#[derive(Clone, Debug)]
pub struct AnswerResult {
    /// Best answer: smallest Step-I distance among the answer set.
    pub top1: EntityId,
    /// Answer entities with their Step-I distances, distance-ascending.
    pub answers: Vec<(EntityId, f64)>,
    /// Winning expression text (absent on fallback).
    pub expression: Option<String>,
    /// Reasoning subgraphs behind the winning expression.
    pub subgraphs: Vec<CandidateSubgraph>,
    /// True when the result came from Step-I alone.
    pub fallback: bool,
    /// Every scored expression with its similarity, for inspection.
    pub scored_expressions: Vec<(String, f64)>,
}

/// Entities within `multiplier` of the smallest distance.
pub fn answer_set(candidates: &[(EntityId, f64)], multiplier: f64) -> Vec<(EntityId, f64)> {
    let Some(min) = candidates
        .iter()
        .map(|&(_, d)| d)
        .min_by(|a, b| a.partial_cmp(b).expect("finite distances"))
    else {
        return Vec::new();
    };
    candidates
        .iter()
        .filter(|&&(_, d)| d <= multiplier * min)
        .copied()
        .collect()
}

fn question_tokens(kg: &KnowledgeGraph, ex: &QaExample) -> Vec<String> {
    let mentions: Vec<String> = ex
        .topic_entities
        .iter()
        .map(|&t| kg.entity_label(t).to_string())
        .collect();
    tokenize_and_mask(&ex.question, &mentions)
}

/// Answers one question with the two-step pipeline.
pub fn answer(
    kg: &KnowledgeGraph,
    example: &QaExample,
    models: &Models,
    config: &PipelineConfig,
) -> Result<AnswerResult, PipelineError> {
    config.validate()?;
    let mut tape = Tape::new();
    let fwd = forward(
        &mut tape,
        &models.gnn,
        kg,
        &question_tokens(kg, example),
        &example.topic_entities,
    )?;
    let candidates = select_candidates(&fwd.distances, config.top_n);

    let step_one_result = |fallback: bool| -> AnswerResult {
        let answers = answer_set(&candidates, config.multiplier);
        AnswerResult {
            top1: answers[0].0,
            answers,
            expression: None,
            subgraphs: Vec::new(),
            fallback,
            scored_expressions: Vec::new(),
        }
    };
    if config.mode == AnswerMode::StepOneOnly {
        return Ok(step_one_result(true));
    }

    let candidate_ids: Vec<EntityId> = candidates.iter().map(|&(e, _)| e).collect();
    let subgraphs = extract_candidates(
        kg,
        &candidate_ids,
        &example.topic_entities,
        config.max_len,
        config.fast,
    )?;
    if subgraphs.is_empty() {
        return Ok(step_one_result(true));
    }
    let topic_set: BTreeSet<EntityId> = example.topic_entities.iter().copied().collect();
    let expressions = build_expression_set(&subgraphs, &example.question, kg, &topic_set);
    let selected = models
        .encoder
        .select_optimal(&example.question, &expressions)?
        .expect("nonempty subgraphs produce expressions");
    let winner = &expressions[selected.index];

    let winning_subgraphs: Vec<CandidateSubgraph> = winner
        .sources
        .iter()
        .map(|&i| subgraphs[i].clone())
        .collect();
    let mut answer_ids: Vec<EntityId> = winning_subgraphs
        .iter()
        .map(|sg| sg.candidate)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    answer_ids.sort_by(|&a, &b| {
        fwd.distances[a]
            .partial_cmp(&fwd.distances[b])
            .expect("finite distances")
            .then(a.cmp(&b))
    });
    let answers: Vec<(EntityId, f64)> = answer_ids
        .into_iter()
        .map(|e| (e, fwd.distances[e]))
        .collect();
    Ok(AnswerResult {
        top1: answers[0].0,
        answers,
        expression: Some(winner.text.clone()),
        subgraphs: winning_subgraphs,
        fallback: false,
        scored_expressions: expressions
            .iter()
            .zip(&selected.similarities)
            .map(|(e, &s)| (e.text.clone(), s))
            .collect(),
    })
}

/// Aggregate plus per-question metrics; field names are the report format.
#[derive(Clone, Debug, Serialize)]
pub struct Metrics {
    pub hits_at_1: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub per_question: Vec<QuestionMetrics>,
}

#[derive(Clone, Debug, Serialize)]
pub struct QuestionMetrics {
    pub id: String,
    pub hit: bool,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub fallback: bool,
}

fn prf(predicted: usize, gold: usize, overlap: usize) -> (f64, f64, f64) {
    if predicted == 0 || gold == 0 {
        return (0.0, 0.0, 0.0);
    }
    let p = overlap as f64 / predicted as f64;
    let r = overlap as f64 / gold as f64;
    let f1 = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    (p, r, f1)
}

fn aggregate(rows: Vec<QuestionMetrics>) -> Metrics {
    let n = rows.len().max(1) as f64;
    Metrics {
        hits_at_1: rows.iter().filter(|r| r.hit).count() as f64 / n,
        precision: rows.iter().map(|r| r.precision).sum::<f64>() / n,
        recall: rows.iter().map(|r| r.recall).sum::<f64>() / n,
        f1: rows.iter().map(|r| r.f1).sum::<f64>() / n,
        per_question: rows,
    }
}

/// QA metrics from raw predictions: (id, top1, predicted set, gold set,
/// fallback) per question. Macro-averaged.
pub fn qa_metrics(
    rows: impl IntoIterator<Item = (String, EntityId, BTreeSet<EntityId>, BTreeSet<EntityId>, bool)>,
) -> Metrics {
    let per_question = rows
        .into_iter()
        .map(|(id, top1, predicted, gold, fallback)| {
            let overlap = predicted.intersection(&gold).count();
            let (precision, recall, f1) = prf(predicted.len(), gold.len(), overlap);
            QuestionMetrics {
                id,
                hit: gold.contains(&top1),
                precision,
                recall,
                f1,
                fallback,
            }
        })
        .collect();
    aggregate(per_question)
}

/// Explanation metrics from raw triple sets per question.
pub fn explanation_metrics(
    rows: impl IntoIterator<Item = (String, BTreeSet<Triple>, BTreeSet<Triple>, bool)>,
) -> Metrics {
    let per_question = rows
        .into_iter()
        .map(|(id, predicted, gold, fallback)| {
            let overlap = predicted.intersection(&gold).count();
            let (precision, recall, f1) = prf(predicted.len(), gold.len(), overlap);
            QuestionMetrics {
                id,
                // An explanation "hit" means full agreement.
                hit: predicted == gold && !gold.is_empty(),
                precision,
                recall,
                f1,
                fallback,
            }
        })
        .collect();
    aggregate(per_question)
}

/// Runs the pipeline over a dataset and scores answers against gold.
pub fn evaluate_qa(
    kg: &KnowledgeGraph,
    dataset: &[QaExample],
    models: &Models,
    config: &PipelineConfig,
) -> Result<Metrics, PipelineError> {
    let mut rows = Vec::with_capacity(dataset.len());
    for ex in dataset {
        let result = answer(kg, ex, models, config)?;
        rows.push((
            ex.id.clone(),
            result.top1,
            result.answers.iter().map(|&(e, _)| e).collect(),
            ex.answers.iter().copied().collect(),
            result.fallback,
        ));
    }
    Ok(qa_metrics(rows))
}

/// Scores returned reasoning subgraphs against gold chains on the triple
/// level. Subgraph triples are stored-orientation already; gold chains are
/// normalized the same way. Every example must carry a gold chain.
pub fn evaluate_explanations(
    kg: &KnowledgeGraph,
    dataset: &[QaExample],
    models: &Models,
    config: &PipelineConfig,
) -> Result<Metrics, PipelineError> {
    let mut rows = Vec::with_capacity(dataset.len());
    for ex in dataset {
        let gold: BTreeSet<Triple> = match &ex.gold_chain {
            Some(chain) => chain.iter().map(|o| o.triple).collect(),
            None => {
                return Err(PipelineError::MissingGoldChain { id: ex.id.clone() });
            }
        };
        let result = answer(kg, ex, models, config)?;
        let predicted: BTreeSet<Triple> = result
            .subgraphs
            .iter()
            .flat_map(|sg| sg.triples())
            .collect();
        rows.push((ex.id.clone(), predicted, gold, result.fallback));
    }
    Ok(explanation_metrics(rows))
}
