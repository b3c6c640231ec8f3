//! Explicit reasoning over candidate answers: extract the subgraphs
//! connecting a candidate to every topic entity, and rewrite each subgraph
//! into a deterministic natural-language expression.

use std::collections::BTreeSet;

use crate::encoder::tokenize;
use crate::kg::{EntityId, KgError, KnowledgeGraph, Path, PatternPath, QueryGraph, RelationId, Triple};

/// One candidate answer plus one connecting path per topic entity, in
/// topic order. The candidate is the shared source of every path.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CandidateSubgraph {
    pub candidate: EntityId,
    pub paths: Vec<Path>,
}

impl CandidateSubgraph {
    /// The subgraph's triples in stored orientation, deduplicated.
    pub fn triples(&self) -> BTreeSet<Triple> {
        self.paths
            .iter()
            .flatten()
            .map(|o| o.triple)
            .collect()
    }

    pub fn entities(&self) -> BTreeSet<EntityId> {
        let mut out = BTreeSet::from([self.candidate]);
        for path in &self.paths {
            for o in path {
                out.insert(o.to());
            }
        }
        out
    }

    pub fn relations(&self) -> BTreeSet<RelationId> {
        self.paths
            .iter()
            .flatten()
            .map(|o| o.triple.relation)
            .collect()
    }

    /// The subgraph as a query pattern: the candidate becomes the answer
    /// variable, interior entities become per-path variables, topics stay
    /// fixed terminals.
    pub fn to_query(&self) -> QueryGraph {
        QueryGraph {
            paths: self
                .paths
                .iter()
                .map(|path| PatternPath {
                    steps: path.iter().map(|o| (o.triple.relation, o.inverse)).collect(),
                    terminal: path.last().map(|o| o.to()).unwrap_or(self.candidate),
                })
                .collect(),
        }
    }
}

/// Extracts candidate reasoning subgraphs for each candidate answer: the
/// Cartesian product of its per-topic path sets. Candidates missing a path
/// to any topic are skipped. `fast` keeps only shortest paths (still within
/// `max_len`), which prunes the product sharply; every fast subgraph is
/// also a full-mode subgraph.
pub fn extract_candidates(
    kg: &KnowledgeGraph,
    candidates: &[EntityId],
    topics: &[EntityId],
    max_len: usize,
    fast: bool,
) -> Result<Vec<CandidateSubgraph>, KgError> {
    if topics.is_empty() {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    for &c in candidates {
        let mut per_topic: Vec<Vec<Path>> = Vec::with_capacity(topics.len());
        let mut connected = true;
        for &t in topics {
            let paths = if fast {
                match kg.distance(c, t)? {
                    Some(d) if d >= 1 && d <= max_len => kg.path_extract(c, t, d)?,
                    _ => Vec::new(),
                }
            } else {
                kg.path_extract(c, t, max_len)?
            };
            if paths.is_empty() {
                connected = false;
                break;
            }
            per_topic.push(paths);
        }
        if !connected {
            continue;
        }
        // Odometer over the per-topic path lists keeps output ordered by
        // (candidate, lexicographic path choice).
        let mut idx = vec![0usize; per_topic.len()];
        loop {
            out.push(CandidateSubgraph {
                candidate: c,
                paths: idx
                    .iter()
                    .enumerate()
                    .map(|(i, &j)| per_topic[i][j].clone())
                    .collect(),
            });
            let mut pos = per_topic.len();
            loop {
                if pos == 0 {
                    break;
                }
                pos -= 1;
                idx[pos] += 1;
                if idx[pos] < per_topic[pos].len() {
                    break;
                }
                idx[pos] = 0;
            }
            if idx.iter().all(|&j| j == 0) {
                break;
            }
        }
    }
    Ok(out)
}

const WH_WORDS: [&str; 9] = [
    "who", "what", "when", "where", "which", "whom", "whose", "why", "how",
];

/// Tokens the rewriter emits besides KG labels. A token table that misses
/// them collapses distinct expressions onto the unknown vector, so corpus
/// builders should include these.
pub fn rewrite_vocabulary() -> Vec<String> {
    let glue = ["is", "the", "of", "an", "entity", "that", "has", "and"];
    WH_WORDS
        .iter()
        .chain(glue.iter())
        .map(|s| s.to_string())
        .collect()
}

/// The first interrogative appearing in the question, or "what" when none
/// appears.
pub fn wh_pred(question: &str) -> &'static str {
    for token in tokenize(question) {
        if let Some(w) = WH_WORDS.iter().find(|w| **w == token) {
            return w;
        }
    }
    "what"
}

/// A rewritten subgraph: the expression text plus how many KG items
/// (relations and topic-entity labels) it mentions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Expression {
    pub text: String,
    pub mention_count: usize,
    /// Indices into the subgraph list this expression was built from.
    pub sources: Vec<usize>,
}

/// Rewrites one subgraph to text. Walking each path away from the
/// candidate: a triple traversed tail-to-head reads " is the {relation}
/// of", head-to-tail reads " has the {relation}"; the entity reached reads
/// as its label when it is a topic entity and " an entity that" otherwise.
/// Paths are joined with " and". Relation labels are lowercased.
pub fn rewrite(
    subgraph: &CandidateSubgraph,
    question: &str,
    kg: &KnowledgeGraph,
    topics: &BTreeSet<EntityId>,
) -> (String, usize) {
    let mut text = wh_pred(question).to_string();
    let mut mentions = 0usize;
    for (i, path) in subgraph.paths.iter().enumerate() {
        if i > 0 {
            text.push_str(" and");
        }
        for o in path {
            let label = kg.relation_label(o.triple.relation).to_lowercase();
            if o.inverse {
                text.push_str(" is the ");
                text.push_str(&label);
                text.push_str(" of");
            } else {
                text.push_str(" has the ");
                text.push_str(&label);
            }
            mentions += 1;
            let reached = o.to();
            if topics.contains(&reached) {
                text.push(' ');
                text.push_str(kg.entity_label(reached));
                mentions += 1;
            } else {
                text.push_str(" an entity that");
            }
        }
    }
    (text, mentions)
}

/// Rewrites every subgraph and groups identical texts into expressions.
/// Output is sorted by text; `sources` keeps each expression tied to the
/// subgraphs that produced it.
pub fn build_expression_set(
    subgraphs: &[CandidateSubgraph],
    question: &str,
    kg: &KnowledgeGraph,
    topics: &BTreeSet<EntityId>,
) -> Vec<Expression> {
    let mut grouped: std::collections::BTreeMap<String, (usize, Vec<usize>)> =
        std::collections::BTreeMap::new();
    for (i, sg) in subgraphs.iter().enumerate() {
        let (text, mentions) = rewrite(sg, question, kg, topics);
        let entry = grouped.entry(text).or_insert((mentions, Vec::new()));
        entry.0 = entry.0.min(mentions);
        entry.1.push(i);
    }
    grouped
        .into_iter()
        .map(|(text, (mention_count, sources))| Expression {
            text,
            mention_count,
            sources,
        })
        .collect()
}
