//! Synthetic benchmark generator: a random sparse knowledge graph plus
//! templated k-hop questions with planted reasoning chains.
//!
//! Every question is built by walking `hops` edges from a topic entity and
//! treating the walked relation pattern as gold. Gold answers come from
//! executing that pattern, so they are correct by construction. Planted
//! questions are rejected unless the gold pattern is the strongest
//! possible weak-label winner: no strictly shorter pattern matches the
//! same answer set, every answer realizes the pattern along a simple
//! shortest path, and the answer set stays small.

use std::collections::BTreeSet;

use rand::Rng;

use crate::dataset::{QaDataset, QaExample};
use crate::kg::{
    EntityId, KgError, KnowledgeGraph, OrientedTriple, PatternPath, QueryGraph, Triple,
};
use crate::{seeded_rng, RngStream};

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("could not plant enough questions ({planted} of {wanted}); the graph is too small or too dense for the requested hop count")]
    Infeasible { planted: usize, wanted: usize },
    #[error(transparent)]
    Kg(#[from] KgError),
}

/// Relation surface forms: the label stored in the KG (and echoed by
/// expressions) plus a synonym used only by paraphrased questions.
const RELATION_WORDS: [(&str, &str); 16] = [
    ("created", "made"),
    ("leads", "commands"),
    ("owns", "holds"),
    ("follows", "trails"),
    ("guards", "protects"),
    ("feeds", "nourishes"),
    ("trains", "coaches"),
    ("visits", "tours"),
    ("borders", "touches"),
    ("supplies", "stocks"),
    ("teaches", "instructs"),
    ("employs", "hires"),
    ("honors", "praises"),
    ("hosts", "welcomes"),
    ("funds", "backs"),
    ("carries", "hauls"),
];

const CONNECTORS: [&str; 3] = ["something that", "the one that", "a thing that"];
const WH_CHOICES: [&str; 3] = ["what", "which", "who"];

#[derive(Clone, Debug)]
pub struct SynthConfig {
    pub entities: usize,
    pub relations: usize,
    /// Planted chain length; also the natural `max_len` for answering.
    pub hops: usize,
    pub train: usize,
    pub valid: usize,
    pub test: usize,
    /// Extra random edges beyond the spanning tree, as a fraction of the
    /// entity count. Controls how many competing paths questions face.
    pub extra_edge_factor: f64,
    /// Fraction of questions phrased with relation synonyms instead of the
    /// stored labels. These are the questions fine-tuning must learn.
    pub paraphrase_fraction: f64,
    /// Reject planted questions with more gold answers than this.
    pub max_answers: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            entities: 500,
            relations: 12,
            hops: 2,
            train: 200,
            valid: 25,
            test: 50,
            extra_edge_factor: 0.4,
            paraphrase_fraction: 0.3,
            max_answers: 4,
            seed: 7,
        }
    }
}

impl SynthConfig {
    fn validate(&self) -> Result<(), SynthError> {
        let bad = |msg: &str| Err(SynthError::InvalidConfig(msg.into()));
        if self.entities < self.hops + 2 {
            return bad("need at least hops + 2 entities");
        }
        if self.relations < 2 {
            return bad("need at least 2 relations");
        }
        if self.relations > RELATION_WORDS.len() {
            return Err(SynthError::InvalidConfig(format!(
                "at most {} relations are supported by the label pool",
                RELATION_WORDS.len()
            )));
        }
        if self.hops == 0 {
            return bad("hops must be >= 1");
        }
        if self.train + self.valid + self.test == 0 {
            return bad("no questions requested");
        }
        if !(0.0..=1.0).contains(&self.paraphrase_fraction) {
            return bad("paraphrase_fraction must be in [0, 1]");
        }
        if self.extra_edge_factor < 0.0 {
            return bad("extra_edge_factor must be non-negative");
        }
        if self.max_answers == 0 {
            return bad("max_answers must be >= 1");
        }
        Ok(())
    }
}

const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
const VOWELS: &[u8] = b"aeiou";

fn syllabic_name(rng: &mut impl Rng, used: &mut BTreeSet<String>) -> String {
    loop {
        let syllables = rng.gen_range(3..=4);
        let mut name = String::new();
        for _ in 0..syllables {
            name.push(CONSONANTS[rng.gen_range(0..CONSONANTS.len())] as char);
            name.push(VOWELS[rng.gen_range(0..VOWELS.len())] as char);
        }
        if used.insert(name.clone()) {
            return name;
        }
    }
}

/// One walked step, oriented from the topic side: `inverse` false means
/// the stored triple points along the walk.
type Step = (usize, bool);

struct PlantedQuestion {
    topic: EntityId,
    /// Steps from the topic toward the answer.
    steps: Vec<Step>,
    answers: Vec<EntityId>,
    gold_chain: Vec<OrientedTriple>,
    paraphrase: bool,
    wh: &'static str,
    connector: &'static str,
}

/// Pattern steps in answer→topic order, as required by query execution and
/// by the rewriting direction.
fn reversed_steps(steps: &[Step]) -> Vec<Step> {
    steps
        .iter()
        .rev()
        .map(|&(r, inv)| (r, !inv))
        .collect()
}

fn pattern_query(topic: EntityId, steps: &[Step]) -> QueryGraph {
    QueryGraph {
        paths: vec![PatternPath {
            steps: reversed_steps(steps),
            terminal: topic,
        }],
    }
}

/// All distinct step sequences of length ≤ max_len realized by walks from
/// `start`, collected by breadth-first expansion. Homomorphism semantics:
/// walks may revisit nodes, mirroring query execution.
fn realized_patterns(
    kg: &KnowledgeGraph,
    start: EntityId,
    max_len: usize,
) -> BTreeSet<Vec<Step>> {
    let mut out = BTreeSet::new();
    let mut frontier: Vec<(EntityId, Vec<Step>)> = vec![(start, Vec::new())];
    for _ in 0..max_len {
        let mut next = Vec::new();
        for (node, steps) in frontier {
            let neighbors = kg.neighbors(node).expect("node ids come from the graph");
            for o in neighbors {
                let mut extended = steps.clone();
                extended.push((o.triple.relation, o.inverse));
                out.insert(extended.clone());
                next.push((o.to(), extended));
            }
        }
        // Deduplicate states by (node, steps) to bound growth.
        next.sort_by(|a, b| (a.0, &a.1).cmp(&(b.0, &b.1)));
        next.dedup();
        frontier = next;
    }
    out
}

/// The triples of every simple path from an answer to the topic that
/// matches the planted pattern, unioned over all answers.
fn pattern_support(
    kg: &KnowledgeGraph,
    topic: EntityId,
    steps: &[Step],
    answers: &[EntityId],
) -> Result<Vec<OrientedTriple>, KgError> {
    let wanted = reversed_steps(steps);
    let mut support: BTreeSet<OrientedTriple> = BTreeSet::new();
    for &a in answers {
        for path in kg.path_extract(a, topic, steps.len())? {
            if path.len() != wanted.len() {
                continue;
            }
            let signature: Vec<Step> = path
                .iter()
                .map(|o| (o.triple.relation, o.inverse))
                .collect();
            if signature == wanted {
                support.extend(path);
            }
        }
    }
    Ok(support.into_iter().collect())
}

/// Each answer must admit a simple path realizing the pattern and sit at
/// graph distance exactly `hops` from the topic, so shortest-path
/// extraction keeps the gold subgraph and rewriting can reach it.
fn answers_realize_pattern(
    kg: &KnowledgeGraph,
    topic: EntityId,
    steps: &[Step],
    answers: &[EntityId],
) -> Result<bool, KgError> {
    let wanted = reversed_steps(steps);
    for &a in answers {
        if kg.distance(a, topic)? != Some(steps.len()) {
            return Ok(false);
        }
        let mut found = false;
        for path in kg.path_extract(a, topic, steps.len())? {
            let signature: Vec<Step> =
                path.iter().map(|o| (o.triple.relation, o.inverse)).collect();
            if signature == wanted {
                found = true;
                break;
            }
        }
        if !found {
            return Ok(false);
        }
    }
    Ok(true)
}

/// No strictly shorter pattern may match exactly the gold answers, since
/// voting would then prefer it over the planted chain.
fn shorter_pattern_matches(
    kg: &KnowledgeGraph,
    topic: EntityId,
    hops: usize,
    answers: &BTreeSet<EntityId>,
) -> Result<bool, KgError> {
    for steps in realized_patterns(kg, topic, hops.saturating_sub(1)) {
        if steps.is_empty() {
            continue;
        }
        let matched = kg.execute_query(&pattern_query(topic, &steps))?;
        if &matched == answers {
            return Ok(true);
        }
    }
    Ok(false)
}

fn phrase(step: &Step, paraphrase: bool, relations: &[(&str, &str)]) -> String {
    let (label, synonym) = relations[step.0];
    // Steps here are in answer→topic order, so `inverse` true means the
    // stored triple points at the answer.
    if paraphrase {
        if step.1 {
            format!("is {synonym} by")
        } else {
            format!("{synonym}")
        }
    } else if step.1 {
        format!("is the {label} of")
    } else {
        format!("has the {label}")
    }
}

fn question_text(q: &PlantedQuestion, kg: &KnowledgeGraph, relations: &[(&str, &str)]) -> String {
    let toward_topic = reversed_steps(&q.steps);
    let mut text = q.wh.to_string();
    for (i, step) in toward_topic.iter().enumerate() {
        if i > 0 {
            text.push(' ');
            text.push_str(q.connector);
        }
        text.push(' ');
        text.push_str(&phrase(step, q.paraphrase, relations));
    }
    text.push(' ');
    text.push_str(kg.entity_label(q.topic));
    text.push('?');
    text
}

/// Generates the knowledge graph and question splits. Deterministic for a
/// given config.
pub fn generate_synthetic(config: &SynthConfig) -> Result<(KnowledgeGraph, QaDataset), SynthError> {
    config.validate()?;
    let mut rng = seeded_rng(config.seed, RngStream::Synthetic);

    let mut used = BTreeSet::new();
    let entity_labels: Vec<String> = (0..config.entities)
        .map(|_| syllabic_name(&mut rng, &mut used))
        .collect();
    let relations: Vec<(&str, &str)> = RELATION_WORDS[..config.relations].to_vec();
    let relation_labels: Vec<String> = relations.iter().map(|(l, _)| l.to_string()).collect();

    // Random-attachment spanning tree keeps the graph connected, then
    // extra edges add competing paths.
    let mut triples: BTreeSet<Triple> = BTreeSet::new();
    for i in 1..config.entities {
        let j = rng.gen_range(0..i);
        let relation = rng.gen_range(0..config.relations);
        let (head, tail) = if rng.gen_bool(0.5) { (i, j) } else { (j, i) };
        triples.insert(Triple {
            head,
            relation,
            tail,
        });
    }
    let wanted_extra = (config.extra_edge_factor * config.entities as f64).round() as usize;
    let mut guard = 0usize;
    let mut added = 0usize;
    while added < wanted_extra && guard < wanted_extra * 50 + 100 {
        guard += 1;
        let head = rng.gen_range(0..config.entities);
        let tail = rng.gen_range(0..config.entities);
        if head == tail {
            continue;
        }
        let relation = rng.gen_range(0..config.relations);
        if triples.insert(Triple {
            head,
            relation,
            tail,
        }) {
            added += 1;
        }
    }
    let kg = KnowledgeGraph::new(
        entity_labels,
        relation_labels,
        triples.into_iter().collect(),
    )?;

    let total = config.train + config.valid + config.test;
    let mut planted: Vec<PlantedQuestion> = Vec::with_capacity(total);
    let mut seen: BTreeSet<(EntityId, Vec<Step>)> = BTreeSet::new();
    let max_attempts = total * 400;
    let mut attempts = 0usize;
    while planted.len() < total && attempts < max_attempts {
        attempts += 1;
        let topic = rng.gen_range(0..config.entities);
        // Simple random walk of `hops` edges.
        let mut node = topic;
        let mut visited = BTreeSet::from([topic]);
        let mut steps: Vec<Step> = Vec::with_capacity(config.hops);
        let mut stuck = false;
        for _ in 0..config.hops {
            let options: Vec<&OrientedTriple> = kg
                .neighbors(node)?
                .iter()
                .filter(|o| !visited.contains(&o.to()))
                .collect();
            if options.is_empty() {
                stuck = true;
                break;
            }
            let o = options[rng.gen_range(0..options.len())];
            steps.push((o.triple.relation, o.inverse));
            node = o.to();
            visited.insert(node);
        }
        if stuck || !seen.insert((topic, steps.clone())) {
            continue;
        }
        let matched = kg.execute_query(&pattern_query(topic, &steps))?;
        if matched.is_empty() || matched.len() > config.max_answers {
            continue;
        }
        if !answers_realize_pattern(
            &kg,
            topic,
            &steps,
            &matched.iter().copied().collect::<Vec<_>>(),
        )? {
            continue;
        }
        if shorter_pattern_matches(&kg, topic, config.hops, &matched)? {
            continue;
        }
        let answers: Vec<EntityId> = matched.into_iter().collect();
        let gold_chain = pattern_support(&kg, topic, &steps, &answers)?;
        planted.push(PlantedQuestion {
            topic,
            steps,
            answers,
            gold_chain,
            paraphrase: rng.gen_bool(config.paraphrase_fraction),
            wh: WH_CHOICES[rng.gen_range(0..WH_CHOICES.len())],
            connector: CONNECTORS[rng.gen_range(0..CONNECTORS.len())],
        });
    }
    if planted.len() < total {
        return Err(SynthError::Infeasible {
            planted: planted.len(),
            wanted: total,
        });
    }

    let mut examples: Vec<QaExample> = Vec::with_capacity(total);
    for (i, q) in planted.iter().enumerate() {
        let (split, local) = if i < config.train {
            ("train", i)
        } else if i < config.train + config.valid {
            ("valid", i - config.train)
        } else {
            ("test", i - config.train - config.valid)
        };
        examples.push(QaExample {
            id: format!("{split}-{local}"),
            question: question_text(q, &kg, &relations),
            topic_entities: vec![q.topic],
            answers: q.answers.clone(),
            gold_chain: Some(q.gold_chain.clone()),
        });
    }
    let test = examples.split_off(config.train + config.valid);
    let valid = examples.split_off(config.train);
    let dataset = QaDataset {
        train: examples,
        valid,
        test,
    };
    Ok((kg, dataset))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reason::{extract_candidates, rewrite};

    fn small_config() -> SynthConfig {
        SynthConfig {
            entities: 60,
            relations: 6,
            hops: 2,
            train: 12,
            valid: 3,
            test: 5,
            extra_edge_factor: 0.3,
            paraphrase_fraction: 0.25,
            max_answers: 4,
            seed: 11,
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let (kg1, ds1) = generate_synthetic(&small_config()).unwrap();
        let (kg2, ds2) = generate_synthetic(&small_config()).unwrap();
        assert_eq!(kg1.triples(), kg2.triples());
        assert_eq!(ds1.train, ds2.train);
        assert_eq!(ds1.valid, ds2.valid);
        assert_eq!(ds1.test, ds2.test);
    }

    #[test]
    fn different_seeds_differ() {
        let (_, ds1) = generate_synthetic(&small_config()).unwrap();
        let mut other = small_config();
        other.seed = 12;
        let (_, ds2) = generate_synthetic(&other).unwrap();
        assert_ne!(ds1.train, ds2.train);
    }

    #[test]
    fn split_sizes_and_ids_are_exact() {
        let (_, ds) = generate_synthetic(&small_config()).unwrap();
        assert_eq!(ds.train.len(), 12);
        assert_eq!(ds.valid.len(), 3);
        assert_eq!(ds.test.len(), 5);
        assert_eq!(ds.train[0].id, "train-0");
        assert_eq!(ds.valid[0].id, "valid-0");
        assert_eq!(ds.test[4].id, "test-4");
    }

    #[test]
    fn planted_answers_match_query_execution() {
        let (kg, ds) = generate_synthetic(&small_config()).unwrap();
        for ex in ds.train.iter().chain(&ds.valid).chain(&ds.test) {
            let chain = ex.gold_chain.as_ref().unwrap();
            assert!(!chain.is_empty());
            // Rebuild the pattern from any answer's realization and check
            // execution reproduces the stored answers.
            let topic = ex.topic_entities[0];
            let answer = ex.answers[0];
            let paths = kg.path_extract(answer, topic, 2).unwrap();
            let chain_triples: BTreeSet<Triple> = chain.iter().map(|o| o.triple).collect();
            let gold_path = paths
                .iter()
                .find(|p| p.iter().all(|o| chain_triples.contains(&o.triple)))
                .expect("gold realization among simple paths");
            let query = QueryGraph {
                paths: vec![PatternPath {
                    steps: gold_path
                        .iter()
                        .map(|o| (o.triple.relation, o.inverse))
                        .collect(),
                    terminal: topic,
                }],
            };
            let matched = kg.execute_query(&query).unwrap();
            let stored: BTreeSet<EntityId> = ex.answers.iter().copied().collect();
            assert_eq!(matched, stored, "question {}", ex.id);
        }
    }

    #[test]
    fn answers_sit_at_exact_hop_distance() {
        let (kg, ds) = generate_synthetic(&small_config()).unwrap();
        for ex in ds.test.iter() {
            for &a in &ex.answers {
                assert_eq!(
                    kg.distance(a, ex.topic_entities[0]).unwrap(),
                    Some(2),
                    "question {}",
                    ex.id
                );
            }
        }
    }

    #[test]
    fn question_mentions_topic_label_and_a_wh_word() {
        let (kg, ds) = generate_synthetic(&small_config()).unwrap();
        for ex in ds.train.iter() {
            let label = kg.entity_label(ex.topic_entities[0]);
            assert!(
                ex.question.contains(label),
                "{}: {:?} lacks topic {label:?}",
                ex.id,
                ex.question
            );
            let first = ex.question.split(' ').next().unwrap();
            assert!(["what", "which", "who"].contains(&first));
        }
    }

    #[test]
    fn gold_chain_rewrites_to_an_expression_reachable_at_answer_time() {
        let (kg, ds) = generate_synthetic(&small_config()).unwrap();
        let ex = &ds.test[0];
        let topic = ex.topic_entities[0];
        let topics: BTreeSet<EntityId> = [topic].into_iter().collect();
        let subgraphs = extract_candidates(&kg, &ex.answers, &ex.topic_entities, 2, false).unwrap();
        assert!(!subgraphs.is_empty());
        let chain_triples: BTreeSet<Triple> =
            ex.gold_chain.as_ref().unwrap().iter().map(|o| o.triple).collect();
        let gold_sg = subgraphs
            .iter()
            .find(|sg| sg.paths[0].iter().all(|o| chain_triples.contains(&o.triple)))
            .expect("gold subgraph extracted");
        let (text, _) = rewrite(gold_sg, &ex.question, &kg, &topics);
        assert!(text.starts_with(ex.question.split(' ').next().unwrap()));
        assert!(text.ends_with(kg.entity_label(topic)));
    }

    #[test]
    fn infeasible_configs_error() {
        let mut c = small_config();
        c.entities = 3;
        c.hops = 4;
        assert!(matches!(
            generate_synthetic(&c),
            Err(SynthError::InvalidConfig(_))
        ));

        let mut c = small_config();
        c.relations = 1;
        assert!(generate_synthetic(&c).is_err());

        // More questions than distinct plants available in a tiny graph.
        let mut c = small_config();
        c.entities = 8;
        c.train = 4000;
        assert!(matches!(
            generate_synthetic(&c),
            Err(SynthError::Infeasible { .. })
        ));
    }

    #[test]
    fn three_hop_generation_works() {
        let config = SynthConfig {
            entities: 120,
            hops: 3,
            train: 8,
            valid: 2,
            test: 3,
            seed: 5,
            ..small_config()
        };
        let (kg, ds) = generate_synthetic(&config).unwrap();
        for ex in ds.test.iter() {
            for &a in &ex.answers {
                assert_eq!(kg.distance(a, ex.topic_entities[0]).unwrap(), Some(3));
            }
        }
    }
}
