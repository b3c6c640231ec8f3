//! Byte-exact golden strings for the subgraph rewriter, covering forward
//! and inverse traversal phrasing, interior-entity placeholders, and the
//! multi-topic " and" join.

use std::collections::BTreeSet;

use kgqa_core::kg::{KnowledgeGraph, OrientedTriple, Triple};
use kgqa_core::reason::{build_expression_set, extract_candidates, rewrite, CandidateSubgraph};

fn t(head: usize, relation: usize, tail: usize) -> Triple {
    Triple {
        head,
        relation,
        tail,
    }
}

/// University / city / state fixture. Entity 3 is a district whose only
/// link points at the city.
fn university_kg() -> KnowledgeGraph {
    KnowledgeGraph::new(
        vec![
            "Saint Louis University".into(),
            "St. Louis".into(),
            "Missouri".into(),
            "Greater St. Louis".into(),
        ],
        vec![
            "containedby".into(),
            "state".into(),
            "administrative parent".into(),
        ],
        vec![t(0, 0, 1), t(1, 1, 2), t(3, 2, 1)],
    )
    .unwrap()
}

fn film_kg() -> KnowledgeGraph {
    KnowledgeGraph::new(
        vec![
            "Tim Burton".into(),
            "California".into(),
            "Batman 1989".into(),
            "Michael Keaton".into(),
        ],
        vec!["birthplace".into(), "director".into(), "cast member".into()],
        vec![t(0, 0, 1), t(2, 1, 0), t(2, 2, 3)],
    )
    .unwrap()
}

#[test]
fn two_inverse_hops_rewrite_exactly() {
    let kg = university_kg();
    let topics: BTreeSet<usize> = [0].into();
    // Missouri <-state- St. Louis <-containedby- Saint Louis University,
    // walked from the candidate so both hops are tail-to-head.
    let sg = CandidateSubgraph {
        candidate: 2,
        paths: vec![vec![
            OrientedTriple {
                triple: t(1, 1, 2),
                inverse: true,
            },
            OrientedTriple {
                triple: t(0, 0, 1),
                inverse: true,
            },
        ]],
    };
    let (text, mentions) = rewrite(
        &sg,
        "what state is Saint Louis University in?",
        &kg,
        &topics,
    );
    assert_eq!(
        text,
        "what is the state of an entity that is the containedby of Saint Louis University"
    );
    assert_eq!(mentions, 3);
}

#[test]
fn forward_then_inverse_hop_rewrites_exactly() {
    let kg = university_kg();
    let topics: BTreeSet<usize> = [0].into();
    let sg = CandidateSubgraph {
        candidate: 3,
        paths: vec![vec![
            OrientedTriple {
                triple: t(3, 2, 1),
                inverse: false,
            },
            OrientedTriple {
                triple: t(0, 0, 1),
                inverse: true,
            },
        ]],
    };
    let (text, mentions) = rewrite(
        &sg,
        "what surrounds the city holding Saint Louis University?",
        &kg,
        &topics,
    );
    assert_eq!(
        text,
        "what has the administrative parent an entity that is the containedby of Saint Louis University"
    );
    assert_eq!(mentions, 3);
}

#[test]
fn two_topic_paths_join_with_and() {
    let kg = film_kg();
    let topics: BTreeSet<usize> = [1, 3].into();
    let sg = CandidateSubgraph {
        candidate: 0,
        paths: vec![
            vec![OrientedTriple {
                triple: t(0, 0, 1),
                inverse: false,
            }],
            vec![
                OrientedTriple {
                    triple: t(2, 1, 0),
                    inverse: true,
                },
                OrientedTriple {
                    triple: t(2, 2, 3),
                    inverse: false,
                },
            ],
        ],
    };
    let (text, mentions) = rewrite(
        &sg,
        "who was born in California and directed a film starring Michael Keaton?",
        &kg,
        &topics,
    );
    assert_eq!(
        text,
        "who has the birthplace California and is the director of an entity that has the cast member Michael Keaton"
    );
    assert_eq!(mentions, 5);
}

#[test]
fn extraction_reproduces_the_goldens() {
    let kg = university_kg();
    let topics = [0usize];
    let topic_set: BTreeSet<usize> = topics.iter().copied().collect();

    let subgraphs = extract_candidates(&kg, &[2], &topics, 2, false).unwrap();
    let exprs = build_expression_set(
        &subgraphs,
        "what state is Saint Louis University in?",
        &kg,
        &topic_set,
    );
    assert_eq!(exprs.len(), 1);
    assert_eq!(
        exprs[0].text,
        "what is the state of an entity that is the containedby of Saint Louis University"
    );
    assert_eq!(exprs[0].mention_count, 3);

    let kg = film_kg();
    let topics = [1usize, 3];
    let topic_set: BTreeSet<usize> = topics.iter().copied().collect();
    let subgraphs = extract_candidates(&kg, &[0], &topics, 2, false).unwrap();
    let exprs = build_expression_set(
        &subgraphs,
        "who was born in California and directed a film starring Michael Keaton?",
        &kg,
        &topic_set,
    );
    let golden = "who has the birthplace California and is the director of an entity that has the cast member Michael Keaton";
    assert!(
        exprs.iter().any(|e| e.text == golden),
        "golden missing from {:?}",
        exprs.iter().map(|e| &e.text).collect::<Vec<_>>()
    );
}

#[test]
fn questions_without_interrogatives_fall_back_to_what() {
    let kg = university_kg();
    let topics: BTreeSet<usize> = [0].into();
    let sg = CandidateSubgraph {
        candidate: 1,
        paths: vec![vec![OrientedTriple {
            triple: t(0, 0, 1),
            inverse: true,
        }]],
    };
    let (text, _) = rewrite(&sg, "name the city of Saint Louis University", &kg, &topics);
    assert_eq!(
        text,
        "what is the containedby of Saint Louis University"
    );
}
