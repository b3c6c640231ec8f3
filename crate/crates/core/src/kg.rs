//! Immutable triple store with adjacency indices, bounded simple-path
//! enumeration, and chain-query execution. Entity and relation ids are
//! dense indices into the label tables; every returned collection is in a
//! deterministic (lexicographic) order.

use std::collections::{BTreeSet, VecDeque};
use std::fs;
use std::io::Write as _;
use std::path::Path as FsPath;

pub type EntityId = usize;
pub type RelationId = usize;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Triple {
    pub head: EntityId,
    pub relation: RelationId,
    pub tail: EntityId,
}

/// A triple plus the direction it was traversed in. `inverse` means the
/// walk ran tail→head.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct OrientedTriple {
    pub triple: Triple,
    pub inverse: bool,
}

impl OrientedTriple {
    pub fn from(&self) -> EntityId {
        if self.inverse {
            self.triple.tail
        } else {
            self.triple.head
        }
    }

    pub fn to(&self) -> EntityId {
        if self.inverse {
            self.triple.head
        } else {
            self.triple.tail
        }
    }
}

/// Oriented triples forming a walk; construction sites guarantee the
/// simple-path invariants (consecutive sharing, no repeated entity).
pub type Path = Vec<OrientedTriple>;

/// A chain pattern executed against the store: the variable sits at the
/// start of every path, each step is (relation, inverse flag), and each
/// path bottoms out at a concrete terminal entity. Intermediate positions
/// are free variables bound consistently within their own chain.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QueryGraph {
    pub paths: Vec<PatternPath>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PatternPath {
    pub steps: Vec<(RelationId, bool)>,
    pub terminal: EntityId,
}

#[derive(Debug, thiserror::Error)]
pub enum KgError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("{file}:{line}: {detail}")]
    Malformed {
        file: String,
        line: usize,
        detail: String,
    },
    #[error("{file}: duplicate id {id}")]
    DuplicateId { file: String, id: usize },
    #[error("{file}: ids must densely cover 0..{expected}, missing {id}")]
    NonDenseIds {
        file: String,
        expected: usize,
        id: usize,
    },
    #[error("triple {index} references unknown {what} id {id}")]
    DanglingId {
        index: usize,
        what: &'static str,
        id: usize,
    },
    #[error("unknown entity id {id}")]
    UnknownEntity { id: usize },
    #[error("{file}: empty label for id {id}")]
    EmptyLabel { file: String, id: usize },
    #[error("invalid argument: {detail}")]
    InvalidArg { detail: String },
}

#[derive(Clone, Debug)]
pub struct KnowledgeGraph {
    entity_labels: Vec<String>,
    relation_labels: Vec<String>,
    triples: Vec<Triple>,
    adjacency: Vec<Vec<OrientedTriple>>,
}

impl KnowledgeGraph {
    /// Builds the graph and its adjacency index. Triples are sorted and
    /// deduplicated; each one appears in the index once per endpoint.
    pub fn new(
        entity_labels: Vec<String>,
        relation_labels: Vec<String>,
        mut triples: Vec<Triple>,
    ) -> Result<Self, KgError> {
        for (id, l) in entity_labels.iter().enumerate() {
            if l.is_empty() {
                return Err(KgError::EmptyLabel {
                    file: "entities".into(),
                    id,
                });
            }
        }
        for (id, l) in relation_labels.iter().enumerate() {
            if l.is_empty() {
                return Err(KgError::EmptyLabel {
                    file: "relations".into(),
                    id,
                });
            }
        }
        triples.sort_unstable();
        triples.dedup();
        for (index, t) in triples.iter().enumerate() {
            if t.head >= entity_labels.len() {
                return Err(KgError::DanglingId {
                    index,
                    what: "head entity",
                    id: t.head,
                });
            }
            if t.tail >= entity_labels.len() {
                return Err(KgError::DanglingId {
                    index,
                    what: "tail entity",
                    id: t.tail,
                });
            }
            if t.relation >= relation_labels.len() {
                return Err(KgError::DanglingId {
                    index,
                    what: "relation",
                    id: t.relation,
                });
            }
        }
        let mut adjacency: Vec<Vec<OrientedTriple>> = vec![Vec::new(); entity_labels.len()];
        for &triple in &triples {
            adjacency[triple.head].push(OrientedTriple {
                triple,
                inverse: false,
            });
            adjacency[triple.tail].push(OrientedTriple {
                triple,
                inverse: true,
            });
        }
        // Scan order keeps each adjacency list sorted by (triple, inverse),
        // which makes path enumeration lexicographic for free.
        debug_assert!(adjacency.iter().all(|l| l.windows(2).all(|w| w[0] <= w[1])));
        Ok(KnowledgeGraph {
            entity_labels,
            relation_labels,
            triples,
            adjacency,
        })
    }

    pub fn entity_count(&self) -> usize {
        self.entity_labels.len()
    }

    pub fn relation_count(&self) -> usize {
        self.relation_labels.len()
    }

    pub fn triple_count(&self) -> usize {
        self.triples.len()
    }

    pub fn triples(&self) -> &[Triple] {
        &self.triples
    }

    pub fn entity_label(&self, id: EntityId) -> &str {
        &self.entity_labels[id]
    }

    pub fn relation_label(&self, id: RelationId) -> &str {
        &self.relation_labels[id]
    }

    pub fn entity_labels(&self) -> &[String] {
        &self.entity_labels
    }

    pub fn relation_labels(&self) -> &[String] {
        &self.relation_labels
    }

    /// Oriented triples leaving `e` (both stored directions).
    pub fn neighbors(&self, e: EntityId) -> Result<&[OrientedTriple], KgError> {
        self.adjacency
            .get(e)
            .map(|v| v.as_slice())
            .ok_or(KgError::UnknownEntity { id: e })
    }

    /// Every relation linking the pair in either direction, with a flag
    /// (false = stored as (e, r, e_i)).
    pub fn relations_between(
        &self,
        e: EntityId,
        e_i: EntityId,
    ) -> Result<Vec<(RelationId, bool)>, KgError> {
        if e_i >= self.entity_count() {
            return Err(KgError::UnknownEntity { id: e_i });
        }
        let mut out: Vec<(RelationId, bool)> = self
            .neighbors(e)?
            .iter()
            .filter(|o| o.to() == e_i)
            .map(|o| (o.triple.relation, o.inverse))
            .collect();
        out.sort_unstable();
        out.dedup();
        Ok(out)
    }

    /// All simple paths from `source` to `target` of length 1..=max_len,
    /// edges traversable both ways, in lexicographic order. The self pair
    /// yields nothing: a simple path cannot revisit its source.
    pub fn path_extract(
        &self,
        source: EntityId,
        target: EntityId,
        max_len: usize,
    ) -> Result<Vec<Path>, KgError> {
        if max_len == 0 {
            return Err(KgError::InvalidArg {
                detail: "max_len must be at least 1".into(),
            });
        }
        if source >= self.entity_count() {
            return Err(KgError::UnknownEntity { id: source });
        }
        if target >= self.entity_count() {
            return Err(KgError::UnknownEntity { id: target });
        }
        let mut out = Vec::new();
        let mut prefix: Path = Vec::new();
        let mut visited = vec![false; self.entity_count()];
        visited[source] = true;
        self.dfs_paths(source, target, max_len, &mut prefix, &mut visited, &mut out);
        Ok(out)
    }

    fn dfs_paths(
        &self,
        at: EntityId,
        target: EntityId,
        max_len: usize,
        prefix: &mut Path,
        visited: &mut [bool],
        out: &mut Vec<Path>,
    ) {
        for &step in &self.adjacency[at] {
            let next = step.to();
            if visited[next] {
                continue;
            }
            prefix.push(step);
            if next == target {
                out.push(prefix.clone());
            } else if prefix.len() < max_len {
                visited[next] = true;
                self.dfs_paths(next, target, max_len, prefix, visited, out);
                visited[next] = false;
            }
            prefix.pop();
        }
    }

    /// Undirected BFS distance, ignoring relation identity. None when
    /// disconnected; zero for the self pair.
    pub fn distance(&self, source: EntityId, target: EntityId) -> Result<Option<usize>, KgError> {
        if source >= self.entity_count() {
            return Err(KgError::UnknownEntity { id: source });
        }
        if target >= self.entity_count() {
            return Err(KgError::UnknownEntity { id: target });
        }
        if source == target {
            return Ok(Some(0));
        }
        let mut dist = vec![usize::MAX; self.entity_count()];
        dist[source] = 0;
        let mut queue = VecDeque::from([source]);
        while let Some(u) = queue.pop_front() {
            for o in &self.adjacency[u] {
                let v = o.to();
                if dist[v] == usize::MAX {
                    dist[v] = dist[u] + 1;
                    if v == target {
                        return Ok(Some(dist[v]));
                    }
                    queue.push_back(v);
                }
            }
        }
        Ok(None)
    }

    /// All simple paths of minimal length; empty when disconnected or for
    /// the self pair.
    pub fn shortest_path_extract(
        &self,
        source: EntityId,
        target: EntityId,
    ) -> Result<Vec<Path>, KgError> {
        match self.distance(source, target)? {
            None | Some(0) => Ok(Vec::new()),
            Some(d) => self.path_extract(source, target, d),
        }
    }

    /// Variable bindings satisfying every chain pattern. Intermediates are
    /// free per chain; matching is plain homomorphism (entities may repeat).
    pub fn execute_query(&self, query: &QueryGraph) -> Result<BTreeSet<EntityId>, KgError> {
        let mut result: Option<BTreeSet<EntityId>> = None;
        for path in &query.paths {
            if path.terminal >= self.entity_count() {
                return Err(KgError::UnknownEntity { id: path.terminal });
            }
            // Walk the chain backward from its fixed terminal.
            let mut frontier = BTreeSet::from([path.terminal]);
            for &(relation, inverse) in path.steps.iter().rev() {
                let mut prev = BTreeSet::new();
                for &v in &frontier {
                    for o in &self.adjacency[v] {
                        // A step u→v with marker `inverse` is stored as
                        // (u, r, v) when not inverse; seen from v that is
                        // the flipped orientation.
                        if o.triple.relation == relation && o.inverse != inverse {
                            prev.insert(o.to());
                        }
                    }
                }
                frontier = prev;
                if frontier.is_empty() {
                    break;
                }
            }
            result = Some(match result {
                None => frontier,
                Some(acc) => acc.intersection(&frontier).copied().collect(),
            });
            if result.as_ref().is_some_and(|s| s.is_empty()) {
                break;
            }
        }
        Ok(result.unwrap_or_default())
    }

    /// Reads `entities.tsv`, `relations.tsv`, and `triples.tsv` from a
    /// directory. Label files must cover ids 0..n densely.
    pub fn load(dir: &FsPath) -> Result<Self, KgError> {
        let entity_labels = read_labels(&dir.join("entities.tsv"))?;
        let relation_labels = read_labels(&dir.join("relations.tsv"))?;
        let triples_file = dir.join("triples.tsv");
        let text = fs::read_to_string(&triples_file)?;
        let fname = triples_file.display().to_string();
        let mut triples = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split('\t');
            let mut field = |name: &str| {
                parts
                    .next()
                    .ok_or_else(|| KgError::Malformed {
                        file: fname.clone(),
                        line: i + 1,
                        detail: format!("missing {name}"),
                    })?
                    .parse::<usize>()
                    .map_err(|_| KgError::Malformed {
                        file: fname.clone(),
                        line: i + 1,
                        detail: format!("non-numeric {name}"),
                    })
            };
            let head = field("head id")?;
            let relation = field("relation id")?;
            let tail = field("tail id")?;
            triples.push(Triple {
                head,
                relation,
                tail,
            });
        }
        KnowledgeGraph::new(entity_labels, relation_labels, triples)
    }

    /// Writes the three TSV files `load` expects.
    pub fn save(&self, dir: &FsPath) -> Result<(), KgError> {
        fs::create_dir_all(dir)?;
        write_labels(&dir.join("entities.tsv"), &self.entity_labels)?;
        write_labels(&dir.join("relations.tsv"), &self.relation_labels)?;
        let mut f = fs::File::create(dir.join("triples.tsv"))?;
        for t in &self.triples {
            writeln!(f, "{}\t{}\t{}", t.head, t.relation, t.tail)?;
        }
        Ok(())
    }
}

fn read_labels(path: &FsPath) -> Result<Vec<String>, KgError> {
    let text = fs::read_to_string(path)?;
    let fname = path.display().to_string();
    let mut rows: Vec<(usize, String)> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let (id_str, label) = line.split_once('\t').ok_or_else(|| KgError::Malformed {
            file: fname.clone(),
            line: i + 1,
            detail: "expected id<TAB>label".into(),
        })?;
        let id: usize = id_str.parse().map_err(|_| KgError::Malformed {
            file: fname.clone(),
            line: i + 1,
            detail: "non-numeric id".into(),
        })?;
        if label.is_empty() {
            return Err(KgError::EmptyLabel {
                file: fname.clone(),
                id,
            });
        }
        rows.push((id, label.to_string()));
    }
    rows.sort_by_key(|(id, _)| *id);
    let mut labels = Vec::with_capacity(rows.len());
    for (expected, (id, label)) in rows.into_iter().enumerate() {
        if id < expected {
            return Err(KgError::DuplicateId {
                file: fname.clone(),
                id,
            });
        }
        if id > expected {
            return Err(KgError::NonDenseIds {
                file: fname.clone(),
                expected,
                id,
            });
        }
        labels.push(label);
    }
    Ok(labels)
}

fn write_labels(path: &FsPath, labels: &[String]) -> Result<(), KgError> {
    let mut f = fs::File::create(path)?;
    for (id, label) in labels.iter().enumerate() {
        writeln!(f, "{id}\t{label}")?;
    }
    Ok(())
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    // Film/geography fixture: a director born in California who made two
    // movies starring the same actor, plus filler structure.
    pub fn film_fixture() -> KnowledgeGraph {
        let entities = [
            "Tim Burton",      // 0
            "California",      // 1
            "Batman 1989",     // 2
            "Michael Keaton",  // 3
            "Beetlejuice",     // 4
            "Jack Nicholson",  // 5
            "Pennsylvania",    // 6
            "USA",             // 7
            "Superhero film",  // 8
            "New Jersey",      // 9
        ]
        .map(String::from)
        .to_vec();
        let relations = [
            "birthplace",   // 0
            "director",     // 1
            "cast member",  // 2
            "contained by", // 3
            "genre",        // 4
        ]
        .map(String::from)
        .to_vec();
        let t = |head, relation, tail| Triple {
            head,
            relation,
            tail,
        };
        let triples = vec![
            t(0, 0, 1), // Tim Burton birthplace California
            t(2, 1, 0), // Batman 1989 director Tim Burton
            t(2, 2, 3), // Batman 1989 cast member Michael Keaton
            t(4, 1, 0), // Beetlejuice director Tim Burton
            t(4, 2, 3), // Beetlejuice cast member Michael Keaton
            t(2, 2, 5), // Batman 1989 cast member Jack Nicholson
            t(3, 0, 6), // Michael Keaton birthplace Pennsylvania
            t(1, 3, 7), // California contained by USA
            t(6, 3, 7), // Pennsylvania contained by USA
            t(2, 4, 8), // Batman 1989 genre Superhero film
            t(5, 0, 9), // Jack Nicholson birthplace New Jersey
        ];
        KnowledgeGraph::new(entities, relations, triples).expect("fixture should build")
    }

    #[test]
    fn fixture_loads_with_expected_counts() {
        let kg = film_fixture();
        assert_eq!(kg.entity_count(), 10);
        assert_eq!(kg.relation_count(), 5);
        assert_eq!(kg.triple_count(), 11);
    }

    #[test]
    fn empty_graph_is_valid() {
        let kg = KnowledgeGraph::new(vec![], vec![], vec![]).unwrap();
        assert_eq!(kg.entity_count(), 0);
        assert_eq!(kg.triple_count(), 0);
    }

    #[test]
    fn dangling_triple_is_a_load_error() {
        let err = KnowledgeGraph::new(
            vec!["a".into()],
            vec!["r".into()],
            vec![Triple {
                head: 0,
                relation: 0,
                tail: 7,
            }],
        )
        .unwrap_err();
        assert!(matches!(err, KgError::DanglingId { what: "tail entity", .. }));
    }

    #[test]
    fn relations_between_reports_direction() {
        let kg = film_fixture();
        // Stored as (Tim Burton, birthplace, California): forward from 0.
        assert_eq!(kg.relations_between(0, 1).unwrap(), vec![(0, false)]);
        assert_eq!(kg.relations_between(1, 0).unwrap(), vec![(0, true)]);
        assert_eq!(kg.relations_between(0, 3).unwrap(), vec![]);
    }

    #[test]
    fn relations_between_returns_parallel_relations() {
        let kg = KnowledgeGraph::new(
            vec!["a".into(), "b".into()],
            vec!["r0".into(), "r1".into()],
            vec![
                Triple {
                    head: 0,
                    relation: 0,
                    tail: 1,
                },
                Triple {
                    head: 1,
                    relation: 1,
                    tail: 0,
                },
            ],
        )
        .unwrap();
        assert_eq!(kg.relations_between(0, 1).unwrap(), vec![(0, false), (1, true)]);
    }

    #[test]
    fn path_extract_finds_both_movie_routes() {
        let kg = film_fixture();
        // Tim Burton → Michael Keaton within 2 hops: via either movie.
        let paths = kg.path_extract(0, 3, 2).unwrap();
        assert_eq!(paths.len(), 2);
        for p in &paths {
            assert_eq!(p.len(), 2);
            assert_eq!(p[0].from(), 0);
            assert!(p[0].inverse, "first hop traverses a director edge backward");
            assert_eq!(p[0].triple.relation, 1);
            assert_eq!(p[1].triple.relation, 2);
            assert_eq!(p[1].to(), 3);
        }
        let intermediates: Vec<EntityId> = paths.iter().map(|p| p[0].to()).collect();
        assert_eq!(intermediates, vec![2, 4]);
    }

    #[test]
    fn self_pair_has_no_paths() {
        let kg = film_fixture();
        assert!(kg.path_extract(0, 0, 3).unwrap().is_empty());
        assert!(kg.shortest_path_extract(0, 0).unwrap().is_empty());
    }

    #[test]
    fn path_extract_rejects_zero_budget_and_unknown_ids() {
        let kg = film_fixture();
        assert!(matches!(
            kg.path_extract(0, 1, 0),
            Err(KgError::InvalidArg { .. })
        ));
        assert!(matches!(
            kg.path_extract(0, 99, 2),
            Err(KgError::UnknownEntity { id: 99 })
        ));
    }

    #[test]
    fn shortest_keeps_only_minimal_length_routes() {
        // a - b - d plus a - b' - c - d: distance 2 beats the 3-hop route.
        let t = |head, relation, tail| Triple {
            head,
            relation,
            tail,
        };
        let kg = KnowledgeGraph::new(
            (0..5).map(|i| format!("e{i}")).collect(),
            vec!["r".into()],
            vec![t(0, 0, 1), t(1, 0, 4), t(0, 0, 2), t(2, 0, 3), t(3, 0, 4)],
        )
        .unwrap();
        let shortest = kg.shortest_path_extract(0, 4).unwrap();
        assert_eq!(shortest.len(), 1);
        assert_eq!(shortest[0].len(), 2);
        let bounded = kg.path_extract(0, 4, 3).unwrap();
        assert_eq!(bounded.len(), 2);
        assert!(shortest.iter().all(|p| bounded.contains(p)));
    }

    #[test]
    fn equal_length_shortest_routes_are_all_returned() {
        let kg = film_fixture();
        let shortest = kg.shortest_path_extract(0, 3).unwrap();
        assert_eq!(shortest.len(), 2, "both movies give a 2-hop route");
    }

    #[test]
    fn disconnected_pair_yields_empty() {
        let kg = KnowledgeGraph::new(
            vec!["a".into(), "b".into(), "c".into()],
            vec!["r".into()],
            vec![Triple {
                head: 0,
                relation: 0,
                tail: 1,
            }],
        )
        .unwrap();
        assert!(kg.shortest_path_extract(0, 2).unwrap().is_empty());
        assert_eq!(kg.distance(0, 2).unwrap(), None);
    }

    #[test]
    fn execute_query_single_triple_pattern() {
        let kg = film_fixture();
        // ?x --birthplace--> California
        let q = QueryGraph {
            paths: vec![PatternPath {
                steps: vec![(0, false)],
                terminal: 1,
            }],
        };
        let matched = kg.execute_query(&q).unwrap();
        assert_eq!(matched.into_iter().collect::<Vec<_>>(), vec![0]);
    }

    #[test]
    fn execute_query_two_path_pattern_isolates_the_director() {
        let kg = film_fixture();
        // ?x born in California, and ?x directed something starring Keaton.
        let q = QueryGraph {
            paths: vec![
                PatternPath {
                    steps: vec![(0, false)],
                    terminal: 1,
                },
                PatternPath {
                    steps: vec![(1, true), (2, false)],
                    terminal: 3,
                },
            ],
        };
        let matched = kg.execute_query(&q).unwrap();
        assert_eq!(matched.into_iter().collect::<Vec<_>>(), vec![0]);
    }

    #[test]
    fn execute_query_with_absent_relation_matches_nothing() {
        let kg = film_fixture();
        let q = QueryGraph {
            paths: vec![PatternPath {
                steps: vec![(4, true)],
                terminal: 1,
            }],
        };
        assert!(kg.execute_query(&q).unwrap().is_empty());
    }

    #[test]
    fn path_reversal_symmetry_on_fixture() {
        let kg = film_fixture();
        for (s, t) in [(0, 3), (1, 3), (2, 7)] {
            let fwd = kg.path_extract(s, t, 3).unwrap();
            let mut reversed: Vec<Path> = fwd
                .iter()
                .map(|p| {
                    p.iter()
                        .rev()
                        .map(|o| OrientedTriple {
                            triple: o.triple,
                            inverse: !o.inverse,
                        })
                        .collect()
                })
                .collect();
            reversed.sort();
            let back = kg.path_extract(t, s, 3).unwrap();
            assert_eq!(reversed, back);
        }
    }

    #[test]
    fn save_load_round_trip() {
        let kg = film_fixture();
        let dir = tempfile::tempdir().unwrap();
        kg.save(dir.path()).unwrap();
        let loaded = KnowledgeGraph::load(dir.path()).unwrap();
        assert_eq!(loaded.triples(), kg.triples());
        assert_eq!(loaded.entity_labels(), kg.entity_labels());
        assert_eq!(loaded.relation_labels(), kg.relation_labels());
    }

    #[test]
    fn load_rejects_sparse_label_ids() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("entities.tsv"), "0\ta\n2\tb\n").unwrap();
        std::fs::write(dir.path().join("relations.tsv"), "0\tr\n").unwrap();
        std::fs::write(dir.path().join("triples.tsv"), "").unwrap();
        let err = KnowledgeGraph::load(dir.path()).unwrap_err();
        assert!(matches!(err, KgError::NonDenseIds { .. }));
    }
}
