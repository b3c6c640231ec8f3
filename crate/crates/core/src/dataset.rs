//! Question-answering examples and their JSONL on-disk format.
//!
//! One example per line:
//! `{"id": "...", "question": "...", "topic_entities": [ids],
//!   "answers": [ids], "gold_chain": [[head, relation, tail, inverse], ...]}`
//! where `gold_chain` is optional and lists oriented triples of the
//! reference reasoning chain (`inverse` true means the chain traverses the
//! stored triple tail-to-head).

use std::fs;
use std::path::Path as FsPath;

use serde::{Deserialize, Serialize};

use crate::kg::{OrientedTriple, Triple};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QaExample {
    pub id: String,
    pub question: String,
    pub topic_entities: Vec<usize>,
    pub answers: Vec<usize>,
    pub gold_chain: Option<Vec<OrientedTriple>>,
}

/// Train/valid/test splits of one benchmark.
#[derive(Clone, Debug, Default)]
pub struct QaDataset {
    pub train: Vec<QaExample>,
    pub valid: Vec<QaExample>,
    pub test: Vec<QaExample>,
}

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
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
}

#[derive(Serialize, Deserialize)]
struct RawExample {
    id: String,
    question: String,
    topic_entities: Vec<usize>,
    answers: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    gold_chain: Option<Vec<(usize, usize, usize, bool)>>,
}

impl From<&QaExample> for RawExample {
    fn from(ex: &QaExample) -> Self {
        RawExample {
            id: ex.id.clone(),
            question: ex.question.clone(),
            topic_entities: ex.topic_entities.clone(),
            answers: ex.answers.clone(),
            gold_chain: ex.gold_chain.as_ref().map(|chain| {
                chain
                    .iter()
                    .map(|o| (o.triple.head, o.triple.relation, o.triple.tail, o.inverse))
                    .collect()
            }),
        }
    }
}

impl From<RawExample> for QaExample {
    fn from(raw: RawExample) -> Self {
        QaExample {
            id: raw.id,
            question: raw.question,
            topic_entities: raw.topic_entities,
            answers: raw.answers,
            gold_chain: raw.gold_chain.map(|chain| {
                chain
                    .into_iter()
                    .map(|(head, relation, tail, inverse)| OrientedTriple {
                        triple: Triple {
                            head,
                            relation,
                            tail,
                        },
                        inverse,
                    })
                    .collect()
            }),
        }
    }
}

pub fn load_examples(path: &FsPath) -> Result<Vec<QaExample>, DatasetError> {
    let display = path.display().to_string();
    let text = fs::read_to_string(path).map_err(|source| DatasetError::Io {
        path: display.clone(),
        source,
    })?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawExample =
            serde_json::from_str(line).map_err(|e| DatasetError::Malformed {
                path: display.clone(),
                line: i + 1,
                detail: e.to_string(),
            })?;
        out.push(raw.into());
    }
    Ok(out)
}

pub fn save_examples(path: &FsPath, examples: &[QaExample]) -> Result<(), DatasetError> {
    let display = path.display().to_string();
    let mut text = String::new();
    for ex in examples {
        let raw: RawExample = ex.into();
        text.push_str(&serde_json::to_string(&raw).expect("serializable"));
        text.push('\n');
    }
    fs::write(path, text).map_err(|source| DatasetError::Io {
        path: display,
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> QaExample {
        QaExample {
            id: "q1".into(),
            question: "who directed Batman 1989".into(),
            topic_entities: vec![2],
            answers: vec![0],
            gold_chain: Some(vec![OrientedTriple {
                triple: Triple {
                    head: 0,
                    relation: 1,
                    tail: 2,
                },
                inverse: true,
            }]),
        }
    }

    #[test]
    fn jsonl_round_trip_preserves_examples() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train.jsonl");
        let examples = vec![
            sample(),
            QaExample {
                id: "q2".into(),
                question: "no chain here".into(),
                topic_entities: vec![1, 2],
                answers: vec![3, 4],
                gold_chain: None,
            },
        ];
        save_examples(&path, &examples).unwrap();
        let loaded = load_examples(&path).unwrap();
        assert_eq!(loaded, examples);
    }

    #[test]
    fn gold_chain_serializes_as_flat_quadruples() {
        let raw: RawExample = (&sample()).into();
        let json = serde_json::to_string(&raw).unwrap();
        assert!(json.contains("\"gold_chain\":[[0,1,2,true]]"), "{json}");
    }

    #[test]
    fn absent_gold_chain_is_omitted_from_json() {
        let ex = QaExample {
            gold_chain: None,
            ..sample()
        };
        let raw: RawExample = (&ex).into();
        let json = serde_json::to_string(&raw).unwrap();
        assert!(!json.contains("gold_chain"));
    }

    #[test]
    fn malformed_line_reports_position() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        std::fs::write(&path, "{\"id\": \"q\"}\n").unwrap();
        match load_examples(&path) {
            Err(DatasetError::Malformed { line, .. }) => assert_eq!(line, 1),
            other => panic!("expected malformed error, got {other:?}"),
        }
    }
}
