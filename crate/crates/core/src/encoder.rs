//! Question-side text processing: tokenization, topic-mention masking,
//! token-embedding providers, and the two bidirectional GRU encoders that
//! produce the general question embedding and the per-layer references.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path as FsPath;

use rand::Rng;

use crate::numerics::{
    bigru_encode, GruParams, NodeId, NumericsError, ParamId, ParamStore, Tape, Tensor,
};

#[derive(Debug, thiserror::Error)]
pub enum EncoderError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("{file}:{line}: {detail}")]
    Malformed {
        file: String,
        line: usize,
        detail: String,
    },
    #[error("question produced no tokens")]
    EmptyQuestion,
}

/// Lowercase alphanumeric-run tokenization; punctuation separates.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut current = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            current.extend(ch.to_lowercase());
        } else if !current.is_empty() {
            tokens.push(std::mem::take(&mut current));
        }
    }
    if !current.is_empty() {
        tokens.push(current);
    }
    tokens
}

/// Tokenizes and removes every token span that exactly matches a topic
/// mention (case-insensitive). If masking would empty the question, the
/// unmasked tokens are returned instead.
pub fn tokenize_and_mask(question: &str, mentions: &[String]) -> Vec<String> {
    let tokens = tokenize(question);
    let mut keep = vec![true; tokens.len()];
    for mention in mentions {
        let span = tokenize(mention);
        if span.is_empty() || span.len() > tokens.len() {
            continue;
        }
        let mut i = 0;
        while i + span.len() <= tokens.len() {
            if tokens[i..i + span.len()] == span[..] {
                keep[i..i + span.len()].iter_mut().for_each(|k| *k = false);
                i += span.len();
            } else {
                i += 1;
            }
        }
    }
    let masked: Vec<String> = tokens
        .iter()
        .zip(&keep)
        .filter(|(_, k)| **k)
        .map(|(t, _)| t.clone())
        .collect();
    if masked.is_empty() {
        tokens
    } else {
        masked
    }
}

/// Reserved vocabulary slot for out-of-vocabulary tokens.
pub const UNK_INDEX: usize = 0;
pub const UNK_TOKEN: &str = "<unk>";

/// Parameter name of the trainable embedding table.
pub const TOKEN_TABLE: &str = "tokens.table";

#[derive(Clone, Debug, PartialEq)]
pub enum ProviderMode {
    /// Vectors precomputed offline; constants during training.
    FileBacked,
    /// Vectors live in the parameter store and train jointly.
    Trainable,
}

/// Maps tokens to dense vectors, either from a frozen file-backed table or
/// a trainable lookup registered in a `ParamStore`. Index 0 is the UNK row.
#[derive(Clone, Debug)]
pub struct TokenProvider {
    pub mode: ProviderMode,
    pub dim: usize,
    vocab: BTreeMap<String, usize>,
    /// File-backed vectors, indexed like the vocabulary. Empty in
    /// trainable mode, where the table lives in the store.
    file_vectors: Vec<Tensor>,
}

impl TokenProvider {
    /// Vocabulary from a token iterator: sorted unique tokens after the UNK
    /// slot, so construction order never changes indices.
    pub fn trainable(corpus: impl IntoIterator<Item = String>, dim: usize) -> Self {
        let mut vocab = BTreeMap::new();
        vocab.insert(UNK_TOKEN.to_string(), UNK_INDEX);
        let mut unique: Vec<String> = corpus
            .into_iter()
            .filter(|t| t != UNK_TOKEN)
            .collect();
        unique.sort();
        unique.dedup();
        for token in unique {
            let next = vocab.len();
            vocab.insert(token, next);
        }
        TokenProvider {
            mode: ProviderMode::Trainable,
            dim,
            vocab,
            file_vectors: Vec::new(),
        }
    }

    /// Reads the embedding file format: first line `d_in`, then
    /// `token<TAB>v1 v2 … v_{d_in}` lines. A literal `<unk>` row overrides
    /// the default zero UNK vector.
    pub fn from_file(path: &FsPath) -> Result<Self, EncoderError> {
        let text = fs::read_to_string(path)?;
        let fname = path.display().to_string();
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or_else(|| EncoderError::Malformed {
            file: fname.clone(),
            line: 1,
            detail: "missing dimension header".into(),
        })?;
        let dim: usize = header.trim().parse().map_err(|_| EncoderError::Malformed {
            file: fname.clone(),
            line: 1,
            detail: "non-numeric dimension header".into(),
        })?;
        let mut vocab = BTreeMap::new();
        vocab.insert(UNK_TOKEN.to_string(), UNK_INDEX);
        let mut vectors = vec![Tensor::zeros(&[dim])];
        for (i, line) in lines {
            if line.is_empty() {
                continue;
            }
            let (token, rest) = line.split_once('\t').ok_or_else(|| EncoderError::Malformed {
                file: fname.clone(),
                line: i + 1,
                detail: "expected token<TAB>values".into(),
            })?;
            let values: Vec<f64> = rest
                .split_whitespace()
                .map(|v| v.parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|_| EncoderError::Malformed {
                    file: fname.clone(),
                    line: i + 1,
                    detail: "non-numeric vector entry".into(),
                })?;
            if values.len() != dim {
                return Err(EncoderError::Malformed {
                    file: fname.clone(),
                    line: i + 1,
                    detail: format!("expected {dim} values, got {}", values.len()),
                });
            }
            let tensor = Tensor::from_values(&[dim], values).map_err(EncoderError::from)?;
            if token == UNK_TOKEN {
                vectors[UNK_INDEX] = tensor;
                continue;
            }
            if vocab.contains_key(token) {
                return Err(EncoderError::Malformed {
                    file: fname.clone(),
                    line: i + 1,
                    detail: format!("duplicate token {token:?}"),
                });
            }
            vocab.insert(token.to_string(), vectors.len());
            vectors.push(tensor);
        }
        Ok(TokenProvider {
            mode: ProviderMode::FileBacked,
            dim,
            vocab,
            file_vectors: vectors,
        })
    }

    /// Rebuilds a provider from checkpoint pieces: vocabulary in index
    /// order (UNK first) plus the stacked table.
    pub fn from_parts(mode: ProviderMode, tokens: &[String], table: &Tensor) -> Self {
        let dim = table.cols();
        let mut vocab = BTreeMap::new();
        for (i, t) in tokens.iter().enumerate() {
            vocab.insert(t.clone(), i);
        }
        let file_vectors = match mode {
            ProviderMode::FileBacked => (0..table.rows())
                .map(|i| Tensor::vector(table.row(i)))
                .collect(),
            ProviderMode::Trainable => Vec::new(),
        };
        TokenProvider {
            mode,
            dim,
            vocab,
            file_vectors,
        }
    }

    pub fn vocab_len(&self) -> usize {
        self.vocab.len()
    }

    /// Tokens in index order, UNK first.
    pub fn tokens_in_order(&self) -> Vec<String> {
        let mut out = vec![String::new(); self.vocab.len()];
        for (t, &i) in &self.vocab {
            out[i] = t.clone();
        }
        out
    }

    pub fn index_of(&self, token: &str) -> usize {
        self.vocab.get(token).copied().unwrap_or(UNK_INDEX)
    }

    /// Registers the trainable table in the store. No-op for file mode.
    pub fn register_table(
        &self,
        store: &mut ParamStore,
        rng: &mut impl Rng,
    ) -> Result<Option<ParamId>, NumericsError> {
        match self.mode {
            ProviderMode::Trainable => {
                let scale = 1.0 / (self.dim as f64).sqrt();
                let id = store.add_uniform(
                    TOKEN_TABLE,
                    &[self.vocab.len(), self.dim],
                    scale,
                    rng,
                )?;
                Ok(Some(id))
            }
            ProviderMode::FileBacked => Ok(None),
        }
    }

    /// Embeds one token on the tape: a trainable row or a frozen constant.
    pub fn embed(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        token: &str,
    ) -> Result<NodeId, NumericsError> {
        let idx = self.index_of(token);
        match self.mode {
            ProviderMode::Trainable => {
                let table = store.id(TOKEN_TABLE).ok_or(NumericsError::MissingParam {
                    name: TOKEN_TABLE.to_string(),
                })?;
                tape.param_row(store, table, idx)
            }
            ProviderMode::FileBacked => tape.constant(self.file_vectors[idx].clone()),
        }
    }

    /// The full table as one tensor, reading trainable rows from the store.
    pub fn table_tensor(&self, store: Option<&ParamStore>) -> Result<Tensor, NumericsError> {
        match self.mode {
            ProviderMode::Trainable => {
                let store = store.ok_or(NumericsError::MissingParam {
                    name: TOKEN_TABLE.to_string(),
                })?;
                let id = store.id(TOKEN_TABLE).ok_or(NumericsError::MissingParam {
                    name: TOKEN_TABLE.to_string(),
                })?;
                Ok(store.value(id).clone())
            }
            ProviderMode::FileBacked => {
                let mut values = Vec::with_capacity(self.vocab.len() * self.dim);
                for v in &self.file_vectors {
                    values.extend_from_slice(v.values());
                }
                Tensor::from_values(&[self.file_vectors.len(), self.dim], values)
            }
        }
    }
}

/// A frozen snapshot of a provider's vectors: plain lookup, no gradients.
/// The text scorer carries one so fine-tuning cannot disturb the jointly
/// trained table.
#[derive(Clone, Debug)]
pub struct FrozenVocab {
    pub dim: usize,
    vocab: BTreeMap<String, usize>,
    vectors: Vec<Tensor>,
}

impl FrozenVocab {
    pub fn from_provider(
        provider: &TokenProvider,
        store: Option<&ParamStore>,
    ) -> Result<Self, NumericsError> {
        let table = provider.table_tensor(store)?;
        let vectors = (0..table.rows())
            .map(|i| Tensor::vector(table.row(i)))
            .collect();
        Ok(FrozenVocab {
            dim: provider.dim,
            vocab: provider
                .tokens_in_order()
                .into_iter()
                .enumerate()
                .map(|(i, t)| (t, i))
                .collect(),
            vectors,
        })
    }

    pub fn tokens_in_order(&self) -> Vec<String> {
        let mut out = vec![String::new(); self.vocab.len()];
        for (t, &i) in &self.vocab {
            out[i] = t.clone();
        }
        out
    }

    pub fn table_tensor(&self) -> Result<Tensor, NumericsError> {
        let mut values = Vec::with_capacity(self.vectors.len() * self.dim);
        for v in &self.vectors {
            values.extend_from_slice(v.values());
        }
        Tensor::from_values(&[self.vectors.len(), self.dim], values)
    }

    pub fn vector(&self, token: &str) -> &Tensor {
        let idx = self.vocab.get(token).copied().unwrap_or(UNK_INDEX);
        &self.vectors[idx]
    }
}

/// The two question encoders: a general bidirectional GRU and a layerwise
/// one whose hidden states carry across network layers.
#[derive(Clone, Debug)]
pub struct QuestionGrus {
    pub general_fwd: GruParams,
    pub general_bwd: GruParams,
    pub layer_fwd: GruParams,
    pub layer_bwd: GruParams,
    pub dim: usize,
}

impl QuestionGrus {
    pub fn create(
        store: &mut ParamStore,
        input_dim: usize,
        dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self, NumericsError> {
        Ok(QuestionGrus {
            general_fwd: GruParams::create(store, "q_general.fwd", input_dim, dim, rng)?,
            general_bwd: GruParams::create(store, "q_general.bwd", input_dim, dim, rng)?,
            layer_fwd: GruParams::create(store, "q_layer.fwd", input_dim, dim, rng)?,
            layer_bwd: GruParams::create(store, "q_layer.bwd", input_dim, dim, rng)?,
            dim,
        })
    }

    pub fn lookup(
        store: &ParamStore,
        input_dim: usize,
        dim: usize,
    ) -> Result<Self, NumericsError> {
        Ok(QuestionGrus {
            general_fwd: GruParams::lookup(store, "q_general.fwd", input_dim, dim)?,
            general_bwd: GruParams::lookup(store, "q_general.bwd", input_dim, dim)?,
            layer_fwd: GruParams::lookup(store, "q_layer.fwd", input_dim, dim)?,
            layer_bwd: GruParams::lookup(store, "q_layer.bwd", input_dim, dim)?,
            dim,
        })
    }
}

/// Question state threaded through the network forward pass.
pub struct EncodedQuestion {
    /// Token embedding nodes (topic mentions already masked out).
    pub tokens: Vec<NodeId>,
    /// General question embedding q.
    pub q: NodeId,
    /// One (q^k, carried hidden pair) per network layer.
    pub layer_states: Vec<(NodeId, (NodeId, NodeId))>,
}

/// Embeds a token sequence on the tape.
pub fn embed_tokens(
    tape: &mut Tape,
    store: &ParamStore,
    provider: &TokenProvider,
    tokens: &[String],
) -> Result<Vec<NodeId>, EncoderError> {
    if tokens.is_empty() {
        return Err(EncoderError::EmptyQuestion);
    }
    tokens
        .iter()
        .map(|t| provider.embed(tape, store, t).map_err(EncoderError::from))
        .collect()
}

/// General question embedding: bidirectional pass with zero initial hidden
/// states, mean of the two final states.
pub fn encode_general(
    tape: &mut Tape,
    store: &ParamStore,
    grus: &QuestionGrus,
    tokens: &[NodeId],
) -> Result<NodeId, EncoderError> {
    if tokens.is_empty() {
        return Err(EncoderError::EmptyQuestion);
    }
    let h0f = tape.constant(Tensor::zeros(&[grus.dim]))?;
    let h0b = tape.constant(Tensor::zeros(&[grus.dim]))?;
    let (mean, _) = bigru_encode(
        tape,
        store,
        &grus.general_fwd,
        &grus.general_bwd,
        tokens,
        h0f,
        h0b,
    )?;
    Ok(mean)
}

/// Layerwise reference embedding q^k. `carried` is the hidden pair from
/// layer k−1; pass `None` at the first layer (zero initial states).
pub fn encode_layerwise(
    tape: &mut Tape,
    store: &ParamStore,
    grus: &QuestionGrus,
    tokens: &[NodeId],
    carried: Option<(NodeId, NodeId)>,
) -> Result<(NodeId, (NodeId, NodeId)), EncoderError> {
    if tokens.is_empty() {
        return Err(EncoderError::EmptyQuestion);
    }
    let (h0f, h0b) = match carried {
        Some(pair) => pair,
        None => {
            let zf = tape.constant(Tensor::zeros(&[grus.dim]))?;
            let zb = tape.constant(Tensor::zeros(&[grus.dim]))?;
            (zf, zb)
        }
    };
    let (mean, pair) = bigru_encode(
        tape,
        store,
        &grus.layer_fwd,
        &grus.layer_bwd,
        tokens,
        h0f,
        h0b,
    )?;
    Ok((mean, pair))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn masking_removes_topic_mention_span() {
        let tokens = tokenize_and_mask(
            "what state is saint louis university in?",
            &["saint louis university".to_string()],
        );
        assert_eq!(tokens, vec!["what", "state", "is", "in"]);
    }

    #[test]
    fn no_mentions_means_plain_tokenization() {
        assert_eq!(
            tokenize_and_mask("who directed it", &[]),
            vec!["who", "directed", "it"]
        );
    }

    #[test]
    fn fully_masked_question_falls_back_to_original() {
        let tokens = tokenize_and_mask("Saint Louis University", &["saint louis university".to_string()]);
        assert_eq!(tokens, vec!["saint", "louis", "university"]);
    }

    #[test]
    fn masking_is_case_insensitive_and_repeats() {
        let tokens = tokenize_and_mask(
            "Paris, is Paris big",
            &["paris".to_string()],
        );
        assert_eq!(tokens, vec!["is", "big"]);
    }

    fn tiny_setup(dim: usize) -> (TokenProvider, ParamStore, QuestionGrus) {
        let provider = TokenProvider::trainable(
            ["alpha", "beta", "gamma"].iter().map(|s| s.to_string()),
            dim,
        );
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        provider.register_table(&mut store, &mut rng).unwrap();
        let grus = QuestionGrus::create(&mut store, dim, dim, &mut rng).unwrap();
        (provider, store, grus)
    }

    #[test]
    fn identical_token_sequences_encode_identically() {
        let (provider, store, grus) = tiny_setup(4);
        let toks: Vec<String> = vec!["alpha".into(), "gamma".into()];
        let mut tape = Tape::new();
        let e1 = embed_tokens(&mut tape, &store, &provider, &toks).unwrap();
        let q1 = encode_general(&mut tape, &store, &grus, &e1).unwrap();
        let e2 = embed_tokens(&mut tape, &store, &provider, &toks).unwrap();
        let q2 = encode_general(&mut tape, &store, &grus, &e2).unwrap();
        assert_eq!(tape.value(q1).values(), tape.value(q2).values());
    }

    #[test]
    fn single_token_general_encoding_is_mean_of_two_steps() {
        let (provider, store, grus) = tiny_setup(3);
        let mut tape = Tape::new();
        let toks = embed_tokens(&mut tape, &store, &provider, &["beta".to_string()]).unwrap();
        let q = encode_general(&mut tape, &store, &grus, &toks).unwrap();
        // One forward step and one backward step over the same token.
        let h0 = tape.constant(Tensor::zeros(&[3])).unwrap();
        let hf = crate::numerics::gru_cell(&mut tape, &store, &grus.general_fwd, toks[0], h0)
            .unwrap();
        let hb = crate::numerics::gru_cell(&mut tape, &store, &grus.general_bwd, toks[0], h0)
            .unwrap();
        for i in 0..3 {
            let expect = 0.5 * (tape.value(hf).values()[i] + tape.value(hb).values()[i]);
            assert!((tape.value(q).values()[i] - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn first_layer_matches_fresh_pass_and_second_differs() {
        let (provider, store, grus) = tiny_setup(4);
        let toks: Vec<String> = vec!["alpha".into(), "beta".into(), "gamma".into()];
        let mut tape = Tape::new();
        let embedded = embed_tokens(&mut tape, &store, &provider, &toks).unwrap();
        let (q1, pair1) = encode_layerwise(&mut tape, &store, &grus, &embedded, None).unwrap();
        let (q1_again, _) = encode_layerwise(&mut tape, &store, &grus, &embedded, None).unwrap();
        assert_eq!(tape.value(q1).values(), tape.value(q1_again).values());

        let (q2, _) = encode_layerwise(&mut tape, &store, &grus, &embedded, Some(pair1)).unwrap();
        assert_ne!(
            tape.value(q1).values(),
            tape.value(q2).values(),
            "carried nonzero states must change the reference embedding"
        );
    }

    #[test]
    fn zero_weights_give_zero_reference_at_every_layer() {
        let provider = TokenProvider::trainable(["x".to_string()], 2);
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        provider.register_table(&mut store, &mut rng).unwrap();
        let grus = QuestionGrus::create(&mut store, 2, 2, &mut rng).unwrap();
        for id in store.sorted_ids().collect::<Vec<_>>() {
            if store.name(id).starts_with("q_layer") {
                store.value_mut(id).values_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let mut tape = Tape::new();
        let toks = embed_tokens(&mut tape, &store, &provider, &["x".to_string()]).unwrap();
        let (q1, pair) = encode_layerwise(&mut tape, &store, &grus, &toks, None).unwrap();
        let (q2, _) = encode_layerwise(&mut tape, &store, &grus, &toks, Some(pair)).unwrap();
        assert_eq!(tape.value(q1).values(), &[0.0, 0.0]);
        assert_eq!(tape.value(q2).values(), &[0.0, 0.0]);
    }

    #[test]
    fn oov_tokens_share_the_unk_row() {
        let (provider, store, _) = tiny_setup(4);
        let mut tape = Tape::new();
        let a = provider.embed(&mut tape, &store, "zzzz").unwrap();
        let b = provider.embed(&mut tape, &store, "qqqq").unwrap();
        assert_eq!(tape.value(a).values(), tape.value(b).values());
    }

    #[test]
    fn file_provider_round_trips_vectors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tokens.tsv");
        std::fs::write(&path, "3\nalpha\t0.1 0.2 0.3\nbeta\t-1 0 1\n").unwrap();
        let provider = TokenProvider::from_file(&path).unwrap();
        assert_eq!(provider.dim, 3);
        assert_eq!(provider.vocab_len(), 3, "UNK plus two tokens");
        let store = ParamStore::new();
        let mut tape = Tape::new();
        let beta = provider.embed(&mut tape, &store, "beta").unwrap();
        assert_eq!(tape.value(beta).values(), &[-1.0, 0.0, 1.0]);
        let unk = provider.embed(&mut tape, &store, "missing").unwrap();
        assert_eq!(tape.value(unk).values(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn file_provider_rejects_wrong_arity_rows() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tokens.tsv");
        std::fs::write(&path, "3\nalpha\t0.1 0.2\n").unwrap();
        assert!(matches!(
            TokenProvider::from_file(&path),
            Err(EncoderError::Malformed { .. })
        ));
    }
}
