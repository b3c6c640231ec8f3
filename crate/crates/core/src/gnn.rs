//! Question-conditioned graph network over the knowledge graph (coarse
//! reasoning). Entities start at the question embedding (topics) or a
//! shared learned vector, relations start from label encodings, and each
//! layer exchanges attention-weighted messages gated against the previous
//! state. Training pulls answer embeddings toward the question and pushes
//! non-answers away with a hinge on the distance difference.

use std::collections::BTreeSet;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::dataset::QaExample;
use crate::encoder::{
    embed_tokens, encode_general, encode_layerwise, tokenize, tokenize_and_mask, EncodedQuestion,
    EncoderError, ProviderMode, QuestionGrus, TokenProvider, UNK_TOKEN,
};
use crate::kg::{EntityId, KgError, KnowledgeGraph};
use crate::numerics::{
    Adam, AdamConfig, GruParams, NodeId, NumericsError, ParamId, ParamStore, Tape, Tensor,
    LEAKY_SLOPE,
};
use crate::{seeded_rng, RngStream};

#[derive(Debug, thiserror::Error)]
pub enum GnnError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Kg(#[from] KgError),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("example {id}: {detail}")]
    BadExample { id: String, detail: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

/// Hyperparameters for the graph network and its training loop.
#[derive(Clone, Debug)]
pub struct GnnConfig {
    /// Number of message-passing layers K.
    pub layers: usize,
    /// Shared width of token, entity, and relation embeddings.
    pub dim: usize,
    /// Hinge margin between answer and non-answer distances.
    pub margin: f64,
    /// (answer, non-answer) pairs sampled per question per epoch.
    pub pairs_per_question: usize,
    pub lr: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for GnnConfig {
    fn default() -> Self {
        GnnConfig {
            layers: 3,
            dim: 64,
            margin: 1.0,
            pairs_per_question: 32,
            lr: 1e-3,
            epochs: 30,
            seed: 0,
        }
    }
}

impl GnnConfig {
    pub fn validate(&self) -> Result<(), GnnError> {
        if self.layers == 0 {
            return Err(GnnError::InvalidConfig("layers must be >= 1".into()));
        }
        if self.dim == 0 {
            return Err(GnnError::InvalidConfig("dim must be >= 1".into()));
        }
        if self.margin <= 0.0 {
            return Err(GnnError::InvalidConfig("margin must be positive".into()));
        }
        if self.pairs_per_question == 0 {
            return Err(GnnError::InvalidConfig(
                "pairs_per_question must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Per-layer trainable pieces: message projection, attention scorer, and
/// update gate scorer.
#[derive(Clone, Debug)]
pub struct LayerParams {
    pub w_m: ParamId,
    pub b_m: ParamId,
    pub w_att: ParamId,
    pub b_att: ParamId,
    pub a_att: ParamId,
    pub w_gate: ParamId,
    pub b_gate: ParamId,
    pub a_gate: ParamId,
}

impl LayerParams {
    fn create(
        store: &mut ParamStore,
        k: usize,
        dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self, NumericsError> {
        let scale = 1.0 / (dim as f64).sqrt();
        let p = |s: &str| format!("layer{k}.{s}");
        Ok(LayerParams {
            w_m: store.add_uniform(&p("w_m"), &[dim, 2 * dim], scale, rng)?,
            b_m: store.add(&p("b_m"), Tensor::zeros(&[dim]))?,
            w_att: store.add_uniform(&p("w_att"), &[dim, 2 * dim], scale, rng)?,
            b_att: store.add(&p("b_att"), Tensor::zeros(&[dim]))?,
            a_att: store.add_uniform(&p("a_att"), &[dim], scale, rng)?,
            w_gate: store.add_uniform(&p("w_gate"), &[dim, 2 * dim], scale, rng)?,
            b_gate: store.add(&p("b_gate"), Tensor::zeros(&[dim]))?,
            a_gate: store.add_uniform(&p("a_gate"), &[dim], scale, rng)?,
        })
    }

    fn lookup(store: &ParamStore, k: usize) -> Result<Self, NumericsError> {
        let get = |s: &str| {
            let name = format!("layer{k}.{s}");
            store.id(&name).ok_or(NumericsError::MissingParam { name })
        };
        Ok(LayerParams {
            w_m: get("w_m")?,
            b_m: get("b_m")?,
            w_att: get("w_att")?,
            b_att: get("b_att")?,
            a_att: get("a_att")?,
            w_gate: get("w_gate")?,
            b_gate: get("b_gate")?,
            a_gate: get("a_gate")?,
        })
    }
}

const NON_TOPIC_INIT: &str = "entity_init";
const REL_GRU_PREFIX: &str = "rel_encoder";

/// How parameter values are produced at model construction.
pub enum InitSource<'a> {
    /// Fresh uniform initialization from the given stream.
    Random(&'a mut ChaCha8Rng),
    /// Values restored from a name-keyed tensor map (checkpoint load).
    Saved(&'a std::collections::BTreeMap<String, Tensor>),
}

/// The trained Step-I model: every parameter plus the token provider.
pub struct GnnModel {
    pub config: GnnConfig,
    pub provider: TokenProvider,
    pub store: ParamStore,
    pub grus: QuestionGrus,
    pub rel_gru: GruParams,
    pub layers: Vec<LayerParams>,
    pub entity_init: ParamId,
}

impl GnnModel {
    /// Builds the model with a fixed parameter creation order so random
    /// initialization and checkpoint restore agree on names and shapes.
    pub fn build(
        config: GnnConfig,
        provider: TokenProvider,
        init: InitSource<'_>,
    ) -> Result<Self, GnnError> {
        config.validate()?;
        let dim = config.dim;
        let mut store = ParamStore::new();
        match init {
            InitSource::Random(rng) => {
                provider.register_table(&mut store, rng)?;
                let scale = 1.0 / (dim as f64).sqrt();
                store.add_uniform(NON_TOPIC_INIT, &[dim], scale, rng)?;
                let grus = QuestionGrus::create(&mut store, dim, dim, rng)?;
                let rel_gru = GruParams::create(&mut store, REL_GRU_PREFIX, dim, dim, rng)?;
                let mut layers = Vec::with_capacity(config.layers);
                for k in 1..=config.layers {
                    layers.push(LayerParams::create(&mut store, k, dim, rng)?);
                }
                let entity_init = store.id(NON_TOPIC_INIT).expect("just added");
                Ok(GnnModel {
                    config,
                    provider,
                    store,
                    grus,
                    rel_gru,
                    layers,
                    entity_init,
                })
            }
            InitSource::Saved(tensors) => {
                let mut restore = |name: &str| -> Result<ParamId, GnnError> {
                    let value = tensors
                        .get(name)
                        .ok_or_else(|| GnnError::Checkpoint(format!("missing tensor {name:?}")))?;
                    store.add(name, value.clone()).map_err(GnnError::from)
                };
                if provider.mode == ProviderMode::Trainable {
                    restore(crate::encoder::TOKEN_TABLE)?;
                }
                let entity_init = restore(NON_TOPIC_INIT)?;
                for prefix in ["q_general.fwd", "q_general.bwd", "q_layer.fwd", "q_layer.bwd"] {
                    for leaf in ["wz", "uz", "bz", "wr", "ur", "br", "wh", "uh", "bh"] {
                        restore(&format!("{prefix}.{leaf}"))?;
                    }
                }
                for leaf in ["wz", "uz", "bz", "wr", "ur", "br", "wh", "uh", "bh"] {
                    restore(&format!("{REL_GRU_PREFIX}.{leaf}"))?;
                }
                for k in 1..=config.layers {
                    for leaf in [
                        "w_m", "b_m", "w_att", "b_att", "a_att", "w_gate", "b_gate", "a_gate",
                    ] {
                        restore(&format!("layer{k}.{leaf}"))?;
                    }
                }
                let grus = QuestionGrus::lookup(&store, dim, dim)?;
                let rel_gru = GruParams::lookup(&store, REL_GRU_PREFIX, dim, dim)?;
                let layers = (1..=config.layers)
                    .map(|k| LayerParams::lookup(&store, k))
                    .collect::<Result<_, _>>()?;
                Ok(GnnModel {
                    config,
                    provider,
                    store,
                    grus,
                    rel_gru,
                    layers,
                    entity_init,
                })
            }
        }
    }

    pub fn new(config: GnnConfig, provider: TokenProvider) -> Result<Self, GnnError> {
        let mut rng = seeded_rng(config.seed, RngStream::GnnInit);
        GnnModel::build(config, provider, InitSource::Random(&mut rng))
    }

    /// Serializes parameters, vocabulary, and the config fields needed to
    /// answer questions.
    pub fn to_checkpoint(&self) -> crate::checkpoint::Checkpoint {
        let mut ck = crate::checkpoint::Checkpoint::from_store(&self.store);
        ck.meta.insert("format".into(), "gnn".into());
        ck.meta.insert("layers".into(), self.config.layers.to_string());
        ck.meta.insert("dim".into(), self.config.dim.to_string());
        ck.meta.insert(
            "margin".into(),
            crate::checkpoint::f64_to_meta(self.config.margin),
        );
        ck.meta.insert(
            "provider_mode".into(),
            match self.provider.mode {
                ProviderMode::FileBacked => "file".into(),
                ProviderMode::Trainable => "trainable".into(),
            },
        );
        ck.meta
            .insert("vocab".into(), self.provider.tokens_in_order().join("\n"));
        if self.provider.mode == ProviderMode::FileBacked {
            let table = self
                .provider
                .table_tensor(None)
                .expect("file provider needs no store");
            ck.tensors.insert(crate::encoder::TOKEN_TABLE.into(), table);
        }
        ck
    }

    pub fn from_checkpoint(ck: &crate::checkpoint::Checkpoint) -> Result<Self, GnnError> {
        let meta = |key: &str| {
            ck.meta
                .get(key)
                .ok_or_else(|| GnnError::Checkpoint(format!("missing metadata {key:?}")))
        };
        if meta("format")? != "gnn" {
            return Err(GnnError::Checkpoint(format!(
                "expected format \"gnn\", found {:?}",
                meta("format")?
            )));
        }
        let layers: usize = meta("layers")?
            .parse()
            .map_err(|_| GnnError::Checkpoint("unparseable layers".into()))?;
        let dim: usize = meta("dim")?
            .parse()
            .map_err(|_| GnnError::Checkpoint("unparseable dim".into()))?;
        let margin = crate::checkpoint::f64_from_meta(meta("margin")?)
            .ok_or_else(|| GnnError::Checkpoint("unparseable margin".into()))?;
        let mode = match meta("provider_mode")?.as_str() {
            "file" => ProviderMode::FileBacked,
            "trainable" => ProviderMode::Trainable,
            other => {
                return Err(GnnError::Checkpoint(format!(
                    "unknown provider mode {other:?}"
                )))
            }
        };
        let tokens: Vec<String> = meta("vocab")?.split('\n').map(str::to_string).collect();
        let table = ck
            .tensors
            .get(crate::encoder::TOKEN_TABLE)
            .ok_or_else(|| GnnError::Checkpoint("missing token table".into()))?;
        if table.rows() != tokens.len() {
            return Err(GnnError::Checkpoint(format!(
                "vocab lists {} tokens but table has {} rows",
                tokens.len(),
                table.rows()
            )));
        }
        let provider = TokenProvider::from_parts(mode, &tokens, table);
        let config = GnnConfig {
            layers,
            dim,
            margin,
            ..GnnConfig::default()
        };
        GnnModel::build(config, provider, InitSource::Saved(&ck.tensors))
    }
}

/// Entity and relation embedding nodes for one layer.
pub struct LayerNodes {
    pub entities: Vec<NodeId>,
    pub relations: Vec<NodeId>,
}

/// Everything the rest of the pipeline needs from one forward pass.
pub struct ForwardResult {
    pub question: EncodedQuestion,
    /// Rank-1 tape node of per-entity distances, for loss construction.
    pub distance_node: NodeId,
    /// Euclidean distance from the question to each final entity embedding.
    pub distances: Vec<f64>,
}

/// One candidate message: tanh(W_m [e_i ; r_j] + b_m).
pub fn compute_message(
    tape: &mut Tape,
    store: &ParamStore,
    layer: &LayerParams,
    neighbor: NodeId,
    relation: NodeId,
) -> Result<NodeId, NumericsError> {
    let cat = tape.concat(neighbor, relation)?;
    let w = tape.param(store, layer.w_m)?;
    let b = tape.param(store, layer.b_m)?;
    let lin = tape.matvec(w, cat)?;
    let lin = tape.add(lin, b)?;
    tape.tanh(lin)
}

/// Attention score for a message against the layer reference embedding:
/// a · LeakyReLU(W [m ; q^k] + b).
pub fn attention_score(
    tape: &mut Tape,
    store: &ParamStore,
    layer: &LayerParams,
    message: NodeId,
    q_layer: NodeId,
) -> Result<NodeId, NumericsError> {
    let cat = tape.concat(message, q_layer)?;
    let w = tape.param(store, layer.w_att)?;
    let b = tape.param(store, layer.b_att)?;
    let lin = tape.matvec(w, cat)?;
    let lin = tape.add(lin, b)?;
    let act = tape.leaky_relu(lin, LEAKY_SLOPE)?;
    let a = tape.param(store, layer.a_att)?;
    tape.dot(a, act)
}

/// Softmax-weighted sum of messages. The shift subtracts the running
/// maximum score as a detached constant; softmax is shift-invariant, so
/// gradients are exact.
pub fn attend_aggregate(
    tape: &mut Tape,
    scores: &[NodeId],
    messages: &[NodeId],
) -> Result<NodeId, NumericsError> {
    debug_assert_eq!(scores.len(), messages.len());
    debug_assert!(!scores.is_empty());
    let max = scores
        .iter()
        .map(|&s| tape.value(s).item())
        .fold(f64::NEG_INFINITY, f64::max);
    let mut weights = Vec::with_capacity(scores.len());
    for &s in scores {
        let shifted = tape.add_scalar(s, -max)?;
        weights.push(tape.exp(shifted)?);
    }
    let mut denom = weights[0];
    for &w in &weights[1..] {
        denom = tape.add(denom, w)?;
    }
    let mut acc: Option<NodeId> = None;
    for (&w, &m) in weights.iter().zip(messages) {
        let term = tape.scale_by(m, w)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, term)?,
            None => term,
        });
    }
    tape.div_by(acc.expect("nonempty"), denom)
}

/// Gating score s = a_u · LeakyReLU(W_u [x ; q] + b_u) shared by the
/// aggregated message and the previous entity state.
fn gate_score(
    tape: &mut Tape,
    store: &ParamStore,
    layer: &LayerParams,
    x: NodeId,
    q: NodeId,
) -> Result<NodeId, NumericsError> {
    let cat = tape.concat(x, q)?;
    let w = tape.param(store, layer.w_gate)?;
    let b = tape.param(store, layer.b_gate)?;
    let lin = tape.matvec(w, cat)?;
    let lin = tape.add(lin, b)?;
    let act = tape.leaky_relu(lin, LEAKY_SLOPE)?;
    let a = tape.param(store, layer.a_gate)?;
    tape.dot(a, act)
}

/// Convex combination of the aggregated message and the previous state,
/// weighted by a two-way shifted softmax of their gate scores.
pub fn gated_update(
    tape: &mut Tape,
    store: &ParamStore,
    layer: &LayerParams,
    aggregated: NodeId,
    previous: NodeId,
    q_general: NodeId,
) -> Result<NodeId, NumericsError> {
    let s_m = gate_score(tape, store, layer, aggregated, q_general)?;
    let s_e = gate_score(tape, store, layer, previous, q_general)?;
    let max = tape.value(s_m).item().max(tape.value(s_e).item());
    let sm = tape.add_scalar(s_m, -max)?;
    let se = tape.add_scalar(s_e, -max)?;
    let wm = tape.exp(sm)?;
    let we = tape.exp(se)?;
    let denom = tape.add(wm, we)?;
    let tm = tape.scale_by(aggregated, wm)?;
    let te = tape.scale_by(previous, we)?;
    let num = tape.add(tm, te)?;
    tape.div_by(num, denom)
}

/// Encodes one relation label with the relation GRU (last hidden state).
/// Labels that tokenize to nothing fall back to the UNK token.
fn encode_relation_label(
    tape: &mut Tape,
    model: &GnnModel,
    label: &str,
) -> Result<NodeId, GnnError> {
    let mut toks = tokenize(label);
    if toks.is_empty() {
        toks.push(UNK_TOKEN.to_string());
    }
    let embedded = embed_tokens(tape, &model.store, &model.provider, &toks)?;
    let h0 = tape.constant(Tensor::zeros(&[model.config.dim]))?;
    crate::numerics::gru_encode_last(tape, &model.store, &model.rel_gru, &embedded, h0)
        .map_err(GnnError::from)
}

/// Initial embeddings: topic entities copy the question embedding, all
/// other entities share one learned vector, relations encode their labels.
pub fn init_embeddings(
    tape: &mut Tape,
    model: &GnnModel,
    kg: &KnowledgeGraph,
    q: NodeId,
    topics: &BTreeSet<EntityId>,
) -> Result<LayerNodes, GnnError> {
    let shared = tape.param(&model.store, model.entity_init)?;
    let entities = (0..kg.entity_count())
        .map(|e| if topics.contains(&e) { q } else { shared })
        .collect();
    let mut relations = Vec::with_capacity(kg.relation_count());
    for r in 0..kg.relation_count() {
        relations.push(encode_relation_label(tape, model, kg.relation_label(r))?);
    }
    Ok(LayerNodes {
        entities,
        relations,
    })
}

/// Full forward pass over the graph for one question.
///
/// All entity embeddings of a layer live in one matrix node and the
/// per-edge work runs as batched matrix ops; `compute_message`,
/// `attention_score`, `attend_aggregate`, and `gated_update` spell out the
/// same math one edge at a time, and a test pins the two paths together.
pub fn forward(
    tape: &mut Tape,
    model: &GnnModel,
    kg: &KnowledgeGraph,
    question_tokens: &[String],
    topics: &[EntityId],
) -> Result<ForwardResult, GnnError> {
    if kg.entity_count() == 0 {
        return Err(GnnError::BadExample {
            id: String::new(),
            detail: "empty knowledge graph".into(),
        });
    }
    for &t in topics {
        if t >= kg.entity_count() {
            return Err(GnnError::BadExample {
                id: String::new(),
                detail: format!("topic entity {t} out of range"),
            });
        }
    }
    let topic_set: BTreeSet<EntityId> = topics.iter().copied().collect();
    let embedded = embed_tokens(tape, &model.store, &model.provider, question_tokens)?;
    let q = encode_general(tape, &model.store, &model.grus, &embedded)?;

    // E^0: topic rows copy q, the rest share one learned vector.
    let shared = tape.param(&model.store, model.entity_init)?;
    let init_rows: Vec<NodeId> = (0..kg.entity_count())
        .map(|e| if topic_set.contains(&e) { q } else { shared })
        .collect();
    let mut entities = tape.stack_rows(&init_rows)?;

    let mut rel_rows = Vec::with_capacity(kg.relation_count());
    for r in 0..kg.relation_count() {
        rel_rows.push(encode_relation_label(tape, model, kg.relation_label(r))?);
    }
    let relations = if rel_rows.is_empty() {
        None
    } else {
        Some(tape.stack_rows(&rel_rows)?)
    };

    // Flat edge lists, shared by every layer: edge p carries a message from
    // entity src[p] over relation rel[p] into receivers[seg[p]].
    let mut receivers: Vec<EntityId> = Vec::new();
    let mut src: Vec<usize> = Vec::new();
    let mut rel: Vec<usize> = Vec::new();
    let mut seg: Vec<usize> = Vec::new();
    for e in 0..kg.entity_count() {
        let neighbors = kg.neighbors(e)?;
        if neighbors.is_empty() {
            continue;
        }
        let s = receivers.len();
        receivers.push(e);
        for o in neighbors {
            src.push(o.to());
            rel.push(o.triple.relation);
            seg.push(s);
        }
    }

    // Row indices splitting a transposed [d x 2d] weight into the halves
    // acting on the varying input and on the fixed question vector.
    let d = model.config.dim;
    let x_half: Vec<usize> = (0..d).collect();
    let q_half: Vec<usize> = (d..2 * d).collect();
    let zeros = tape.constant(Tensor::zeros(&[d]))?;

    // The question-side contribution W [0 ; q] + b, one vector reused by
    // every row of a batched linear layer.
    let fixed_part = |tape: &mut Tape,
                      w: NodeId,
                      b: NodeId,
                      qv: NodeId|
     -> Result<NodeId, NumericsError> {
        let padded = tape.concat(zeros, qv)?;
        let lin = tape.matvec(w, padded)?;
        tape.add(lin, b)
    };

    let mut layer_states = Vec::with_capacity(model.config.layers);
    let mut carried = None;
    for layer in &model.layers {
        let (q_k, pair) = encode_layerwise(tape, &model.store, &model.grus, &embedded, carried)?;
        carried = Some(pair);
        layer_states.push((q_k, pair));
        if receivers.is_empty() {
            continue;
        }
        let relations = relations.expect("edges reference relations");
        let edges = src.len();

        // Messages tanh(W_m [e ; r] + b_m), one row per edge. The entity
        // half multiplies per edge; the relation half multiplies once per
        // relation and is gathered out to edges with the bias folded in.
        let wm = tape.param(&model.store, layer.w_m)?;
        let wm_t = tape.transpose(wm)?;
        let wm_e = tape.gather_rows(wm_t, &x_half)?;
        let wm_r = tape.gather_rows(wm_t, &q_half)?;
        let e_src = tape.gather_rows(entities, &src)?;
        let lin_src = tape.matmul(e_src, wm_e)?;
        let r_lin = tape.matmul(relations, wm_r)?;
        let bm = tape.param(&model.store, layer.b_m)?;
        let bm_rel = tape.broadcast_rows(bm, kg.relation_count())?;
        let r_lin = tape.add(r_lin, bm_rel)?;
        let r_edge = tape.gather_rows(r_lin, &rel)?;
        let lin = tape.add(lin_src, r_edge)?;
        let messages = tape.tanh(lin)?;

        // Attention scores a . LeakyReLU(W_a [m ; q^k] + b_a) per edge.
        let wa = tape.param(&model.store, layer.w_att)?;
        let wa_t = tape.transpose(wa)?;
        let wa_m = tape.gather_rows(wa_t, &x_half)?;
        let ba = tape.param(&model.store, layer.b_att)?;
        let att_fixed = fixed_part(tape, wa, ba, q_k)?;
        let lin_m = tape.matmul(messages, wa_m)?;
        let fixed_rows = tape.broadcast_rows(att_fixed, edges)?;
        let lin = tape.add(lin_m, fixed_rows)?;
        let act = tape.leaky_relu(lin, LEAKY_SLOPE)?;
        let aa = tape.param(&model.store, layer.a_att)?;
        let scores = tape.matvec(act, aa)?;

        // Per-receiver softmax, shifted by the detached segment maximum.
        let score_vals = tape.value(scores).values().to_vec();
        let mut seg_max = vec![f64::NEG_INFINITY; receivers.len()];
        for (&s, &v) in seg.iter().zip(&score_vals) {
            seg_max[s] = seg_max[s].max(v);
        }
        let shift: Vec<f64> = seg.iter().map(|&s| -seg_max[s]).collect();
        let shift = tape.constant(Tensor::vector(&shift))?;
        let shifted = tape.add(scores, shift)?;
        let expd = tape.exp(shifted)?;
        let denom_seg = tape.segment_sum(expd, &seg, receivers.len())?;
        let denom = tape.gather_rows(denom_seg, &seg)?;
        let weights = tape.div(expd, denom)?;
        let weighted = tape.scale_rows(messages, weights)?;
        let aggregated = tape.segment_sum(weighted, &seg, receivers.len())?;

        // Gate: one scoring head over [x ; q], softmaxed across the
        // aggregated message and the previous state, again with a
        // detached pairwise maximum shift.
        let prev = tape.gather_rows(entities, &receivers)?;
        let wg = tape.param(&model.store, layer.w_gate)?;
        let wg_t = tape.transpose(wg)?;
        let wg_x = tape.gather_rows(wg_t, &x_half)?;
        let bg = tape.param(&model.store, layer.b_gate)?;
        let gate_fixed = fixed_part(tape, wg, bg, q)?;
        let gate_rows = tape.broadcast_rows(gate_fixed, receivers.len())?;
        let ag = tape.param(&model.store, layer.a_gate)?;
        let lin_m = tape.matmul(aggregated, wg_x)?;
        let lin_m = tape.add(lin_m, gate_rows)?;
        let act_m = tape.leaky_relu(lin_m, LEAKY_SLOPE)?;
        let s_m = tape.matvec(act_m, ag)?;
        let lin_e = tape.matmul(prev, wg_x)?;
        let lin_e = tape.add(lin_e, gate_rows)?;
        let act_e = tape.leaky_relu(lin_e, LEAKY_SLOPE)?;
        let s_e = tape.matvec(act_e, ag)?;
        let sm_vals = tape.value(s_m).values().to_vec();
        let se_vals = tape.value(s_e).values().to_vec();
        let gshift: Vec<f64> = sm_vals
            .iter()
            .zip(&se_vals)
            .map(|(a, b)| -a.max(*b))
            .collect();
        let gshift = tape.constant(Tensor::vector(&gshift))?;
        let sm = tape.add(s_m, gshift)?;
        let se = tape.add(s_e, gshift)?;
        let em = tape.exp(sm)?;
        let ee = tape.exp(se)?;
        let gden = tape.add(em, ee)?;
        let w_m = tape.div(em, gden)?;
        let w_e = tape.div(ee, gden)?;
        let tm = tape.scale_rows(aggregated, w_m)?;
        let te = tape.scale_rows(prev, w_e)?;
        let updated = tape.add(tm, te)?;
        entities = tape.scatter_rows(entities, updated, &receivers)?;
    }

    let q_rows = tape.broadcast_rows(q, kg.entity_count())?;
    let diff = tape.sub(entities, q_rows)?;
    let distance_node = tape.row_norms(diff)?;
    let distances = tape.value(distance_node).values().to_vec();
    Ok(ForwardResult {
        question: EncodedQuestion {
            tokens: embedded,
            q,
            layer_states,
        },
        distance_node,
        distances,
    })
}

/// Hinge rank loss over sampled pairs:
/// sum of max(‖q − e_ans‖ − ‖q − e_non‖ + margin, 0), reading both
/// distances from the forward pass's per-entity distance node.
pub fn rank_loss(
    tape: &mut Tape,
    distances: NodeId,
    pairs: &[(EntityId, EntityId)],
    margin: f64,
) -> Result<NodeId, NumericsError> {
    if pairs.is_empty() {
        return tape.constant(Tensor::scalar(0.0));
    }
    let ans: Vec<usize> = pairs.iter().map(|p| p.0).collect();
    let non: Vec<usize> = pairs.iter().map(|p| p.1).collect();
    let da = tape.gather_rows(distances, &ans)?;
    let dn = tape.gather_rows(distances, &non)?;
    let gap = tape.sub(da, dn)?;
    let shifted = tape.add_scalar(gap, margin)?;
    let hinge = tape.relu(shifted)?;
    tape.sum(hinge)
}

/// Entities ranked by distance (ascending, ties by id), truncated to n.
pub fn select_candidates(distances: &[f64], n: usize) -> Vec<(EntityId, f64)> {
    let mut order: Vec<EntityId> = (0..distances.len()).collect();
    order.sort_by(|&a, &b| {
        distances[a]
            .partial_cmp(&distances[b])
            .expect("distances are finite")
            .then(a.cmp(&b))
    });
    order
        .into_iter()
        .take(n)
        .map(|e| (e, distances[e]))
        .collect()
}

/// Per-epoch training diagnostics.
#[derive(Clone, Debug)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub valid_hits_at_1: f64,
}

/// Question tokens with topic-entity labels masked out, ready for `forward`.
pub fn masked_tokens(kg: &KnowledgeGraph, ex: &QaExample) -> Vec<String> {
    let mentions: Vec<String> = ex
        .topic_entities
        .iter()
        .map(|&t| kg.entity_label(t).to_string())
        .collect();
    tokenize_and_mask(&ex.question, &mentions)
}

fn validate_example(kg: &KnowledgeGraph, ex: &QaExample) -> Result<(), GnnError> {
    let bad = |detail: String| GnnError::BadExample {
        id: ex.id.clone(),
        detail,
    };
    if ex.answers.is_empty() {
        return Err(bad("no answers".into()));
    }
    for &a in &ex.answers {
        if a >= kg.entity_count() {
            return Err(bad(format!("answer entity {a} out of range")));
        }
    }
    if ex.topic_entities.is_empty() {
        return Err(bad("no topic entities".into()));
    }
    for &t in &ex.topic_entities {
        if t >= kg.entity_count() {
            return Err(bad(format!("topic entity {t} out of range")));
        }
    }
    if ex.answers.len() >= kg.entity_count() {
        return Err(bad("answers cover every entity; nothing to contrast".into()));
    }
    Ok(())
}

/// Hits@1 of the nearest entity over a dataset.
pub fn hits_at_1(
    model: &GnnModel,
    kg: &KnowledgeGraph,
    examples: &[QaExample],
) -> Result<f64, GnnError> {
    if examples.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0usize;
    for ex in examples {
        let mut tape = Tape::new();
        let fwd = forward(&mut tape, model, kg, &masked_tokens(kg, ex), &ex.topic_entities)?;
        let top = select_candidates(&fwd.distances, 1);
        if ex.answers.contains(&top[0].0) {
            hits += 1;
        }
    }
    Ok(hits as f64 / examples.len() as f64)
}

/// Builds the token vocabulary a trainable provider needs: question tokens
/// (unmasked), entity labels, and relation labels.
pub fn corpus_tokens(kg: &KnowledgeGraph, datasets: &[&[QaExample]]) -> Vec<String> {
    let mut out = Vec::new();
    for split in datasets {
        for ex in *split {
            out.extend(tokenize(&ex.question));
        }
    }
    for e in 0..kg.entity_count() {
        out.extend(tokenize(kg.entity_label(e)));
    }
    for r in 0..kg.relation_count() {
        out.extend(tokenize(kg.relation_label(r)));
    }
    out
}

/// Trains a fresh model. After each epoch the validation Hits@1 decides
/// whether to snapshot parameters; the best snapshot wins (ties keep the
/// earliest). With an empty validation split the final epoch's parameters
/// are returned.
pub fn train(
    kg: &KnowledgeGraph,
    train_set: &[QaExample],
    valid_set: &[QaExample],
    provider: TokenProvider,
    config: GnnConfig,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<GnnModel, GnnError> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(GnnError::InvalidConfig("empty training set".into()));
    }
    for ex in train_set.iter().chain(valid_set) {
        validate_example(kg, ex)?;
    }
    let mut model = GnnModel::new(config.clone(), provider)?;
    let mut adam = Adam::new(AdamConfig::with_lr(config.lr), &model.store);
    let mut pair_rng = seeded_rng(config.seed, RngStream::PairSampling);

    // Per-question complement of the answer set, for negative sampling.
    let non_answers: Vec<Vec<EntityId>> = train_set
        .iter()
        .map(|ex| {
            let answers: BTreeSet<EntityId> = ex.answers.iter().copied().collect();
            (0..kg.entity_count())
                .filter(|e| !answers.contains(e))
                .collect()
        })
        .collect();

    let mut best: Option<(f64, ParamStore)> = None;
    for epoch in 1..=config.epochs {
        let mut loss_sum = 0.0;
        for (qi, ex) in train_set.iter().enumerate() {
            let pairs: Vec<(EntityId, EntityId)> = (0..config.pairs_per_question)
                .map(|_| {
                    let a = ex.answers[pair_rng.gen_range(0..ex.answers.len())];
                    let n = non_answers[qi][pair_rng.gen_range(0..non_answers[qi].len())];
                    (a, n)
                })
                .collect();
            let mut tape = Tape::new();
            let fwd = forward(&mut tape, &model, kg, &masked_tokens(kg, ex), &ex.topic_entities)?;
            let loss = rank_loss(&mut tape, fwd.distance_node, &pairs, config.margin)?;
            loss_sum += tape.value(loss).item();
            model.store.zero_grads();
            tape.backward(loss, &mut model.store)?;
            adam.step(&mut model.store);
        }
        let valid_hits = hits_at_1(&model, kg, valid_set)?;
        on_epoch(&EpochStats {
            epoch,
            mean_loss: loss_sum / train_set.len() as f64,
            valid_hits_at_1: valid_hits,
        });
        if !valid_set.is_empty() {
            let improved = match &best {
                Some((b, _)) => valid_hits > *b,
                None => true,
            };
            if improved {
                best = Some((valid_hits, model.store.clone()));
            }
        }
    }
    if let Some((_, snapshot)) = best {
        model.store = snapshot;
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::tests::film_fixture;

    fn tiny_model(kg: &KnowledgeGraph, layers: usize, dim: usize) -> GnnModel {
        let provider = TokenProvider::trainable(corpus_tokens(kg, &[]), dim);
        let config = GnnConfig {
            layers,
            dim,
            epochs: 1,
            ..GnnConfig::default()
        };
        GnnModel::new(config, provider).unwrap()
    }

    #[test]
    fn aggregation_with_one_message_is_identity() {
        let mut tape = Tape::new();
        let m = tape.constant(Tensor::vector(&[0.4, -0.9])).unwrap();
        let s = tape.constant(Tensor::scalar(3.7)).unwrap();
        let out = attend_aggregate(&mut tape, &[s], &[m]).unwrap();
        let got = tape.value(out).values();
        assert!((got[0] - 0.4).abs() < 1e-15 && (got[1] + 0.9).abs() < 1e-15);
    }

    #[test]
    fn aggregation_matches_direct_softmax() {
        let mut tape = Tape::new();
        let m1 = tape.constant(Tensor::vector(&[1.0, 0.0])).unwrap();
        let m2 = tape.constant(Tensor::vector(&[0.0, 1.0])).unwrap();
        let s1 = tape.constant(Tensor::scalar(2.0)).unwrap();
        let s2 = tape.constant(Tensor::scalar(-1.0)).unwrap();
        let out = attend_aggregate(&mut tape, &[s1, s2], &[m1, m2]).unwrap();
        let w1 = (2.0f64).exp() / ((2.0f64).exp() + (-1.0f64).exp());
        let got = tape.value(out).values();
        assert!((got[0] - w1).abs() < 1e-12);
        assert!((got[1] - (1.0 - w1)).abs() < 1e-12);
    }

    #[test]
    fn aggregation_survives_huge_scores() {
        let mut tape = Tape::new();
        let m1 = tape.constant(Tensor::vector(&[1.0])).unwrap();
        let m2 = tape.constant(Tensor::vector(&[-1.0])).unwrap();
        let s1 = tape.constant(Tensor::scalar(5000.0)).unwrap();
        let s2 = tape.constant(Tensor::scalar(4000.0)).unwrap();
        let out = attend_aggregate(&mut tape, &[s1, s2], &[m1, m2]).unwrap();
        assert!((tape.value(out).values()[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn gate_is_convex_combination() {
        let kg = film_fixture();
        let model = tiny_model(&kg, 1, 4);
        let mut tape = Tape::new();
        let m = tape.constant(Tensor::vector(&[1.0, 2.0, 3.0, 4.0])).unwrap();
        let e = tape.constant(Tensor::vector(&[-1.0, 0.0, 1.0, 2.0])).unwrap();
        let q = tape.constant(Tensor::vector(&[0.3, -0.2, 0.5, 0.1])).unwrap();
        let out = gated_update(&mut tape, &model.store, &model.layers[0], m, e, q).unwrap();
        let got = tape.value(out).values().to_vec();
        // Recover the mixing weight from the first coordinate and check
        // every coordinate lies on the same segment between e and m.
        let w = (got[0] - (-1.0)) / (1.0 - (-1.0));
        assert!((0.0..=1.0).contains(&w));
        let ev = [-1.0, 0.0, 1.0, 2.0];
        let mv = [1.0, 2.0, 3.0, 4.0];
        for i in 0..4 {
            let expect = w * mv[i] + (1.0 - w) * ev[i];
            assert!((got[i] - expect).abs() < 1e-10);
        }
    }

    #[test]
    fn forward_gives_every_entity_a_distance() {
        let kg = film_fixture();
        let model = tiny_model(&kg, 2, 6);
        let mut tape = Tape::new();
        let fwd = forward(
            &mut tape,
            &model,
            &kg,
            &["who".into(), "directed".into()],
            &[2],
        )
        .unwrap();
        assert_eq!(fwd.distances.len(), kg.entity_count());
        assert_eq!(fwd.question.layer_states.len(), 2);
        assert!(fwd.distances.iter().all(|d| d.is_finite()));
    }

    #[test]
    fn forward_is_deterministic() {
        let kg = film_fixture();
        let model = tiny_model(&kg, 2, 5);
        let toks: Vec<String> = vec!["who".into(), "acted".into()];
        let mut t1 = Tape::new();
        let f1 = forward(&mut t1, &model, &kg, &toks, &[2]).unwrap();
        let mut t2 = Tape::new();
        let f2 = forward(&mut t2, &model, &kg, &toks, &[2]).unwrap();
        assert_eq!(f1.distances, f2.distances);
    }

    /// The same pass built one edge at a time from the public per-edge ops.
    fn reference_distances(
        model: &GnnModel,
        kg: &KnowledgeGraph,
        toks: &[String],
        topics: &[EntityId],
    ) -> Vec<f64> {
        let mut tape = Tape::new();
        let topic_set: BTreeSet<EntityId> = topics.iter().copied().collect();
        let embedded = embed_tokens(&mut tape, &model.store, &model.provider, toks).unwrap();
        let q = encode_general(&mut tape, &model.store, &model.grus, &embedded).unwrap();
        let mut state = init_embeddings(&mut tape, model, kg, q, &topic_set).unwrap();
        let mut carried = None;
        for layer in &model.layers {
            let (q_k, pair) =
                encode_layerwise(&mut tape, &model.store, &model.grus, &embedded, carried)
                    .unwrap();
            carried = Some(pair);
            let mut next = Vec::with_capacity(state.entities.len());
            for e in 0..kg.entity_count() {
                let neighbors = kg.neighbors(e).unwrap();
                if neighbors.is_empty() {
                    next.push(state.entities[e]);
                    continue;
                }
                let mut scores = Vec::new();
                let mut messages = Vec::new();
                for o in neighbors {
                    let msg = compute_message(
                        &mut tape,
                        &model.store,
                        layer,
                        state.entities[o.to()],
                        state.relations[o.triple.relation],
                    )
                    .unwrap();
                    let score =
                        attention_score(&mut tape, &model.store, layer, msg, q_k).unwrap();
                    messages.push(msg);
                    scores.push(score);
                }
                let agg = attend_aggregate(&mut tape, &scores, &messages).unwrap();
                next.push(
                    gated_update(&mut tape, &model.store, layer, agg, state.entities[e], q)
                        .unwrap(),
                );
            }
            state.entities = next;
        }
        let qv = tape.value(q).values().to_vec();
        state
            .entities
            .iter()
            .map(|&e| {
                let ev = tape.value(e).values();
                qv.iter()
                    .zip(ev)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt()
            })
            .collect()
    }

    #[test]
    fn batched_forward_matches_per_edge_reference() {
        let kg = film_fixture();
        let model = tiny_model(&kg, 2, 5);
        let toks: Vec<String> = vec!["who".into(), "directed".into(), "it".into()];
        let mut tape = Tape::new();
        let fwd = forward(&mut tape, &model, &kg, &toks, &[2]).unwrap();
        let reference = reference_distances(&model, &kg, &toks, &[2]);
        assert_eq!(fwd.distances.len(), reference.len());
        for (i, (a, b)) in fwd.distances.iter().zip(&reference).enumerate() {
            assert!(
                (a - b).abs() < 1e-10,
                "entity {i}: batched {a} vs reference {b}"
            );
        }
    }

    #[test]
    fn topic_entity_starts_at_question_embedding() {
        let kg = film_fixture();
        let model = tiny_model(&kg, 1, 4);
        let mut tape = Tape::new();
        let toks: Vec<String> = vec!["who".into()];
        let embedded = embed_tokens(&mut tape, &model.store, &model.provider, &toks).unwrap();
        let q = encode_general(&mut tape, &model.store, &model.grus, &embedded).unwrap();
        let topics: BTreeSet<EntityId> = [3].into_iter().collect();
        let init = init_embeddings(&mut tape, &model, &kg, q, &topics).unwrap();
        assert_eq!(init.entities[3], q);
        assert_eq!(init.entities[0], init.entities[1], "non-topics share a vector");
        assert_ne!(init.entities[0], q);
    }

    #[test]
    fn rank_loss_zero_when_answers_much_closer() {
        let mut tape = Tape::new();
        let d = tape.constant(Tensor::vector(&[0.1, 9.0])).unwrap();
        let loss = rank_loss(&mut tape, d, &[(0, 1)], 1.0).unwrap();
        assert_eq!(tape.value(loss).item(), 0.0);
        let flipped = rank_loss(&mut tape, d, &[(1, 0)], 1.0).unwrap();
        // 9.0 - 0.1 + 1.0
        assert!((tape.value(flipped).item() - 9.9).abs() < 1e-12);
    }

    #[test]
    fn rank_loss_gradient_matches_finite_differences() {
        let kg = film_fixture();
        let mut model = tiny_model(&kg, 1, 3);
        let toks: Vec<String> = vec!["who".into(), "directed".into(), "it".into()];
        let pairs = vec![(0usize, 5usize), (3, 7)];

        let loss_value = |m: &GnnModel| -> f64 {
            let mut tape = Tape::new();
            let fwd = forward(&mut tape, m, &kg, &toks, &[2]).unwrap();
            let loss = rank_loss(&mut tape, fwd.distance_node, &pairs, 1.0).unwrap();
            tape.value(loss).item()
        };

        let mut tape = Tape::new();
        let fwd = forward(&mut tape, &model, &kg, &toks, &[2]).unwrap();
        let loss = rank_loss(&mut tape, fwd.distance_node, &pairs, 1.0).unwrap();
        model.store.zero_grads();
        tape.backward(loss, &mut model.store).unwrap();

        // Probe a few parameters across the model: message weights,
        // attention vector, gate weights, GRU weights, token table.
        let probe_names = [
            "layer1.w_m",
            "layer1.a_att",
            "layer1.w_gate",
            "q_general.fwd.wh",
            "rel_encoder.wz",
            "tokens.table",
            "entity_init",
        ];
        let eps = 1e-5;
        for name in probe_names {
            let id = model.store.id(name).unwrap();
            let analytic = model.store.grad(id).values()[0];
            let orig = model.store.value(id).values()[0];
            model.store.value_mut(id).values_mut()[0] = orig + eps;
            let plus = loss_value(&model);
            model.store.value_mut(id).values_mut()[0] = orig - eps;
            let minus = loss_value(&model);
            model.store.value_mut(id).values_mut()[0] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            assert!(
                (analytic - numeric).abs() < 1e-5 * (1.0 + numeric.abs()),
                "{name}: analytic {analytic} vs numeric {numeric}"
            );
        }
    }

    #[test]
    fn candidate_selection_orders_by_distance_then_id() {
        let picks = select_candidates(&[0.5, 0.1, 0.5, 0.9], 3);
        assert_eq!(
            picks.iter().map(|p| p.0).collect::<Vec<_>>(),
            vec![1, 0, 2]
        );
    }

    #[test]
    fn training_reduces_loss_and_improves_ranking() {
        let kg = film_fixture();
        // Two one-hop questions over the fixture film graph.
        let train_set = vec![
            QaExample {
                id: "t0".into(),
                question: "who directed Batman 1989".into(),
                topic_entities: vec![2],
                answers: vec![0],
                gold_chain: None,
            },
            QaExample {
                id: "t1".into(),
                question: "where was Tim Burton born".into(),
                topic_entities: vec![0],
                answers: vec![1],
                gold_chain: None,
            },
        ];
        let provider = TokenProvider::trainable(corpus_tokens(&kg, &[&train_set]), 8);
        let config = GnnConfig {
            layers: 2,
            dim: 8,
            epochs: 18,
            lr: 0.01,
            pairs_per_question: 8,
            seed: 3,
            ..GnnConfig::default()
        };
        let mut stats = Vec::new();
        let model = train(&kg, &train_set, &[], provider, config, |s| {
            stats.push(s.clone())
        })
        .unwrap();
        assert!(
            stats.last().unwrap().mean_loss < stats.first().unwrap().mean_loss,
            "loss should fall: {} -> {}",
            stats.first().unwrap().mean_loss,
            stats.last().unwrap().mean_loss
        );
        // The trained model should rank the director question's answer first.
        let hits = hits_at_1(&model, &kg, &train_set).unwrap();
        assert!(hits >= 0.5, "expected the tiny model to fit, hits {hits}");
    }

    #[test]
    fn empty_pair_list_gives_zero_loss() {
        let mut tape = Tape::new();
        let d = tape.constant(Tensor::vector(&[1.0])).unwrap();
        let loss = rank_loss(&mut tape, d, &[], 0.5).unwrap();
        assert_eq!(tape.value(loss).item(), 0.0);
    }

    #[test]
    fn checkpoint_round_trip_preserves_behavior_bit_for_bit() {
        let kg = film_fixture();
        let model = tiny_model(&kg, 2, 5);
        let ck = model.to_checkpoint();
        let bytes = ck.to_bytes();
        let restored = GnnModel::from_checkpoint(
            &crate::checkpoint::Checkpoint::from_bytes(&bytes).unwrap(),
        )
        .unwrap();
        assert_eq!(restored.to_checkpoint().to_bytes(), bytes);

        let toks: Vec<String> = vec!["who".into(), "directed".into()];
        let mut t1 = Tape::new();
        let f1 = forward(&mut t1, &model, &kg, &toks, &[2]).unwrap();
        let mut t2 = Tape::new();
        let f2 = forward(&mut t2, &restored, &kg, &toks, &[2]).unwrap();
        assert_eq!(f1.distances, f2.distances);
    }

    #[test]
    fn rejects_out_of_range_answers() {
        let kg = film_fixture();
        let bad = vec![QaExample {
            id: "x".into(),
            question: "who".into(),
            topic_entities: vec![0],
            answers: vec![99],
            gold_chain: None,
        }];
        let provider = TokenProvider::trainable(corpus_tokens(&kg, &[]), 4);
        let err = train(&kg, &bad, &[], provider, GnnConfig {
            layers: 1,
            dim: 4,
            epochs: 1,
            ..GnnConfig::default()
        }, |_| {});
        assert!(matches!(err, Err(GnnError::BadExample { .. })));
    }
}
