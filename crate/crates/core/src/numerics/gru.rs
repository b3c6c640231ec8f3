//! Gated recurrent unit built on the tape, plus single- and bi-directional
//! sequence encoders. Update convention: h_t = z ⊙ h_prev + (1 − z) ⊙ h̃,
//! so a saturated update gate passes the previous hidden state through.

use rand::Rng;

use super::tape::{NodeId, ParamId, ParamStore, Tape};
use super::tensor::Tensor;
use super::NumericsError;

/// Parameter ids for one GRU direction.
#[derive(Clone, Debug)]
pub struct GruParams {
    pub input_dim: usize,
    pub hidden_dim: usize,
    wz: ParamId,
    uz: ParamId,
    bz: ParamId,
    wr: ParamId,
    ur: ParamId,
    br: ParamId,
    wh: ParamId,
    uh: ParamId,
    bh: ParamId,
}

impl GruParams {
    /// Registers nine weight tensors under `prefix` with uniform init
    /// scaled by 1/sqrt(hidden_dim).
    pub fn create(
        store: &mut ParamStore,
        prefix: &str,
        input_dim: usize,
        hidden_dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self, NumericsError> {
        let scale = 1.0 / (hidden_dim as f64).sqrt();
        let mat = |store: &mut ParamStore, name: &str, rows: usize, cols: usize, rng: &mut _| {
            store.add_uniform(&format!("{prefix}.{name}"), &[rows, cols], scale, rng)
        };
        let wz = mat(store, "wz", hidden_dim, input_dim, rng)?;
        let uz = mat(store, "uz", hidden_dim, hidden_dim, rng)?;
        let bz = store.add(&format!("{prefix}.bz"), Tensor::zeros(&[hidden_dim]))?;
        let wr = mat(store, "wr", hidden_dim, input_dim, rng)?;
        let ur = mat(store, "ur", hidden_dim, hidden_dim, rng)?;
        let br = store.add(&format!("{prefix}.br"), Tensor::zeros(&[hidden_dim]))?;
        let wh = mat(store, "wh", hidden_dim, input_dim, rng)?;
        let uh = mat(store, "uh", hidden_dim, hidden_dim, rng)?;
        let bh = store.add(&format!("{prefix}.bh"), Tensor::zeros(&[hidden_dim]))?;
        Ok(GruParams {
            input_dim,
            hidden_dim,
            wz,
            uz,
            bz,
            wr,
            ur,
            br,
            wh,
            uh,
            bh,
        })
    }

    /// Rebinds to parameters previously created under `prefix`.
    pub fn lookup(
        store: &ParamStore,
        prefix: &str,
        input_dim: usize,
        hidden_dim: usize,
    ) -> Result<Self, NumericsError> {
        let get = |name: &str| {
            store
                .id(&format!("{prefix}.{name}"))
                .ok_or_else(|| NumericsError::MissingParam {
                    name: format!("{prefix}.{name}"),
                })
        };
        Ok(GruParams {
            input_dim,
            hidden_dim,
            wz: get("wz")?,
            uz: get("uz")?,
            bz: get("bz")?,
            wr: get("wr")?,
            ur: get("ur")?,
            br: get("br")?,
            wh: get("wh")?,
            uh: get("uh")?,
            bh: get("bh")?,
        })
    }
}

fn gate(
    tape: &mut Tape,
    store: &ParamStore,
    w: ParamId,
    u: ParamId,
    b: ParamId,
    x: NodeId,
    h: NodeId,
) -> Result<NodeId, NumericsError> {
    let wn = tape.param(store, w)?;
    let un = tape.param(store, u)?;
    let bn = tape.param(store, b)?;
    let wx = tape.matvec(wn, x)?;
    let uh = tape.matvec(un, h)?;
    let s = tape.add(wx, uh)?;
    tape.add(s, bn)
}

/// One GRU step: returns the next hidden state node.
pub fn gru_cell(
    tape: &mut Tape,
    store: &ParamStore,
    p: &GruParams,
    x: NodeId,
    h_prev: NodeId,
) -> Result<NodeId, NumericsError> {
    let z_pre = gate(tape, store, p.wz, p.uz, p.bz, x, h_prev)?;
    let z = tape.sigmoid(z_pre)?;
    let r_pre = gate(tape, store, p.wr, p.ur, p.br, x, h_prev)?;
    let r = tape.sigmoid(r_pre)?;

    let rh = tape.mul(r, h_prev)?;
    let whn = tape.param(store, p.wh)?;
    let uhn = tape.param(store, p.uh)?;
    let bhn = tape.param(store, p.bh)?;
    let wx = tape.matvec(whn, x)?;
    let urh = tape.matvec(uhn, rh)?;
    let pre = tape.add(wx, urh)?;
    let pre = tape.add(pre, bhn)?;
    let cand = tape.tanh(pre)?;

    // h = z * h_prev + (1 - z) * cand
    let zh = tape.mul(z, h_prev)?;
    let neg_z = tape.mul_scalar(z, -1.0)?;
    let one_minus_z = tape.add_scalar(neg_z, 1.0)?;
    let zc = tape.mul(one_minus_z, cand)?;
    tape.add(zh, zc)
}

/// Runs the GRU over a nonempty sequence and returns the final hidden state.
pub fn gru_encode_last(
    tape: &mut Tape,
    store: &ParamStore,
    p: &GruParams,
    inputs: &[NodeId],
    h0: NodeId,
) -> Result<NodeId, NumericsError> {
    if inputs.is_empty() {
        return Err(NumericsError::EmptySequence { op: "gru_encode" });
    }
    let mut h = h0;
    for &x in inputs {
        h = gru_cell(tape, store, p, x, h)?;
    }
    Ok(h)
}

/// Final hidden states of a bidirectional pass: forward over the sequence
/// and backward over its reversal.
pub fn bigru_final_states(
    tape: &mut Tape,
    store: &ParamStore,
    fwd: &GruParams,
    bwd: &GruParams,
    inputs: &[NodeId],
    h0_fwd: NodeId,
    h0_bwd: NodeId,
) -> Result<(NodeId, NodeId), NumericsError> {
    let hf = gru_encode_last(tape, store, fwd, inputs, h0_fwd)?;
    let rev: Vec<NodeId> = inputs.iter().rev().copied().collect();
    let hb = gru_encode_last(tape, store, bwd, &rev, h0_bwd)?;
    Ok((hf, hb))
}

/// Bidirectional encoding: mean of the two final hidden states, plus the
/// states themselves for callers that carry them across layers.
pub fn bigru_encode(
    tape: &mut Tape,
    store: &ParamStore,
    fwd: &GruParams,
    bwd: &GruParams,
    inputs: &[NodeId],
    h0_fwd: NodeId,
    h0_bwd: NodeId,
) -> Result<(NodeId, (NodeId, NodeId)), NumericsError> {
    let (hf, hb) = bigru_final_states(tape, store, fwd, bwd, inputs, h0_fwd, h0_bwd)?;
    let s = tape.add(hf, hb)?;
    let mean = tape.mul_scalar(s, 0.5)?;
    Ok((mean, (hf, hb)))
}
