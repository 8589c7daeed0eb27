//! Pooling, entity-aware attention and the classifier.

use crate::data::Span;
use crate::error::Result;
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Tape, Var};

/// Max pool over the rows kept by pruning.
pub fn pool_sentence(tape: &mut Tape, g: Var, keep: &[bool]) -> Result<Var> {
    tape.max_pool_rows(g, Some(keep))
}

/// Max pool over the rows of a 1-based entity span.
pub fn pool_entity(tape: &mut Tape, g: Var, span: Span) -> Result<Var> {
    let rows = tape.slice_rows(g, span.start - 1, span.len())?;
    tape.max_pool_rows(rows, None)
}

#[derive(Clone, Debug)]
pub struct EntityAttentionParams {
    /// Absent when the self-attention term is ablated.
    pub ws: Option<ParamId>,
    pub wg: ParamId,
    pub wp: ParamId,
    /// Scoring vector, `d_u × 1`.
    pub v: ParamId,
}

/// `α = softmax_i(vᵀ tanh(W_s s_i + W_g g_sent + W_p p_i))` as a `1 × n`
/// row. `mask` limits the support of the softmax.
pub fn entity_attention(
    tape: &mut Tape,
    store: &ParamStore,
    s: Option<Var>,
    g_sent: Var,
    pos: Var,
    p: &EntityAttentionParams,
    mask: Option<&[bool]>,
) -> Result<Var> {
    let n = tape.value(pos).rows();
    let wp = tape.param(store, p.wp);
    let mut z = tape.matmul(pos, wp)?;
    if let (Some(s), Some(ws)) = (s, p.ws) {
        let ws = tape.param(store, ws);
        let t = tape.matmul(s, ws)?;
        z = tape.add(z, t)?;
    }
    let wg = tape.param(store, p.wg);
    let gs = tape.matmul(g_sent, wg)?;
    z = tape.add_row(z, gs)?;
    let u = tape.tanh(z)?;
    let v = tape.param(store, p.v);
    let scores = tape.matmul(u, v)?;
    let row = tape.transpose(scores)?;
    debug_assert_eq!(tape.value(row).cols(), n);
    tape.softmax_rows_masked(row, mask)
}

/// `Σ_i α_i g_i` for a `1 × n` weight row.
pub fn attend(tape: &mut Tape, alpha: Var, g: Var) -> Result<Var> {
    tape.matmul(alpha, g)
}

#[derive(Clone, Debug)]
pub struct ClassifierParams {
    /// Hidden relu layer over `[ĝ; g_s; g_o]`; absent when ablated.
    pub ffn: Option<(ParamId, ParamId)>,
    pub w: ParamId,
    pub b: ParamId,
}
