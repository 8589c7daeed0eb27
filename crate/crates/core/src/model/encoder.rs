//! BiLSTM over the input embeddings and a stack of graph convolutions over
//! the normalized pruned adjacency.

use crate::error::Result;
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Tape, Var};

use super::registry::Registry;

/// One LSTM direction. Gate columns are ordered input, forget, candidate,
/// output.
#[derive(Clone, Debug)]
pub struct LstmParams {
    pub wx: ParamId,
    pub wh: ParamId,
    pub b: ParamId,
    pub d_h: usize,
}

impl LstmParams {
    pub(crate) fn declare(reg: &mut dyn Registry, name: &str, d_in: usize, d_h: usize) -> Result<Self> {
        let wx = reg.weight(&format!("{name}.wx"), d_in, 4 * d_h)?;
        let wh = reg.weight(&format!("{name}.wh"), d_h, 4 * d_h)?;
        let b = reg.bias(&format!("{name}.b"), 4 * d_h, 0.0)?;
        Ok(LstmParams { wx, wh, b, d_h })
    }
}

/// Sets the forget-gate slice of an LSTM bias to `value`.
pub fn set_forget_bias(store: &mut ParamStore, p: &LstmParams, value: f64) {
    let b = store.value_mut(p.b);
    for v in &mut b.data_mut()[p.d_h..2 * p.d_h] {
        *v = value;
    }
}

/// Runs one direction over `x` (`n × d_in`) from zero initial states and
/// returns the hidden states in token order.
pub fn lstm_direction(tape: &mut Tape, store: &ParamStore, x: Var, p: &LstmParams, reverse: bool) -> Result<Var> {
    let n = tape.value(x).rows();
    let d = p.d_h;
    let wx = tape.param(store, p.wx);
    let wh = tape.param(store, p.wh);
    let b = tape.param(store, p.b);
    let xw = tape.matmul(x, wx)?;
    let xw = tape.add_row(xw, b)?;
    let order: Vec<usize> = if reverse { (0..n).rev().collect() } else { (0..n).collect() };
    let mut hs: Vec<Option<Var>> = vec![None; n];
    let mut state: Option<(Var, Var)> = None;
    for &t in &order {
        let mut z = tape.slice_rows(xw, t, 1)?;
        if let Some((h, _)) = state {
            let r = tape.matmul(h, wh)?;
            z = tape.add(z, r)?;
        }
        let sg = tape.sigmoid(z)?;
        let i = tape.slice_cols(sg, 0, d)?;
        let f = tape.slice_cols(sg, d, d)?;
        let o = tape.slice_cols(sg, 3 * d, d)?;
        let zg = tape.slice_cols(z, 2 * d, d)?;
        let g = tape.tanh(zg)?;
        let mut c = tape.mul(i, g)?;
        if let Some((_, c_prev)) = state {
            let keep = tape.mul(f, c_prev)?;
            c = tape.add(c, keep)?;
        }
        let tc = tape.tanh(c)?;
        let h = tape.mul(o, tc)?;
        hs[t] = Some(h);
        state = Some((h, c));
    }
    let rows: Vec<Var> = hs.into_iter().map(|h| h.expect("every step visited")).collect();
    if rows.len() == 1 {
        Ok(rows[0])
    } else {
        tape.concat_rows(&rows)
    }
}

/// `[forward; backward]` hidden states, `n × 2·d_h`.
pub fn bilstm(tape: &mut Tape, store: &ParamStore, x: Var, fwd: &LstmParams, bwd: &LstmParams) -> Result<Var> {
    let f = lstm_direction(tape, store, x, fwd, false)?;
    let b = lstm_direction(tape, store, x, bwd, true)?;
    tape.concat_cols(&[f, b])
}

#[derive(Clone, Debug)]
pub struct GcnLayer {
    pub w: ParamId,
    pub b: ParamId,
}

/// `relu(Â (g W) + b)` where `norm_adj` is `Ã` with rows divided by degree.
pub fn gcn_layer(tape: &mut Tape, store: &ParamStore, g: Var, norm_adj: Var, layer: &GcnLayer) -> Result<Var> {
    let w = tape.param(store, layer.w);
    let b = tape.param(store, layer.b);
    let gw = tape.matmul(g, w)?;
    let agg = tape.matmul(norm_adj, gw)?;
    let z = tape.add_row(agg, b)?;
    tape.relu(z)
}
