//! Multi-head self-attention with a learned relative-offset term, followed
//! by one residual connection and a normalization layer.

use crate::config::ModelConfig;
use crate::error::Result;
use crate::nn::Mode;
use crate::params::{ParamId, ParamStore};
use crate::tensor::{NormStats, Tape, Tensor, Var};

use super::registry::{Init, Registry};

#[derive(Clone, Debug)]
pub struct HeadParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wr: ParamId,
    pub width: usize,
}

#[derive(Clone, Debug)]
pub struct NormParams {
    pub name: String,
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl NormParams {
    pub(crate) fn declare(reg: &mut dyn Registry, name: &str, width: usize) -> Result<Self> {
        Ok(NormParams {
            name: name.to_string(),
            gamma: reg.norm(&format!("{name}.gamma"), width, 1.0)?,
            beta: reg.norm(&format!("{name}.beta"), width, 0.0)?,
        })
    }
}

#[derive(Clone, Debug)]
pub struct FfnParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

#[derive(Clone, Debug)]
pub struct AttentionParams {
    pub heads: Vec<HeadParams>,
    /// Relative-offset table `m`, `(2·clip + 1) × max head width`, shared by
    /// all heads (each head reads its leading columns).
    pub rel: ParamId,
    pub clip: usize,
    pub wo: ParamId,
    /// Input projection for the skip connection when widths differ.
    pub wres: Option<ParamId>,
    pub norm1: NormParams,
    /// Second sublayer of the standard transformer block.
    pub ffn: Option<(FfnParams, NormParams)>,
    pub layer_norm: bool,
    pub residual: bool,
}

impl AttentionParams {
    pub(crate) fn declare(reg: &mut dyn Registry, cfg: &ModelConfig, d_model: usize) -> Result<Self> {
        let widths = cfg.head_widths();
        let max_w = *widths.iter().max().expect("at least one head");
        let mut heads = Vec::with_capacity(widths.len());
        for (a, &w) in widths.iter().enumerate() {
            heads.push(HeadParams {
                wq: reg.weight(&format!("attn.h{a}.wq"), d_model, w)?,
                wk: reg.weight(&format!("attn.h{a}.wk"), d_model, w)?,
                wv: reg.weight(&format!("attn.h{a}.wv"), d_model, w)?,
                wr: reg.weight(&format!("attn.h{a}.wr"), d_model, w)?,
                width: w,
            });
        }
        let rows = 2 * cfg.rel_clip + 1;
        let rel = reg.embedding("attn.rel", rows, max_w, Init::Uniform(1.0 / (max_w as f64).sqrt()))?;
        let wo = reg.weight("attn.wo", cfg.d_attn, cfg.d_attn)?;
        let wres = if d_model != cfg.d_attn && !cfg.residual_off {
            Some(reg.weight("attn.wres", d_model, cfg.d_attn)?)
        } else {
            None
        };
        let norm1 = NormParams::declare(reg, "attn.norm1", cfg.d_attn)?;
        let ffn = if cfg.ablations.no_residual_simplify {
            let f = FfnParams {
                w1: reg.weight("attn.ffn.w1", cfg.d_attn, cfg.d_ffn)?,
                b1: reg.bias("attn.ffn.b1", cfg.d_ffn, 0.0)?,
                w2: reg.weight("attn.ffn.w2", cfg.d_ffn, cfg.d_attn)?,
                b2: reg.bias("attn.ffn.b2", cfg.d_attn, 0.0)?,
            };
            Some((f, NormParams::declare(reg, "attn.norm2", cfg.d_attn)?))
        } else {
            None
        };
        Ok(AttentionParams {
            heads,
            rel,
            clip: cfg.rel_clip,
            wo,
            wres,
            norm1,
            ffn,
            layer_norm: cfg.ablations.layer_norm_instead,
            residual: !cfg.residual_off,
        })
    }

    pub fn norm_names(&self) -> Vec<String> {
        let mut out = vec![self.norm1.name.clone()];
        if let Some((_, n2)) = &self.ffn {
            out.push(n2.name.clone());
        }
        out
    }
}

/// Offsets `j − i` for `j = 1..=n` seen from query `i` (1-based), clipped
/// to `±clip`.
pub fn relative_offsets(n: usize, i: usize, clip: usize) -> Vec<i64> {
    let c = clip as i64;
    (1..=n).map(|j| (j as i64 - i as i64).clamp(-c, c)).collect()
}

/// Row-major `n × n` indices into the relative table: entry `(i, j)` is
/// the clipped offset of `j` from `i` shifted to start at zero.
pub fn relative_index(n: usize, clip: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(n * n);
    for i in 1..=n {
        out.extend(relative_offsets(n, i, clip).into_iter().map(|o| (o + clip as i64) as usize));
    }
    out
}

/// One head: `softmax((QKᵀ + RMᵀ) / √d_w) V`. Returns the `n × d_w`
/// output and the `n × n` attention matrix.
pub fn attention_head(
    tape: &mut Tape,
    store: &ParamStore,
    e: Var,
    head: &HeadParams,
    rel: ParamId,
    clip: usize,
) -> Result<(Var, Var)> {
    let n = tape.value(e).rows();
    let wq = tape.param(store, head.wq);
    let wk = tape.param(store, head.wk);
    let wv = tape.param(store, head.wv);
    let wr = tape.param(store, head.wr);
    let q = tape.matmul(e, wq)?;
    let k = tape.matmul(e, wk)?;
    let v = tape.matmul(e, wv)?;
    let r = tape.matmul(e, wr)?;
    let table = tape.param(store, rel);
    let m = if tape.value(table).cols() == head.width {
        table
    } else {
        tape.slice_cols(table, 0, head.width)?
    };
    let kt = tape.transpose(k)?;
    let content = tape.matmul(q, kt)?;
    let mt = tape.transpose(m)?;
    let r_all = tape.matmul(r, mt)?;
    let positional = tape.select_per_row(r_all, &relative_index(n, clip), n)?;
    let scores = tape.add(content, positional)?;
    let scaled = tape.scale(scores, 1.0 / (head.width as f64).sqrt())?;
    let probs = tape.softmax_rows(scaled)?;
    let out = tape.matmul(probs, v)?;
    Ok((out, probs))
}

/// Normalization over the rows of `x`. Batch statistics are used in
/// training mode when `x` has at least two rows, otherwise `running`.
pub fn normalize(
    tape: &mut Tape,
    store: &ParamStore,
    x: Var,
    p: &NormParams,
    layer_norm: bool,
    mode: Mode,
    running: &NormStats,
) -> Result<(Var, Option<NormStats>)> {
    let gamma = tape.param(store, p.gamma);
    let beta = tape.param(store, p.beta);
    if layer_norm {
        return Ok((tape.layer_norm(x, gamma, beta, NORM_EPS)?, None));
    }
    let use_batch = mode.is_train() && tape.value(x).rows() >= 2;
    tape.batch_norm(x, gamma, beta, NORM_EPS, if use_batch { None } else { Some(running) })
}

pub const NORM_EPS: f64 = 1e-5;

/// Fresh running statistics: zero mean, unit variance.
pub fn initial_stats(width: usize) -> NormStats {
    NormStats {
        mean: vec![0.0; width],
        var: vec![1.0; width],
    }
}

/// Output of [`self_attention_layer`] for a batch of sentences.
pub struct AttentionOutput {
    /// `n_b × d_attn` per sentence.
    pub states: Vec<Var>,
    /// Per sentence, per head `n_b × n_b` attention matrices.
    pub probs: Vec<Vec<Var>>,
    /// Batch statistics observed by each normalization, by name.
    pub observed: Vec<(String, NormStats)>,
}

/// Runs the layer over every sentence of a batch. Normalization statistics
/// are taken per feature over all token rows of the batch.
pub fn self_attention_layer(
    tape: &mut Tape,
    store: &ParamStore,
    inputs: &[Var],
    p: &AttentionParams,
    mode: Mode,
    running: &dyn Fn(&str) -> NormStats,
) -> Result<AttentionOutput> {
    let wo = tape.param(store, p.wo);
    let mut pre = Vec::with_capacity(inputs.len());
    let mut probs = Vec::with_capacity(inputs.len());
    for &e in inputs {
        let mut outs = Vec::with_capacity(p.heads.len());
        let mut ps = Vec::with_capacity(p.heads.len());
        for head in &p.heads {
            let (o, pr) = attention_head(tape, store, e, head, p.rel, p.clip)?;
            outs.push(o);
            ps.push(pr);
        }
        let cat = if outs.len() == 1 { outs[0] } else { tape.concat_cols(&outs)? };
        let mut z = tape.matmul(cat, wo)?;
        if p.residual {
            let skip = match p.wres {
                Some(w) => {
                    let w = tape.param(store, w);
                    tape.matmul(e, w)?
                }
                None => e,
            };
            z = tape.add(z, skip)?;
        }
        pre.push(z);
        probs.push(ps);
    }
    let mut observed = Vec::new();
    let mut states = batch_normalize(tape, store, &pre, &p.norm1, p.layer_norm, mode, running, &mut observed)?;
    if let Some((f, norm2)) = &p.ffn {
        let w1 = tape.param(store, f.w1);
        let b1 = tape.param(store, f.b1);
        let w2 = tape.param(store, f.w2);
        let b2 = tape.param(store, f.b2);
        let mut pre2 = Vec::with_capacity(states.len());
        for &y in &states {
            let h = tape.matmul(y, w1)?;
            let h = tape.add_row(h, b1)?;
            let h = tape.relu(h)?;
            let h = tape.matmul(h, w2)?;
            let h = tape.add_row(h, b2)?;
            pre2.push(if p.residual { tape.add(y, h)? } else { h });
        }
        states = batch_normalize(tape, store, &pre2, norm2, p.layer_norm, mode, running, &mut observed)?;
    }
    Ok(AttentionOutput {
        states,
        probs,
        observed,
    })
}

#[allow(clippy::too_many_arguments)]
fn batch_normalize(
    tape: &mut Tape,
    store: &ParamStore,
    parts: &[Var],
    p: &NormParams,
    layer_norm: bool,
    mode: Mode,
    running: &dyn Fn(&str) -> NormStats,
    observed: &mut Vec<(String, NormStats)>,
) -> Result<Vec<Var>> {
    let stats = running(&p.name);
    let joined = if parts.len() == 1 { parts[0] } else { tape.concat_rows(parts)? };
    let (y, obs) = normalize(tape, store, joined, p, layer_norm, mode, &stats)?;
    if let Some(o) = obs {
        observed.push((p.name.clone(), o));
    }
    if parts.len() == 1 {
        return Ok(vec![y]);
    }
    let mut out = Vec::with_capacity(parts.len());
    let mut start = 0;
    for &part in parts {
        let n = tape.value(part).rows();
        out.push(tape.slice_rows(y, start, n)?);
        start += n;
    }
    Ok(out)
}

/// Plain-text grid: one row per line, space-separated, shortest
/// round-trip formatting.
pub fn format_matrix(m: &Tensor) -> String {
    let mut s = String::new();
    for r in 0..m.rows() {
        let row: Vec<String> = m.row(r).iter().map(|v| format!("{v:?}")).collect();
        s.push_str(&row.join(" "));
        s.push('\n');
    }
    s
}

pub fn parse_matrix(text: &str) -> Result<Tensor> {
    let rows: Vec<Vec<f64>> = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.split_whitespace()
                .map(|v| {
                    v.parse::<f64>()
                        .map_err(|e| crate::Error::config(format!("bad matrix entry {v:?}: {e}")))
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    Tensor::from_rows(&rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamKind;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::matrix(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn head(store: &mut ParamStore, rng: &mut ChaCha8Rng, d_model: usize, w: usize) -> HeadParams {
        let mut p = |name: &str| store.insert(name, ParamKind::Weight, random(rng, d_model, w));
        HeadParams {
            wq: p("wq"),
            wk: p("wk"),
            wv: p("wv"),
            wr: p("wr"),
            width: w,
        }
    }

    #[test]
    fn offsets() {
        assert_eq!(relative_offsets(3, 2, 10), vec![-1, 0, 1]);
        assert_eq!(relative_offsets(1, 1, 10), vec![0]);
        assert_eq!(relative_offsets(10, 1, 4), vec![0, 1, 2, 3, 4, 4, 4, 4, 4, 4]);
        assert_eq!(relative_offsets(10, 10, 4)[0], -4);
    }

    #[test]
    fn offsets_shift_by_one_between_rows() {
        let big = 100;
        for n in 1..8 {
            for i in 1..n {
                let a = relative_offsets(n, i, big);
                let b = relative_offsets(n, i + 1, big);
                assert!(a.iter().zip(&b).all(|(x, y)| y == &(x - 1)));
            }
        }
    }

    /// Content-only attention built from the same tape ops.
    fn standard_attention(tape: &mut Tape, store: &ParamStore, e: Var, h: &HeadParams) -> Var {
        let wq = tape.param(store, h.wq);
        let wk = tape.param(store, h.wk);
        let wv = tape.param(store, h.wv);
        let q = tape.matmul(e, wq).unwrap();
        let k = tape.matmul(e, wk).unwrap();
        let v = tape.matmul(e, wv).unwrap();
        let kt = tape.transpose(k).unwrap();
        let s = tape.matmul(q, kt).unwrap();
        let s = tape.scale(s, 1.0 / (h.width as f64).sqrt()).unwrap();
        let p = tape.softmax_rows(s).unwrap();
        tape.matmul(p, v).unwrap()
    }

    #[test]
    fn zero_relative_table_is_standard_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let h = head(&mut store, &mut rng, 5, 3);
        let rel = store.insert("rel", ParamKind::Embedding, Tensor::zeros(&[9, 3]));
        let mut tape = Tape::new();
        let e = tape.constant(random(&mut rng, 6, 5));
        let (out, _) = attention_head(&mut tape, &store, e, &h, rel, 4).unwrap();
        let plain = standard_attention(&mut tape, &store, e, &h);
        assert_eq!(tape.value(out), tape.value(plain));
    }

    #[test]
    fn single_token_returns_its_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let h = head(&mut store, &mut rng, 4, 2);
        let rel = store.insert("rel", ParamKind::Embedding, random(&mut rng, 5, 2));
        let mut tape = Tape::new();
        let x = random(&mut rng, 1, 4);
        let v = x.matmul(store.value(h.wv)).unwrap();
        let e = tape.constant(x);
        let (out, probs) = attention_head(&mut tape, &store, e, &h, rel, 2).unwrap();
        assert_eq!(tape.value(probs).data(), &[1.0]);
        assert_eq!(tape.value(out), &v);
    }

    #[test]
    fn hand_evaluated_three_tokens() {
        // E = I₃ padded to d_model = 3, so Q, K, V, R are the weight rows.
        let mut store = ParamStore::new();
        let q = [[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]];
        let k = [[0.5, -1.0], [1.0, 0.0], [0.0, 2.0]];
        let v = [[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]];
        let r = [[0.0, 1.0], [1.0, 0.0], [-1.0, 1.0]];
        // m_{-1}, m_0, m_{+1}
        let m = [[1.0, 0.0], [0.0, 0.0], [0.0, -1.0]];
        let t = |a: &[[f64; 2]; 3]| Tensor::from_rows(a).unwrap();
        let h = HeadParams {
            wq: store.insert("wq", ParamKind::Weight, t(&q)),
            wk: store.insert("wk", ParamKind::Weight, t(&k)),
            wv: store.insert("wv", ParamKind::Weight, t(&v)),
            wr: store.insert("wr", ParamKind::Weight, t(&r)),
            width: 2,
        };
        let rel = store.insert("rel", ParamKind::Embedding, t(&m));
        let mut tape = Tape::new();
        let e = tape.constant(Tensor::identity(3));
        let (out, _) = attention_head(&mut tape, &store, e, &h, rel, 1).unwrap();

        let dot = |a: &[f64; 2], b: &[f64; 2]| a[0] * b[0] + a[1] * b[1];
        for i in 0..3 {
            let mut s = [0.0; 3];
            for j in 0..3 {
                let off = (j as i64 - i as i64).clamp(-1, 1);
                s[j] = (dot(&q[i], &k[j]) + dot(&r[i], &m[(off + 1) as usize])) / 2f64.sqrt();
            }
            let z: f64 = s.iter().map(|x| x.exp()).sum();
            for c in 0..2 {
                let want: f64 = (0..3).map(|j| s[j].exp() / z * v[j][c]).sum();
                assert_abs_diff_eq!(tape.value(out).get(i, c), want, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let h = head(&mut store, &mut rng, 4, 3);
        let rel = store.insert("rel", ParamKind::Embedding, random(&mut rng, 7, 3));
        let mut tape = Tape::new();
        let e = tape.constant(random(&mut rng, 9, 4).map(|x| 5.0 * x));
        let (_, probs) = attention_head(&mut tape, &store, e, &h, rel, 3).unwrap();
        for r in 0..9 {
            assert_abs_diff_eq!(tape.value(probs).row(r).iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        }
    }

    fn layer_config(d_attn: usize) -> ModelConfig {
        ModelConfig {
            d_attn,
            heads: 2,
            d_ffn: 4,
            rel_clip: 2,
            ..ModelConfig::default()
        }
    }

    fn zeroed_layer(cfg: &ModelConfig, d_model: usize) -> (ParamStore, AttentionParams) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = AttentionParams::declare(
            &mut super::super::registry::Creator {
                store: &mut store,
                rng: &mut rng,
            },
            cfg,
            d_model,
        )
        .unwrap();
        for h in &p.heads {
            for id in [h.wq, h.wk, h.wv, h.wr] {
                store.value_mut(id).scale_in_place(0.0);
            }
        }
        store.value_mut(p.wo).scale_in_place(0.0);
        (store, p)
    }

    fn column_standardize(x: &Tensor) -> Tensor {
        let (n, d) = (x.rows(), x.cols());
        let mut out = x.clone();
        for c in 0..d {
            let mean = (0..n).map(|r| x.get(r, c)).sum::<f64>() / n as f64;
            let var = (0..n).map(|r| (x.get(r, c) - mean).powi(2)).sum::<f64>() / n as f64;
            for r in 0..n {
                out.set(r, c, (x.get(r, c) - mean) / (var + NORM_EPS).sqrt());
            }
        }
        out
    }

    #[test]
    fn zero_block_is_normalized_projected_input() {
        let cfg = layer_config(4);
        let (store, p) = zeroed_layer(&cfg, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&mut rng, 5, 6);
        let projected = x.matmul(store.value(p.wres.unwrap())).unwrap();
        let mut tape = Tape::new();
        let e = tape.constant(x);
        let out = self_attention_layer(&mut tape, &store, &[e], &p, Mode::Train, &|_| initial_stats(4)).unwrap();
        let want = column_standardize(&projected);
        for (a, b) in tape.value(out.states[0]).data().iter().zip(want.data()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
        assert_eq!(out.observed.len(), 1);
    }

    #[test]
    fn without_skip_output_is_normalized_heads() {
        let mut cfg = layer_config(4);
        cfg.residual_off = true;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let p = AttentionParams::declare(
            &mut super::super::registry::Creator {
                store: &mut store,
                rng: &mut rng,
            },
            &cfg,
            4,
        )
        .unwrap();
        assert!(p.wres.is_none());
        let x = random(&mut rng, 5, 4);
        let mut tape = Tape::new();
        let e = tape.constant(x);
        let mut heads = Vec::new();
        for h in &p.heads {
            heads.push(attention_head(&mut tape, &store, e, h, p.rel, p.clip).unwrap().0);
        }
        let cat = tape.concat_cols(&heads).unwrap();
        let projected = tape.value(cat).matmul(store.value(p.wo)).unwrap();
        let out = self_attention_layer(&mut tape, &store, &[e], &p, Mode::Train, &|_| initial_stats(4)).unwrap();
        let want = column_standardize(&projected);
        for (a, b) in tape.value(out.states[0]).data().iter().zip(want.data()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn eval_mode_with_neutral_stats_is_identity_on_zero_block() {
        let cfg = layer_config(3);
        let (store, p) = zeroed_layer(&cfg, 3);
        assert!(p.wres.is_none());
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random(&mut rng, 4, 3);
        let mut tape = Tape::new();
        let e = tape.constant(x.clone());
        let neutral = NormStats {
            mean: vec![0.0; 3],
            var: vec![1.0 - NORM_EPS; 3],
        };
        let out = self_attention_layer(&mut tape, &store, &[e], &p, Mode::Eval, &|_| neutral.clone()).unwrap();
        for (a, b) in tape.value(out.states[0]).data().iter().zip(x.data()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-15);
        }
        assert!(out.observed.is_empty());
    }

    #[test]
    fn batch_statistics_span_all_sentences() {
        let cfg = layer_config(4);
        let (store, p) = zeroed_layer(&cfg, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = random(&mut rng, 2, 4);
        let b = random(&mut rng, 3, 4);
        let mut tape = Tape::new();
        let ea = tape.constant(a.clone());
        let eb = tape.constant(b.clone());
        let out = self_attention_layer(&mut tape, &store, &[ea, eb], &p, Mode::Train, &|_| initial_stats(4)).unwrap();
        let joined = Tensor::from_rows(&(0..2).map(|r| a.row(r).to_vec()).chain((0..3).map(|r| b.row(r).to_vec())).collect::<Vec<_>>()).unwrap();
        let want = column_standardize(&joined);
        assert_eq!(tape.value(out.states[0]).rows(), 2);
        assert_abs_diff_eq!(tape.value(out.states[1]).get(2, 3), want.get(4, 3), epsilon = 1e-12);
    }

    #[test]
    fn two_sublayer_block_declares_second_norm() {
        let mut cfg = layer_config(4);
        cfg.ablations.no_residual_simplify = true;
        let (_, p) = zeroed_layer(&cfg, 4);
        assert_eq!(p.norm_names(), vec!["attn.norm1".to_string(), "attn.norm2".to_string()]);
    }

    #[test]
    fn matrix_text_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let m = random(&mut rng, 3, 4).map(|x| x / 3.0);
        assert_eq!(parse_matrix(&format_matrix(&m)).unwrap(), m);
    }
}
