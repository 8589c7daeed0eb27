use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::params::{Gradients, ParamId, ParamStore};

use super::kernels::{matmul_nt, matmul_tn};
use super::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Per-feature statistics observed by a normalization op in training mode.
#[derive(Clone, Debug, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    GatherParam { param: ParamId, rows: Vec<usize> },
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Tensor),
    ExpandRows(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    SelectPerRow(Var, Vec<usize>),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    SoftmaxRows(Var),
    MaxPoolRows(Var, Vec<usize>),
    Sum(Var),
    SumSquares(Var),
    NegLogPick { probs: Var, gold: Vec<usize>, clamped: Vec<bool> },
    BatchNorm(NormSaved),
    LayerNorm(NormSaved),
}

#[derive(Debug)]
struct NormSaved {
    x: Var,
    gamma: Var,
    beta: Var,
    xhat: Tensor,
    inv_std: Vec<f64>,
    batch_stats: bool,
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Probability floor used by [`Tape::neg_log_pick`].
pub const PROB_FLOOR: f64 = 1e-12;

/// Records differentiable operations in execution order and replays them
/// backwards to accumulate gradients.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    param_vars: HashMap<ParamId, Var>,
    clamp_events: usize,
}

fn dim_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Dimension {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Accumulated gradient of `v`, present after a backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// How many probabilities were clamped at [`PROB_FLOOR`] so far.
    pub fn clamp_events(&self) -> usize {
        self.clamp_events
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A value that does not take gradients.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A leaf input that does take gradients.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// The parameter `id` as a leaf; repeated calls return the same var.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Param(id), true);
        self.param_vars.insert(id, v);
        v
    }

    /// Rows of an embedding parameter, without copying the whole table.
    pub fn gather_param(&mut self, store: &ParamStore, id: ParamId, rows: &[usize]) -> Result<Var> {
        let table = store.value(id);
        let d = table.cols();
        let mut data = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            if r >= table.rows() {
                return Err(Error::Instance(format!(
                    "embedding row {r} outside table {} of {} rows",
                    store.get(id).name,
                    table.rows()
                )));
            }
            data.extend_from_slice(table.row(r));
        }
        let value = Tensor::matrix(rows.len(), d, data)?;
        Ok(self.push(
            value,
            Op::GatherParam {
                param: id,
                rows: rows.to_vec(),
            },
            true,
        ))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).transpose();
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Transpose(a), rg))
    }

    fn zip_with(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !ta.same_shape(tb) {
            return Err(dim_err(name, ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_with(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_with(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_with(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let value = self.value(a).map(|x| x * s);
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Scale(a, s), rg))
    }

    /// Elementwise product with a fixed tensor (dropout masks).
    pub fn mul_const(&mut self, a: Var, c: Tensor) -> Result<Var> {
        let ta = self.value(a);
        if !ta.same_shape(&c) {
            return Err(dim_err("mul_const", ta, &c));
        }
        let data = ta.data().iter().zip(c.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::MulConst(a, c), rg))
    }

    /// Repeats a `1 × d` row `n` times.
    pub fn expand_rows(&mut self, a: Var, n: usize) -> Result<Var> {
        let ta = self.value(a);
        if ta.rows() != 1 || n == 0 {
            return Err(Error::Dimension {
                op: "expand_rows",
                left: ta.shape().to_vec(),
                right: vec![n],
            });
        }
        let d = ta.cols();
        let mut data = Vec::with_capacity(n * d);
        for _ in 0..n {
            data.extend_from_slice(ta.data());
        }
        let value = Tensor::matrix(n, d, data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::ExpandRows(a), rg))
    }

    /// `a + expand_rows(row, a.rows)`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let n = self.value(a).rows();
        let e = self.expand_rows(row, n)?;
        self.add(a, e)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.value(*parts.first().ok_or_else(|| Error::config("concat of nothing"))?);
        let n = first.rows();
        for p in parts {
            if self.value(*p).rows() != n {
                return Err(dim_err("concat_cols", first, self.value(*p)));
            }
        }
        let total: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut data = Vec::with_capacity(n * total);
        for r in 0..n {
            for p in parts {
                data.extend_from_slice(self.value(*p).row(r));
            }
        }
        let value = Tensor::matrix(n, total, data)?;
        let rg = self.rg(parts);
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.value(*parts.first().ok_or_else(|| Error::config("concat of nothing"))?);
        let d = first.cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let t = self.value(*p);
            if t.cols() != d {
                return Err(dim_err("concat_rows", first, t));
            }
            data.extend_from_slice(t.data());
            rows += t.rows();
        }
        let value = Tensor::matrix(rows, d, data)?;
        let rg = self.rg(parts);
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let ta = self.value(a);
        if len == 0 || start + len > ta.rows() {
            return Err(Error::Dimension {
                op: "slice_rows",
                left: ta.shape().to_vec(),
                right: vec![start, len],
            });
        }
        let d = ta.cols();
        let value = Tensor::matrix(len, d, ta.data()[start * d..(start + len) * d].to_vec())?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::SliceRows(a, start), rg))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let ta = self.value(a);
        if len == 0 || start + len > ta.cols() {
            return Err(Error::Dimension {
                op: "slice_cols",
                left: ta.shape().to_vec(),
                right: vec![start, len],
            });
        }
        let mut data = Vec::with_capacity(ta.rows() * len);
        for r in 0..ta.rows() {
            data.extend_from_slice(&ta.row(r)[start..start + len]);
        }
        let value = Tensor::matrix(ta.rows(), len, data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::SliceCols(a, start), rg))
    }

    /// Stacks `a[idx[0]], a[idx[1]], …`.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let ta = self.value(a);
        let d = ta.cols();
        let mut data = Vec::with_capacity(idx.len() * d);
        for &r in idx {
            if r >= ta.rows() {
                return Err(Error::Dimension {
                    op: "gather_rows",
                    left: ta.shape().to_vec(),
                    right: vec![r],
                });
            }
            data.extend_from_slice(ta.row(r));
        }
        let value = Tensor::matrix(idx.len(), d, data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::GatherRows(a, idx.to_vec()), rg))
    }

    /// `out[i][j] = a[i][idx[i·w + j]]` for an output of width `w`.
    pub fn select_per_row(&mut self, a: Var, idx: &[usize], width: usize) -> Result<Var> {
        let ta = self.value(a);
        let n = ta.rows();
        if width == 0 || idx.len() != n * width || idx.iter().any(|&c| c >= ta.cols()) {
            return Err(Error::Dimension {
                op: "select_per_row",
                left: ta.shape().to_vec(),
                right: vec![n, width],
            });
        }
        let data = idx
            .iter()
            .enumerate()
            .map(|(k, &c)| ta.get(k / width, c))
            .collect();
        let value = Tensor::matrix(n, width, data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::SelectPerRow(a, idx.to_vec()), rg))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(|x| x.max(0.0));
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Relu(a), rg))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(f64::tanh);
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Tanh(a), rg))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(sigmoid);
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Sigmoid(a), rg))
    }

    /// Row-wise softmax, computed with the row maximum subtracted.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        self.softmax_rows_masked(a, None)
    }

    /// Row-wise softmax where columns with `keep[c] == false` get probability
    /// exactly zero. At least one column must be kept.
    pub fn softmax_rows_masked(&mut self, a: Var, keep: Option<&[bool]>) -> Result<Var> {
        let ta = self.value(a);
        let (n, d) = (ta.rows(), ta.cols());
        if let Some(k) = keep {
            if k.len() != d || !k.iter().any(|&x| x) {
                return Err(Error::EmptyPool);
            }
        }
        let kept = |c: usize| keep.map_or(true, |k| k[c]);
        let mut out = vec![0.0; n * d];
        for r in 0..n {
            let row = ta.row(r);
            let max = (0..d)
                .filter(|&c| kept(c))
                .map(|c| row[c])
                .fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for c in 0..d {
                if kept(c) {
                    let e = (row[c] - max).exp();
                    out[r * d + c] = e;
                    z += e;
                }
            }
            for v in &mut out[r * d..(r + 1) * d] {
                *v /= z;
            }
        }
        let value = Tensor::matrix(n, d, out)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::SoftmaxRows(a), rg))
    }

    /// Column-wise maximum over the rows selected by `keep` (all rows when
    /// `None`), giving a `1 × d` row. Ties resolve to the first row.
    pub fn max_pool_rows(&mut self, a: Var, keep: Option<&[bool]>) -> Result<Var> {
        let ta = self.value(a);
        let (n, d) = (ta.rows(), ta.cols());
        if let Some(k) = keep {
            if k.len() != n {
                return Err(Error::Dimension {
                    op: "max_pool_rows",
                    left: ta.shape().to_vec(),
                    right: vec![k.len()],
                });
            }
        }
        let rows: Vec<usize> = (0..n).filter(|&r| keep.map_or(true, |k| k[r])).collect();
        if rows.is_empty() {
            return Err(Error::EmptyPool);
        }
        let mut argmax = vec![rows[0]; d];
        let mut best = ta.row(rows[0]).to_vec();
        for &r in &rows[1..] {
            for (c, &x) in ta.row(r).iter().enumerate() {
                if x > best[c] {
                    best[c] = x;
                    argmax[c] = r;
                }
            }
        }
        let value = Tensor::row_vector(best);
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::MaxPoolRows(a, argmax), rg))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Sum(a), rg))
    }

    pub fn sum_squares(&mut self, a: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(a).sum_squares());
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::SumSquares(a), rg))
    }

    /// `Σ_r −ln max(probs[r][gold[r]], PROB_FLOOR)` as a scalar.
    pub fn neg_log_pick(&mut self, probs: Var, gold: &[usize]) -> Result<Var> {
        let tp = self.value(probs);
        if gold.len() != tp.rows() || gold.iter().any(|&g| g >= tp.cols()) {
            return Err(Error::Dimension {
                op: "neg_log_pick",
                left: tp.shape().to_vec(),
                right: vec![gold.len()],
            });
        }
        let mut total = 0.0;
        let mut clamped = Vec::with_capacity(gold.len());
        for (r, &g) in gold.iter().enumerate() {
            let p = tp.get(r, g);
            let c = p < PROB_FLOOR;
            clamped.push(c);
            total -= if p.is_nan() { p } else { p.max(PROB_FLOOR).ln() };
        }
        let events = clamped.iter().filter(|&&c| c).count();
        if events > 0 {
            log::warn!("{events} gold probabilities clamped at {PROB_FLOOR}");
        }
        self.clamp_events += events;
        let rg = self.rg(&[probs]);
        Ok(self.push(
            Tensor::scalar(total),
            Op::NegLogPick {
                probs,
                gold: gold.to_vec(),
                clamped,
            },
            rg,
        ))
    }

    /// Per-feature normalization over rows. With `running = None` the batch
    /// statistics are used (and returned); otherwise the given mean/variance.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
        running: Option<&NormStats>,
    ) -> Result<(Var, Option<NormStats>)> {
        let tx = self.value(x);
        let (n, d) = (tx.rows(), tx.cols());
        self.check_affine("batch_norm", x, gamma, beta)?;
        let (mean, var, observed) = match running {
            Some(s) => (s.mean.clone(), s.var.clone(), None),
            None => {
                if n < 2 {
                    return Err(Error::config(
                        "batch normalization in training mode needs at least 2 rows",
                    ));
                }
                let mut mean = vec![0.0; d];
                for r in 0..n {
                    for (m, &v) in mean.iter_mut().zip(tx.row(r)) {
                        *m += v;
                    }
                }
                mean.iter_mut().for_each(|m| *m /= n as f64);
                let mut var = vec![0.0; d];
                for r in 0..n {
                    for ((s, &v), &m) in var.iter_mut().zip(tx.row(r)).zip(&mean) {
                        *s += (v - m) * (v - m);
                    }
                }
                var.iter_mut().for_each(|s| *s /= n as f64);
                let stats = NormStats {
                    mean: mean.clone(),
                    var: var.clone(),
                };
                (mean, var, Some(stats))
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = tx.clone();
        for r in 0..n {
            for (c, v) in xhat.row_mut(r).iter_mut().enumerate() {
                *v = (*v - mean[c]) * inv_std[c];
            }
        }
        let value = self.affine(&xhat, gamma, beta);
        let rg = self.rg(&[x, gamma, beta]);
        let var_out = self.push(
            value,
            Op::BatchNorm(NormSaved {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats: observed.is_some(),
            }),
            rg,
        );
        Ok((var_out, observed))
    }

    /// Per-row normalization over features.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        self.check_affine("layer_norm", x, gamma, beta)?;
        let tx = self.value(x);
        let (n, d) = (tx.rows(), tx.cols());
        let mut xhat = tx.clone();
        let mut inv_std = Vec::with_capacity(n);
        for r in 0..n {
            let row = xhat.row_mut(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mean) * is);
            inv_std.push(is);
        }
        let value = self.affine(&xhat, gamma, beta);
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            value,
            Op::LayerNorm(NormSaved {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats: true,
            }),
            rg,
        ))
    }

    fn check_affine(&self, op: &'static str, x: Var, gamma: Var, beta: Var) -> Result<()> {
        let d = self.value(x).cols();
        for p in [gamma, beta] {
            let t = self.value(p);
            if t.rows() != 1 || t.cols() != d {
                return Err(dim_err(op, self.value(x), t));
            }
        }
        Ok(())
    }

    fn affine(&self, xhat: &Tensor, gamma: Var, beta: Var) -> Tensor {
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = xhat.clone();
        for r in 0..out.rows() {
            for (c, v) in out.row_mut(r).iter_mut().enumerate() {
                *v = g[c] * *v + b[c];
            }
        }
        out
    }

    /// Runs the backward pass from scalar `loss`, adding this pass's
    /// gradients onto whatever earlier passes accumulated.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let tl = self.value(loss);
        if tl.len() != 1 {
            return Err(Error::Dimension {
                op: "backward",
                left: tl.shape().to_vec(),
                right: vec![1, 1],
            });
        }
        if !tl.all_finite() {
            return Err(Error::Numerical("non-finite loss".into()));
        }
        let mut adj: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        adj[loss.0] = Some(Tensor::filled(tl.shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            propagate(&self.nodes, i, &g, &mut adj);
            match &mut self.grads[i] {
                Some(acc) => acc.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }
        Ok(())
    }

    /// Clears accumulated gradients on every node.
    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    /// Adds parameter gradients accumulated on this tape into `out`.
    pub fn export_param_grads(&self, store: &ParamStore, out: &mut Gradients) {
        for (node, grad) in self.nodes.iter().zip(&self.grads) {
            let Some(g) = grad else { continue };
            match &node.op {
                Op::Param(id) => out.slot_mut(*id, g.shape()).add_assign(g),
                Op::GatherParam { param, rows } => {
                    let slot = out.slot_mut(*param, store.value(*param).shape());
                    for (k, &r) in rows.iter().enumerate() {
                        for (s, v) in slot.row_mut(r).iter_mut().zip(g.row(k)) {
                            *s += v;
                        }
                    }
                }
                _ => {}
            }
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn accum(nodes: &[Node], adj: &mut [Option<Tensor>], v: Var, g: Tensor) {
    if !nodes[v.0].requires_grad {
        return;
    }
    match &mut adj[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn with_shape(like: &Tensor, data: Vec<f64>) -> Tensor {
    Tensor::new(like.shape().to_vec(), data).expect("gradient shape")
}

fn propagate(nodes: &[Node], i: usize, g: &Tensor, adj: &mut [Option<Tensor>]) {
    let node = &nodes[i];
    let y = &node.value;
    let val = |v: Var| &nodes[v.0].value;
    let rg = |v: Var| nodes[v.0].requires_grad;
    match &node.op {
        Op::Leaf | Op::Param(_) | Op::GatherParam { .. } => {}
        Op::MatMul(a, b) => {
            let (ta, tb) = (val(*a), val(*b));
            let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
            if rg(*a) {
                let ga = matmul_nt(g.data(), tb.data(), m, n, k);
                accum(nodes, adj, *a, with_shape(ta, ga));
            }
            if rg(*b) {
                let gb = matmul_tn(ta.data(), g.data(), m, k, n);
                accum(nodes, adj, *b, with_shape(tb, gb));
            }
        }
        Op::Transpose(a) => accum(nodes, adj, *a, g.transpose()),
        Op::Add(a, b) => {
            accum(nodes, adj, *a, g.clone());
            accum(nodes, adj, *b, g.clone());
        }
        Op::Sub(a, b) => {
            accum(nodes, adj, *a, g.clone());
            accum(nodes, adj, *b, g.map(|x| -x));
        }
        Op::Mul(a, b) => {
            let (ta, tb) = (val(*a), val(*b));
            if rg(*a) {
                let d = g.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
                accum(nodes, adj, *a, with_shape(ta, d));
            }
            if rg(*b) {
                let d = g.data().iter().zip(ta.data()).map(|(x, y)| x * y).collect();
                accum(nodes, adj, *b, with_shape(tb, d));
            }
        }
        Op::Scale(a, s) => accum(nodes, adj, *a, g.map(|x| x * s)),
        Op::MulConst(a, c) => {
            let d = g.data().iter().zip(c.data()).map(|(x, y)| x * y).collect();
            accum(nodes, adj, *a, with_shape(val(*a), d));
        }
        Op::ExpandRows(a) => {
            let d = g.cols();
            let mut out = vec![0.0; d];
            for r in 0..g.rows() {
                for (o, v) in out.iter_mut().zip(g.row(r)) {
                    *o += v;
                }
            }
            accum(nodes, adj, *a, with_shape(val(*a), out));
        }
        Op::ConcatCols(parts) => {
            let mut offset = 0;
            for p in parts {
                let tp = val(*p);
                let w = tp.cols();
                if rg(*p) {
                    let mut d = Vec::with_capacity(tp.len());
                    for r in 0..g.rows() {
                        d.extend_from_slice(&g.row(r)[offset..offset + w]);
                    }
                    accum(nodes, adj, *p, with_shape(tp, d));
                }
                offset += w;
            }
        }
        Op::ConcatRows(parts) => {
            let d = g.cols();
            let mut offset = 0;
            for p in parts {
                let tp = val(*p);
                let len = tp.rows() * d;
                if rg(*p) {
                    let slice = g.data()[offset..offset + len].to_vec();
                    accum(nodes, adj, *p, with_shape(tp, slice));
                }
                offset += len;
            }
        }
        Op::SliceRows(a, start) => {
            let ta = val(*a);
            let d = ta.cols();
            let mut out = vec![0.0; ta.len()];
            out[start * d..start * d + g.len()].copy_from_slice(g.data());
            accum(nodes, adj, *a, with_shape(ta, out));
        }
        Op::SliceCols(a, start) => {
            let ta = val(*a);
            let mut out = Tensor::zeros(ta.shape());
            let w = g.cols();
            for r in 0..g.rows() {
                out.row_mut(r)[*start..start + w].copy_from_slice(g.row(r));
            }
            accum(nodes, adj, *a, out);
        }
        Op::GatherRows(a, idx) => {
            let mut out = Tensor::zeros(val(*a).shape());
            for (k, &r) in idx.iter().enumerate() {
                for (o, v) in out.row_mut(r).iter_mut().zip(g.row(k)) {
                    *o += v;
                }
            }
            accum(nodes, adj, *a, out);
        }
        Op::SelectPerRow(a, idx) => {
            let mut out = Tensor::zeros(val(*a).shape());
            let w = g.cols();
            for (k, &c) in idx.iter().enumerate() {
                let r = k / w;
                let cur = out.get(r, c);
                out.set(r, c, cur + g.data()[k]);
            }
            accum(nodes, adj, *a, out);
        }
        Op::Relu(a) => {
            let d = g
                .data()
                .iter()
                .zip(val(*a).data())
                .map(|(gv, &x)| if x > 0.0 { *gv } else { 0.0 })
                .collect();
            accum(nodes, adj, *a, with_shape(y, d));
        }
        Op::Tanh(a) => {
            let d = g
                .data()
                .iter()
                .zip(y.data())
                .map(|(gv, t)| gv * (1.0 - t * t))
                .collect();
            accum(nodes, adj, *a, with_shape(y, d));
        }
        Op::Sigmoid(a) => {
            let d = g
                .data()
                .iter()
                .zip(y.data())
                .map(|(gv, s)| gv * s * (1.0 - s))
                .collect();
            accum(nodes, adj, *a, with_shape(y, d));
        }
        Op::SoftmaxRows(a) => {
            let mut out = Tensor::zeros(y.shape());
            for r in 0..y.rows() {
                let (yr, gr) = (y.row(r), g.row(r));
                let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                for (o, (p, q)) in out.row_mut(r).iter_mut().zip(yr.iter().zip(gr)) {
                    *o = p * (q - dot);
                }
            }
            accum(nodes, adj, *a, out);
        }
        Op::MaxPoolRows(a, argmax) => {
            let mut out = Tensor::zeros(val(*a).shape());
            for (c, &r) in argmax.iter().enumerate() {
                let cur = out.get(r, c);
                out.set(r, c, cur + g.data()[c]);
            }
            accum(nodes, adj, *a, out);
        }
        Op::Sum(a) => {
            let s = g.data()[0];
            accum(nodes, adj, *a, Tensor::filled(val(*a).shape(), s));
        }
        Op::SumSquares(a) => {
            let s = g.data()[0];
            accum(nodes, adj, *a, val(*a).map(|x| 2.0 * s * x));
        }
        Op::NegLogPick {
            probs,
            gold,
            clamped,
        } => {
            let tp = val(*probs);
            let s = g.data()[0];
            let mut out = Tensor::zeros(tp.shape());
            for (r, (&k, &c)) in gold.iter().zip(clamped).enumerate() {
                if !c {
                    out.set(r, k, -s / tp.get(r, k));
                }
            }
            accum(nodes, adj, *probs, out);
        }
        Op::BatchNorm(saved) => norm_backward(nodes, adj, saved, g, NormAxis::Rows),
        Op::LayerNorm(saved) => norm_backward(nodes, adj, saved, g, NormAxis::Cols),
    }
}

#[derive(Clone, Copy, PartialEq)]
enum NormAxis {
    /// Statistics per column, reduced over rows.
    Rows,
    /// Statistics per row, reduced over columns.
    Cols,
}

fn norm_backward(nodes: &[Node], adj: &mut [Option<Tensor>], s: &NormSaved, g: &Tensor, axis: NormAxis) {
    let gamma = nodes[s.gamma.0].value.data();
    let (n, d) = (g.rows(), g.cols());
    if nodes[s.gamma.0].requires_grad || nodes[s.beta.0].requires_grad {
        let mut dgamma = vec![0.0; d];
        let mut dbeta = vec![0.0; d];
        for r in 0..n {
            for c in 0..d {
                let gv = g.get(r, c);
                dgamma[c] += gv * s.xhat.get(r, c);
                dbeta[c] += gv;
            }
        }
        accum(nodes, adj, s.gamma, Tensor::row_vector(dgamma));
        accum(nodes, adj, s.beta, Tensor::row_vector(dbeta));
    }
    if !nodes[s.x.0].requires_grad {
        return;
    }
    // dxhat = g * gamma
    let mut dxhat = g.clone();
    for r in 0..n {
        for (c, v) in dxhat.row_mut(r).iter_mut().enumerate() {
            *v *= gamma[c];
        }
    }
    let mut dx = Tensor::zeros(g.shape());
    match axis {
        NormAxis::Rows if !s.batch_stats => {
            for r in 0..n {
                for c in 0..d {
                    dx.set(r, c, dxhat.get(r, c) * s.inv_std[c]);
                }
            }
        }
        NormAxis::Rows => {
            let m = n as f64;
            for c in 0..d {
                let (mut sum, mut dot) = (0.0, 0.0);
                for r in 0..n {
                    sum += dxhat.get(r, c);
                    dot += dxhat.get(r, c) * s.xhat.get(r, c);
                }
                for r in 0..n {
                    let v = s.inv_std[c] / m * (m * dxhat.get(r, c) - sum - s.xhat.get(r, c) * dot);
                    dx.set(r, c, v);
                }
            }
        }
        NormAxis::Cols => {
            let m = d as f64;
            for r in 0..n {
                let (xr, dr) = (s.xhat.row(r), dxhat.row(r));
                let sum: f64 = dr.iter().sum();
                let dot: f64 = dr.iter().zip(xr).map(|(a, b)| a * b).sum();
                for c in 0..d {
                    dx.set(r, c, s.inv_std[r] / m * (m * dr[c] - sum - xr[c] * dot));
                }
            }
        }
    }
    accum(nodes, adj, s.x, dx);
}
