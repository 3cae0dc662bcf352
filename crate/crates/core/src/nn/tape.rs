//! Reverse-mode automatic differentiation over [`Mat`] values.
//!
//! A [`Tape`] records operations in execution order; [`Tape::backward`]
//! walks them in reverse and accumulates parameter gradients. Parameters
//! are borrowed from a [`ParamStore`] and never copied onto the tape.

use std::rc::Rc;

use super::mat::{dot, Mat};
use super::params::{ParamId, ParamStore};
use crate::attn::Visibility;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

enum Value {
    Owned(Mat),
    Param(ParamId),
}

enum Op {
    Leaf,
    Embed { table: Var, ids: Vec<u32> },
    MatMul { x: Var, w: Var },
    MatMulNt { x: Var, w: Var, row_start: usize },
    AddBias { x: Var, b: Var },
    Add { a: Var, b: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Mat, inv_std: Vec<f64> },
    Gelu { x: Var },
    Attention { q: Var, k: Var, v: Var, mask: Rc<Visibility>, heads: usize, probs: Vec<f64> },
    GatherRows { x: Var, rows: Vec<usize> },
    ConcatRows { parts: Vec<Var> },
    Flatten { x: Var },
    NllSum { logits: Var, targets: Vec<(usize, usize)>, softmax: Mat },
    BceSum { logits: Var, targets: Vec<f64> },
    Scale { x: Var, c: f64 },
    Sum { parts: Vec<Var> },
}

struct Node {
    value: Value,
    op: Op,
}

pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

/// Gradients indexed by parameter; `None` means the parameter was not
/// reached from the loss.
#[derive(Debug, Clone)]
pub struct Grads {
    slots: Vec<Option<Mat>>,
}

impl Grads {
    pub fn get(&self, id: ParamId) -> Option<&Mat> {
        self.slots[id.0].as_ref()
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    /// Gradient of every parameter, zero-filled where unreached.
    pub fn dense(self, params: &ParamStore) -> Vec<Mat> {
        self.slots
            .into_iter()
            .zip(params.ids())
            .map(|(g, id)| {
                g.unwrap_or_else(|| {
                    let (r, c) = params.get(id).shape();
                    Mat::zeros(r, c)
                })
            })
            .collect()
    }

    pub fn unreached(&self, params: &ParamStore) -> Vec<String> {
        params
            .ids()
            .filter(|id| self.slots[id.0].is_none())
            .map(|id| params.name(id).to_string())
            .collect()
    }
}

fn acc(grads: &mut [Option<Mat>], v: Var, g: Mat) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn acc_with(grads: &mut [Option<Mat>], v: Var, shape: (usize, usize), f: impl FnOnce(&mut Mat)) {
    let slot = grads[v.0].get_or_insert_with(|| Mat::zeros(shape.0, shape.1));
    f(slot);
}

fn gelu(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Tape {
            params,
            nodes: Vec::new(),
            param_vars: vec![None; params.len()],
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn value(&self, v: Var) -> &Mat {
        match &self.nodes[v.0].value {
            Value::Owned(m) => m,
            Value::Param(id) => self.params.get(*id),
        }
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        self.nodes.push(Node {
            value: Value::Param(id),
            op: Op::Leaf,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    /// Rows of `table` selected by `ids`.
    pub fn embed(&mut self, table: Var, ids: &[u32]) -> Var {
        let t = self.value(table);
        let mut out = Mat::zeros(ids.len(), t.cols());
        for (i, &id) in ids.iter().enumerate() {
            out.row_mut(i).copy_from_slice(t.row(id as usize));
        }
        self.push(out, Op::Embed { table, ids: ids.to_vec() })
    }

    pub fn matmul(&mut self, x: Var, w: Var) -> Var {
        let out = self.value(x).matmul(self.value(w));
        self.push(out, Op::MatMul { x, w })
    }

    /// `x · w[row_start..]ᵀ`
    pub fn matmul_nt(&mut self, x: Var, w: Var, row_start: usize) -> Var {
        let out = self.value(x).matmul_nt(self.value(w), row_start);
        self.push(out, Op::MatMulNt { x, w, row_start })
    }

    pub fn add_bias(&mut self, x: Var, b: Var) -> Var {
        let bias = self.value(b);
        let mut out = self.value(x).clone();
        assert_eq!(bias.shape(), (1, out.cols()), "bias shape");
        for r in 0..out.rows() {
            for (o, bv) in out.row_mut(r).iter_mut().zip(bias.row(0)) {
                *o += bv;
            }
        }
        self.push(out, Op::AddBias { x, b })
    }

    /// `x · w + b`
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let y = self.matmul(x, w);
        self.add_bias(y, b)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        self.push(out, Op::Add { a, b })
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let g = self.value(gamma).row(0);
        let b = self.value(beta).row(0);
        let mut xhat = Mat::zeros(rows, cols);
        let mut out = Mat::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std.push(is);
            for c in 0..cols {
                let h = (row[c] - mean) * is;
                xhat.set(r, c, h);
                out.set(r, c, h * g[c] + b[c]);
            }
        }
        self.push(out, Op::LayerNorm { x, gamma, beta, xhat, inv_std })
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        for v in out.data_mut() {
            *v = gelu(*v);
        }
        self.push(out, Op::Gelu { x })
    }

    /// Multi-head scaled dot-product attention. Keys hidden from a query by
    /// `mask` are skipped outright, so they contribute nothing to the
    /// softmax normalizer or the weighted sum.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, mask: &Rc<Visibility>, heads: usize) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (nq, hidden) = qv.shape();
        let nk = kv.rows();
        assert_eq!(mask.len(), nq.max(nk), "mask shape");
        let dh = hidden / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut probs = vec![0.0; heads * nq * nk];
        let mut out = Mat::zeros(nq, hidden);
        for h in 0..heads {
            let cols = h * dh..(h + 1) * dh;
            for i in 0..nq {
                let qi = &qv.row(i)[cols.clone()];
                let vis = mask.row(i);
                let p = &mut probs[(h * nq + i) * nk..(h * nq + i + 1) * nk];
                let mut max = f64::NEG_INFINITY;
                for j in 0..nk {
                    if vis[j] {
                        let s = dot(qi, &kv.row(j)[cols.clone()]) * scale;
                        p[j] = s;
                        max = max.max(s);
                    }
                }
                let mut sum = 0.0;
                for j in 0..nk {
                    if vis[j] {
                        p[j] = (p[j] - max).exp();
                        sum += p[j];
                    }
                }
                let o = &mut out.row_mut(i)[cols.clone()];
                for j in 0..nk {
                    if vis[j] {
                        p[j] /= sum;
                        let pj = p[j];
                        for (o, &x) in o.iter_mut().zip(&vv.row(j)[cols.clone()]) {
                            *o += pj * x;
                        }
                    }
                }
            }
        }
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                mask: Rc::clone(mask),
                heads,
                probs,
            },
        )
    }

    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Var {
        let xv = self.value(x);
        let mut out = Mat::zeros(rows.len(), xv.cols());
        for (i, &r) in rows.iter().enumerate() {
            out.row_mut(i).copy_from_slice(xv.row(r));
        }
        self.push(out, Op::GatherRows { x, rows: rows.to_vec() })
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.cols(), cols, "concat_rows width");
            data.extend_from_slice(v.data());
        }
        let rows = data.len() / cols;
        self.push(Mat::from_vec(rows, cols, data), Op::ConcatRows { parts: parts.to_vec() })
    }

    /// Reshape to a single row.
    pub fn flatten(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let out = Mat::row_vector(v.data().to_vec());
        self.push(out, Op::Flatten { x })
    }

    /// Sum over `(row, class)` pairs of `-log softmax(logits[row])[class]`.
    pub fn nll_sum(&mut self, logits: Var, targets: &[(usize, usize)]) -> Var {
        let lv = self.value(logits);
        let mut softmax = Mat::zeros(lv.rows(), lv.cols());
        let mut log_z = vec![0.0; lv.rows()];
        for r in 0..lv.rows() {
            let row = lv.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (c, &x) in row.iter().enumerate() {
                let e = (x - max).exp();
                softmax.set(r, c, e);
                sum += e;
            }
            for x in softmax.row_mut(r) {
                *x /= sum;
            }
            log_z[r] = max + sum.ln();
        }
        let mut loss = 0.0;
        for &(r, c) in targets {
            loss += log_z[r] - lv.get(r, c);
        }
        self.push(
            Mat::scalar(loss),
            Op::NllSum {
                logits,
                targets: targets.to_vec(),
                softmax,
            },
        )
    }

    /// Binary cross-entropy with logits, summed over a single row.
    pub fn bce_sum(&mut self, logits: Var, targets: &[f64]) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.len(), targets.len(), "bce shape");
        let mut loss = 0.0;
        for (&z, &y) in lv.data().iter().zip(targets) {
            loss += z.max(0.0) - z * y + (-z.abs()).exp().ln_1p();
        }
        self.push(
            Mat::scalar(loss),
            Op::BceSum {
                logits,
                targets: targets.to_vec(),
            },
        )
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let mut out = self.value(x).clone();
        out.scale(c);
        self.push(out, Op::Scale { x, c })
    }

    /// Sum of scalar nodes, accumulated left to right.
    pub fn sum(&mut self, parts: &[Var]) -> Var {
        let mut s = 0.0;
        for &p in parts {
            s += self.value(p).scalar_value();
        }
        self.push(Mat::scalar(s), Op::Sum { parts: parts.to_vec() })
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v).scalar_value()
    }

    /// Back-propagates from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Grads {
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Mat::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                }
                Op::Embed { table, ids } => {
                    let shape = self.value(*table).shape();
                    acc_with(&mut grads, *table, shape, |t| {
                        for (r, &id) in ids.iter().enumerate() {
                            for (a, b) in t.row_mut(id as usize).iter_mut().zip(g.row(r)) {
                                *a += b;
                            }
                        }
                    });
                }
                Op::MatMul { x, w } => {
                    let gx = g.matmul_nt(self.value(*w), 0);
                    let gw = self.value(*x).matmul_tn(&g);
                    acc(&mut grads, *x, gx);
                    acc(&mut grads, *w, gw);
                }
                Op::MatMulNt { x, w, row_start } => {
                    let wv = self.value(*w);
                    let xv = self.value(*x);
                    let n = wv.rows() - row_start;
                    let mut gx = Mat::zeros(xv.rows(), xv.cols());
                    for r in 0..g.rows() {
                        let gr = g.row(r);
                        let o = gx.row_mut(r);
                        for j in 0..n {
                            let gv = gr[j];
                            for (o, &wv) in o.iter_mut().zip(wv.row(row_start + j)) {
                                *o += gv * wv;
                            }
                        }
                    }
                    acc(&mut grads, *x, gx);
                    let shape = wv.shape();
                    acc_with(&mut grads, *w, shape, |gw| {
                        for r in 0..g.rows() {
                            let xr = xv.row(r);
                            for j in 0..n {
                                let gv = g.get(r, j);
                                for (o, &xv) in gw.row_mut(row_start + j).iter_mut().zip(xr) {
                                    *o += gv * xv;
                                }
                            }
                        }
                    });
                }
                Op::AddBias { x, b } => {
                    let mut gb = Mat::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (a, v) in gb.row_mut(0).iter_mut().zip(g.row(r)) {
                            *a += v;
                        }
                    }
                    acc(&mut grads, *b, gb);
                    acc(&mut grads, *x, g);
                }
                Op::Add { a, b } => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g);
                }
                Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                    let gam = self.value(*gamma).row(0);
                    let (rows, cols) = g.shape();
                    let n = cols as f64;
                    let mut gg = Mat::zeros(1, cols);
                    let mut gb = Mat::zeros(1, cols);
                    let mut gx = Mat::zeros(rows, cols);
                    let mut dxhat = vec![0.0; cols];
                    for r in 0..rows {
                        let gr = g.row(r);
                        let xr = xhat.row(r);
                        let mut sum_d = 0.0;
                        let mut sum_dx = 0.0;
                        for c in 0..cols {
                            gg.data_mut()[c] += gr[c] * xr[c];
                            gb.data_mut()[c] += gr[c];
                            dxhat[c] = gr[c] * gam[c];
                            sum_d += dxhat[c];
                            sum_dx += dxhat[c] * xr[c];
                        }
                        let is = inv_std[r];
                        for (c, o) in gx.row_mut(r).iter_mut().enumerate() {
                            *o = is / n * (n * dxhat[c] - sum_d - xr[c] * sum_dx);
                        }
                    }
                    acc(&mut grads, *gamma, gg);
                    acc(&mut grads, *beta, gb);
                    acc(&mut grads, *x, gx);
                }
                Op::Gelu { x } => {
                    let xv = self.value(*x);
                    let mut gx = g;
                    for (o, &xv) in gx.data_mut().iter_mut().zip(xv.data()) {
                        *o *= gelu_grad(xv);
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::Attention { q, k, v, mask, heads, probs } => {
                    let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                    let (nq, hidden) = qv.shape();
                    let nk = kv.rows();
                    let dh = hidden / heads;
                    let scale = 1.0 / (dh as f64).sqrt();
                    let mut gq = Mat::zeros(nq, hidden);
                    let mut gk = Mat::zeros(nk, hidden);
                    let mut gv = Mat::zeros(nk, hidden);
                    let mut dp = vec![0.0; nk];
                    for h in 0..*heads {
                        let cols = h * dh..(h + 1) * dh;
                        for i in 0..nq {
                            let vis = mask.row(i);
                            let p = &probs[(h * nq + i) * nk..(h * nq + i + 1) * nk];
                            let gi = &g.row(i)[cols.clone()];
                            let mut weighted = 0.0;
                            for j in 0..nk {
                                if vis[j] {
                                    dp[j] = dot(gi, &vv.row(j)[cols.clone()]);
                                    weighted += p[j] * dp[j];
                                }
                            }
                            let qi: Vec<f64> = qv.row(i)[cols.clone()].to_vec();
                            for j in 0..nk {
                                if !vis[j] {
                                    continue;
                                }
                                let ds = p[j] * (dp[j] - weighted) * scale;
                                let kj = &kv.row(j)[cols.clone()];
                                for (o, &x) in gq.row_mut(i)[cols.clone()].iter_mut().zip(kj) {
                                    *o += ds * x;
                                }
                                for (o, &x) in gk.row_mut(j)[cols.clone()].iter_mut().zip(&qi) {
                                    *o += ds * x;
                                }
                                let pj = p[j];
                                for (o, &x) in gv.row_mut(j)[cols.clone()].iter_mut().zip(gi) {
                                    *o += pj * x;
                                }
                            }
                        }
                    }
                    acc(&mut grads, *q, gq);
                    acc(&mut grads, *k, gk);
                    acc(&mut grads, *v, gv);
                }
                Op::GatherRows { x, rows } => {
                    let shape = self.value(*x).shape();
                    acc_with(&mut grads, *x, shape, |gx| {
                        for (i, &r) in rows.iter().enumerate() {
                            for (a, b) in gx.row_mut(r).iter_mut().zip(g.row(i)) {
                                *a += b;
                            }
                        }
                    });
                }
                Op::ConcatRows { parts } => {
                    let mut offset = 0;
                    for &p in parts {
                        let (r, c) = self.value(p).shape();
                        let slice = g.data()[offset * c..(offset + r) * c].to_vec();
                        acc(&mut grads, p, Mat::from_vec(r, c, slice));
                        offset += r;
                    }
                }
                Op::Flatten { x } => {
                    let (r, c) = self.value(*x).shape();
                    acc(&mut grads, *x, Mat::from_vec(r, c, g.into_vec()));
                }
                Op::NllSum { logits, targets, softmax } => {
                    let up = g.scalar_value();
                    let (rows, cols) = softmax.shape();
                    let mut gl = Mat::zeros(rows, cols);
                    for &(r, c) in targets {
                        for (o, &s) in gl.row_mut(r).iter_mut().zip(softmax.row(r)) {
                            *o += up * s;
                        }
                        let cur = gl.get(r, c);
                        gl.set(r, c, cur - up);
                    }
                    acc(&mut grads, *logits, gl);
                }
                Op::BceSum { logits, targets } => {
                    let up = g.scalar_value();
                    let lv = self.value(*logits);
                    let data = lv
                        .data()
                        .iter()
                        .zip(targets)
                        .map(|(&z, &y)| up * (1.0 / (1.0 + (-z).exp()) - y))
                        .collect();
                    acc(&mut grads, *logits, Mat::from_vec(lv.rows(), lv.cols(), data));
                }
                Op::Scale { x, c } => {
                    let mut gx = g;
                    gx.scale(*c);
                    acc(&mut grads, *x, gx);
                }
                Op::Sum { parts } => {
                    for &p in parts {
                        acc(&mut grads, p, g.clone());
                    }
                }
            }
        }
        let mut slots: Vec<Option<Mat>> = vec![None; self.params.len()];
        for (pid, var) in self.param_vars.iter().enumerate() {
            if let Some(v) = var {
                slots[pid] = grads[v.0].take();
            }
        }
        Grads { slots }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Central differences on a single parameter tensor.
    fn numeric_grad(
        params: &ParamStore,
        id: ParamId,
        f: &dyn Fn(&ParamStore) -> f64,
    ) -> Mat {
        let h = 1e-5;
        let base = params.get(id).clone();
        let mut out = Mat::zeros(base.rows(), base.cols());
        for i in 0..base.len() {
            let mut p = params.clone();
            p.get_mut(id).data_mut()[i] += h;
            let up = f(&p);
            p.get_mut(id).data_mut()[i] -= 2.0 * h;
            let down = f(&p);
            out.data_mut()[i] = (up - down) / (2.0 * h);
        }
        out
    }

    fn seq(rows: usize, cols: usize, k: f64) -> Mat {
        Mat::from_vec(rows, cols, (0..rows * cols).map(|i| ((i as f64 + 1.0) * k).sin()).collect())
    }

    fn check(params: &ParamStore, f: &dyn Fn(&mut Tape) -> Var) {
        let mut tape = Tape::new(params);
        let loss = f(&mut tape);
        let grads = tape.backward(loss);
        let scalar = |p: &ParamStore| {
            let mut t = Tape::new(p);
            let l = f(&mut t);
            t.scalar(l)
        };
        for id in params.ids() {
            let num = numeric_grad(params, id, &scalar);
            let ana = grads.get(id).cloned().unwrap_or_else(|| Mat::zeros(num.rows(), num.cols()));
            let err = ana.max_abs_diff(&num);
            assert!(err < 1e-7, "{}: max abs err {err}", params.name(id));
        }
    }

    #[test]
    fn dense_ops_match_finite_differences() {
        let mut p = ParamStore::new();
        let x = p.insert("x", seq(3, 4, 0.7)).unwrap();
        let w = p.insert("w", seq(4, 4, 0.3)).unwrap();
        let b = p.insert("b", seq(1, 4, 0.9)).unwrap();
        let g = p.insert("g", seq(1, 4, 1.3)).unwrap();
        let e = p.insert("e", seq(6, 4, 0.2)).unwrap();
        check(&p, &|t: &mut Tape| {
            let (xv, wv, bv, gv, ev) = (t.param(x), t.param(w), t.param(b), t.param(g), t.param(e));
            let y = t.linear(xv, wv, bv);
            let y = t.gelu(y);
            let y = t.layer_norm(y, gv, bv);
            let emb = t.embed(ev, &[1, 3, 1]);
            let y = t.add(y, emb);
            let logits = t.matmul_nt(y, ev, 2);
            t.nll_sum(logits, &[(0, 1), (2, 3), (2, 0)])
        });
    }

    #[test]
    fn attention_matches_finite_differences() {
        let mut p = ParamStore::new();
        let q = p.insert("q", seq(4, 4, 0.5)).unwrap();
        let k = p.insert("k", seq(4, 4, 0.8)).unwrap();
        let v = p.insert("v", seq(4, 4, 1.1)).unwrap();
        let mut mask = Visibility::full(4);
        mask.set(0, 3, false);
        mask.set(1, 2, false);
        mask.set(3, 0, false);
        let mask = Rc::new(mask);
        check(&p, &|t: &mut Tape| {
            let (qv, kv, vv) = (t.param(q), t.param(k), t.param(v));
            let a = t.attention(qv, kv, vv, &mask, 2);
            let rows = t.gather_rows(a, &[0, 2]);
            let flat = t.flatten(rows);
            let c = t.concat_rows(&[flat, flat]);
            let s = t.bce_sum(c, &[1., 0., 1., 1., 0., 0., 1., 0., 0., 1., 1., 0., 1., 0., 0., 1.]);
            let s2 = t.scale(s, 0.5);
            t.sum(&[s, s2])
        });
    }

    #[test]
    fn unreached_parameters_are_reported() {
        let mut p = ParamStore::new();
        let a = p.insert("a", seq(1, 2, 0.5)).unwrap();
        p.insert("b", seq(1, 2, 0.5)).unwrap();
        let mut t = Tape::new(&p);
        let av = t.param(a);
        let l = t.nll_sum(av, &[(0, 0)]);
        let g = t.backward(l);
        assert_eq!(g.unreached(&p), vec!["b".to_string()]);
    }
}
