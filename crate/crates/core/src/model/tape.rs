//! Reverse-mode differentiation over a linear tape of matrix operations.
//!
//! Every op records what its backward pass needs. Named parameter leaves get
//! their gradients collected by name after [`Tape::backward`].

use std::collections::HashMap;

use indexmap::IndexMap;

use super::activation::{gelu, gelu_grad, sigmoid};
use super::tensor::Matrix;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Shape of a multi-head self-attention call over a `[batch * seq, hidden]`
/// activation matrix.
#[derive(Debug, Clone)]
pub struct AttentionLayout {
    pub batch: usize,
    pub seq: usize,
    pub heads: usize,
    /// 1 for real tokens, 0 for padding, `[batch * seq]`.
    pub key_mask: Vec<u8>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Gather { table: Var, ids: Vec<usize> },
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Matrix, inv_std: Vec<f64> },
    Gelu(Var),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    LogSoftmax(Var),
    Dropout { x: Var, scale: Vec<f64> },
    Attention { q: Var, k: Var, v: Var, layout: AttentionLayout, probs: Vec<f64> },
    SelectRows { x: Var, rows: Vec<usize> },
    Loss { scores: Var, grad: Matrix },
}

struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

pub const LAYER_NORM_EPS: f64 = 1e-12;

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: IndexMap<String, Var>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Matrix, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|i| self.nodes[i.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Constant input; no gradient flows into it.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Named trainable leaf. Registering the same name twice returns the same var.
    pub fn param(&mut self, name: &str, value: &Matrix) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        self.nodes.push(Node {
            value: value.clone(),
            op: Op::Leaf,
            needs_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(name.to_string(), v);
        v
    }

    pub fn gather(&mut self, table: Var, ids: Vec<usize>) -> Var {
        let t = self.value(table);
        let mut out = Matrix::zeros(ids.len(), t.cols);
        for (r, &id) in ids.iter().enumerate() {
            out.row_mut(r).copy_from_slice(t.row(id));
        }
        self.push(out, Op::Gather { table, ids }, &[table])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b));
        self.push(out, Op::MatMul(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        self.push(out, Op::Add(a, b), &[a, b])
    }

    /// `a + 1·b` where `b` is a single row broadcast over the rows of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let bias = self.value(b);
        assert_eq!(bias.rows, 1, "add_row expects a row vector");
        let mut out = self.value(a).clone();
        assert_eq!(out.cols, bias.cols, "add_row width");
        for r in 0..out.rows {
            for (o, &bv) in out.row_mut(r).iter_mut().zip(&bias.data) {
                *o += bv;
            }
        }
        self.push(out, Op::AddRow(a, b), &[a, b])
    }

    /// `x·W + b`
    pub fn linear(&mut self, x: Var, weight: Var, bias: Var) -> Var {
        let h = self.matmul(x, weight);
        self.add_row(h, bias)
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let xv = self.value(x);
        let (g, b) = (self.value(gain), self.value(bias));
        let n = xv.cols as f64;
        let mut xhat = Matrix::zeros(xv.rows, xv.cols);
        let mut out = Matrix::zeros(xv.rows, xv.cols);
        let mut inv_std = Vec::with_capacity(xv.rows);
        for r in 0..xv.rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(is);
            for c in 0..xv.cols {
                let h = (row[c] - mean) * is;
                *xhat.at_mut(r, c) = h;
                *out.at_mut(r, c) = h * g.data[c] + b.data[c];
            }
        }
        self.push(out, Op::LayerNorm { x, gain, bias, xhat, inv_std }, &[x, gain, bias])
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(gelu);
        self.push(out, Op::Gelu(x), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        self.push(out, Op::Relu(x), &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::tanh);
        self.push(out, Op::Tanh(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        self.push(out, Op::Sigmoid(x), &[x])
    }

    pub fn log_softmax(&mut self, x: Var) -> Var {
        let out = super::activation::log_softmax_rows(self.value(x));
        self.push(out, Op::LogSoftmax(x), &[x])
    }

    /// Multiplies element-wise by a fixed mask of `0` or `1/(1-p)` entries.
    pub fn dropout(&mut self, x: Var, scale: Vec<f64>) -> Var {
        let xv = self.value(x);
        assert_eq!(scale.len(), xv.len(), "dropout mask size");
        let out = Matrix::from_vec(xv.rows, xv.cols, xv.data.iter().zip(&scale).map(|(a, s)| a * s).collect());
        self.push(out, Op::Dropout { x, scale }, &[x])
    }

    pub fn select_rows(&mut self, x: Var, rows: Vec<usize>) -> Var {
        let xv = self.value(x);
        let mut out = Matrix::zeros(rows.len(), xv.cols);
        for (i, &r) in rows.iter().enumerate() {
            out.row_mut(i).copy_from_slice(xv.row(r));
        }
        self.push(out, Op::SelectRows { x, rows }, &[x])
    }

    /// Scaled dot-product self-attention, computed independently per sequence
    /// and head. Padded keys are excluded from the softmax outright, so padding
    /// never touches the real positions.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, layout: AttentionLayout) -> Var {
        let (qm, km, vm) = (self.value(q), self.value(k), self.value(v));
        let hidden = qm.cols;
        let (bsz, seq, heads) = (layout.batch, layout.seq, layout.heads);
        assert_eq!(qm.rows, bsz * seq, "attention rows");
        assert_eq!(hidden % heads, 0, "attention head split");
        let dh = hidden / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut probs = vec![0.0; bsz * heads * seq * seq];
        let mut out = Matrix::zeros(qm.rows, hidden);
        let mut scores = vec![0.0; seq];
        for b in 0..bsz {
            let base = b * seq;
            let mask = &layout.key_mask[base..base + seq];
            for h in 0..heads {
                let cols = h * dh..(h + 1) * dh;
                for i in 0..seq {
                    let qi = &qm.row(base + i)[cols.clone()];
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..seq {
                        if mask[j] == 1 {
                            let kj = &km.row(base + j)[cols.clone()];
                            let s = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                            scores[j] = s;
                            max = max.max(s);
                        }
                    }
                    let p = &mut probs[((b * heads + h) * seq + i) * seq..][..seq];
                    let mut total = 0.0;
                    for j in 0..seq {
                        if mask[j] == 1 {
                            p[j] = (scores[j] - max).exp();
                            total += p[j];
                        }
                    }
                    let out_row = &mut out.row_mut(base + i)[cols.clone()];
                    for j in 0..seq {
                        if mask[j] == 1 {
                            p[j] /= total;
                            let vj = &vm.row(base + j)[cols.clone()];
                            for (o, &vv) in out_row.iter_mut().zip(vj) {
                                *o += p[j] * vv;
                            }
                        }
                    }
                }
            }
        }
        self.push(out, Op::Attention { q, k, v, layout, probs }, &[q, k, v])
    }

    /// Terminal scalar node whose gradient w.r.t. `scores` was computed outside
    /// the tape.
    pub fn loss(&mut self, scores: Var, value: f64, grad: Matrix) -> Var {
        assert_eq!(grad.shape(), self.value(scores).shape(), "loss gradient shape");
        self.push(Matrix::filled(1, 1, value), Op::Loss { scores, grad }, &[scores])
    }

    /// Back-propagates from a scalar node and returns gradients of every
    /// registered parameter.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        assert_eq!(self.value(root).shape(), [1, 1], "backward from a non-scalar");
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Matrix::filled(1, 1, 1.0));

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let mut acc = |v: Var, d: Matrix| {
                if !self.nodes[v.0].needs_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(existing) => existing.add_assign(&d),
                    slot => *slot = Some(d),
                }
            };
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Gather { table, ids } => {
                    let t = self.value(*table);
                    let mut d = Matrix::zeros(t.rows, t.cols);
                    for (r, &id) in ids.iter().enumerate() {
                        for (o, &gv) in d.row_mut(id).iter_mut().zip(g.row(r)) {
                            *o += gv;
                        }
                    }
                    acc(*table, d);
                }
                Op::MatMul(a, b) => {
                    acc(*a, g.matmul_t(self.value(*b)));
                    acc(*b, self.value(*a).t_matmul(&g));
                }
                Op::Add(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g);
                }
                Op::AddRow(a, b) => {
                    let mut db = Matrix::zeros(1, g.cols);
                    for r in 0..g.rows {
                        for (o, &gv) in db.data.iter_mut().zip(g.row(r)) {
                            *o += gv;
                        }
                    }
                    acc(*a, g);
                    acc(*b, db);
                }
                Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                    let gv = self.value(*gain);
                    let n = g.cols as f64;
                    let mut dx = Matrix::zeros(g.rows, g.cols);
                    let mut dgain = Matrix::zeros(1, g.cols);
                    let mut dbias = Matrix::zeros(1, g.cols);
                    for r in 0..g.rows {
                        let (gr, hr) = (g.row(r), xhat.row(r));
                        let mut sum_d = 0.0;
                        let mut sum_dh = 0.0;
                        for c in 0..g.cols {
                            let dh = gr[c] * gv.data[c];
                            sum_d += dh;
                            sum_dh += dh * hr[c];
                            dgain.data[c] += gr[c] * hr[c];
                            dbias.data[c] += gr[c];
                        }
                        let is = inv_std[r];
                        for c in 0..g.cols {
                            let dh = gr[c] * gv.data[c];
                            *dx.at_mut(r, c) = is / n * (n * dh - sum_d - hr[c] * sum_dh);
                        }
                    }
                    acc(*x, dx);
                    acc(*gain, dgain);
                    acc(*bias, dbias);
                }
                Op::Gelu(x) => {
                    let xv = self.value(*x);
                    acc(*x, zip_map(&g, xv, |gv, v| gv * gelu_grad(v)));
                }
                Op::Relu(x) => {
                    let xv = self.value(*x);
                    acc(*x, zip_map(&g, xv, |gv, v| if v > 0.0 { gv } else { 0.0 }));
                }
                Op::Tanh(x) => {
                    acc(*x, zip_map(&g, &node.value, |gv, t| gv * (1.0 - t * t)));
                }
                Op::Sigmoid(x) => {
                    acc(*x, zip_map(&g, &node.value, |gv, s| gv * s * (1.0 - s)));
                }
                Op::LogSoftmax(x) => {
                    let y = &node.value;
                    let mut dx = Matrix::zeros(g.rows, g.cols);
                    for r in 0..g.rows {
                        let total: f64 = g.row(r).iter().sum();
                        for c in 0..g.cols {
                            *dx.at_mut(r, c) = g.at(r, c) - y.at(r, c).exp() * total;
                        }
                    }
                    acc(*x, dx);
                }
                Op::Dropout { x, scale } => {
                    let d = Matrix::from_vec(g.rows, g.cols, g.data.iter().zip(scale).map(|(a, s)| a * s).collect());
                    acc(*x, d);
                }
                Op::SelectRows { x, rows } => {
                    let xv = self.value(*x);
                    let mut d = Matrix::zeros(xv.rows, xv.cols);
                    for (i, &r) in rows.iter().enumerate() {
                        for (o, &gv) in d.row_mut(r).iter_mut().zip(g.row(i)) {
                            *o += gv;
                        }
                    }
                    acc(*x, d);
                }
                Op::Attention { q, k, v, layout, probs } => {
                    let (dq, dk, dv) = self.attention_backward(*q, *k, *v, layout, probs, &g);
                    acc(*q, dq);
                    acc(*k, dk);
                    acc(*v, dv);
                }
                Op::Loss { scores, grad } => {
                    acc(*scores, grad.scale(g.data[0]));
                }
            }
        }

        let mut out = IndexMap::with_capacity(self.params.len());
        for (name, var) in &self.params {
            let shape = self.value(*var).shape();
            let g = grads[var.0].take().unwrap_or_else(|| Matrix::zeros(shape[0], shape[1]));
            if !g.all_finite() {
                return Err(Error::NonFinite(name.clone()));
            }
            out.insert(name.clone(), g);
        }
        Ok(Gradients(out))
    }

    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        layout: &AttentionLayout,
        probs: &[f64],
        g: &Matrix,
    ) -> (Matrix, Matrix, Matrix) {
        let (qm, km, vm) = (self.value(q), self.value(k), self.value(v));
        let hidden = qm.cols;
        let (bsz, seq, heads) = (layout.batch, layout.seq, layout.heads);
        let dh = hidden / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut dq = Matrix::zeros(qm.rows, hidden);
        let mut dk = Matrix::zeros(qm.rows, hidden);
        let mut dv = Matrix::zeros(qm.rows, hidden);
        let mut dp = vec![0.0; seq];
        for b in 0..bsz {
            let base = b * seq;
            let mask = &layout.key_mask[base..base + seq];
            for h in 0..heads {
                let cols = h * dh..(h + 1) * dh;
                for i in 0..seq {
                    let p = &probs[((b * heads + h) * seq + i) * seq..][..seq];
                    let go = &g.row(base + i)[cols.clone()];
                    let mut weighted = 0.0;
                    for j in 0..seq {
                        if mask[j] == 1 {
                            let vj = &vm.row(base + j)[cols.clone()];
                            dp[j] = go.iter().zip(vj).map(|(a, b)| a * b).sum();
                            weighted += p[j] * dp[j];
                            for (o, &gv) in dv.row_mut(base + j)[cols.clone()].iter_mut().zip(go) {
                                *o += p[j] * gv;
                            }
                        }
                    }
                    for j in 0..seq {
                        if mask[j] != 1 {
                            continue;
                        }
                        let ds = p[j] * (dp[j] - weighted) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        let kj = &km.row(base + j)[cols.clone()];
                        for (o, &kv) in dq.row_mut(base + i)[cols.clone()].iter_mut().zip(kj) {
                            *o += ds * kv;
                        }
                        let qi = &qm.row(base + i)[cols.clone()];
                        for (o, &qv) in dk.row_mut(base + j)[cols.clone()].iter_mut().zip(qi) {
                            *o += ds * qv;
                        }
                    }
                }
            }
        }
        (dq, dk, dv)
    }
}

fn zip_map(g: &Matrix, x: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
    Matrix::from_vec(g.rows, g.cols, g.data.iter().zip(&x.data).map(|(&a, &b)| f(a, b)).collect())
}

/// Gradients keyed by parameter name, in registration order.
#[derive(Debug, Clone)]
pub struct Gradients(pub IndexMap<String, Matrix>);

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.0.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Matrix)> {
        self.0.iter()
    }

    pub fn norm(&self) -> f64 {
        self.0.values().map(|m| m.data.iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt()
    }

    pub fn into_map(self) -> HashMap<String, Matrix> {
        self.0.into_iter().collect()
    }
}
