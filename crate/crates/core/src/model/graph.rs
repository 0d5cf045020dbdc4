//! Eager reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! Every op computes its value when it is recorded; [`Graph::backward`] walks
//! the tape in reverse. Parameters are borrowed from a [`ParamSet`] rather
//! than copied into the tape.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::model::params::ParamSet;
use crate::model::tensor::{gemm, Tensor, View};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// One block of packed attention: queries `q_start..q_start+q_len` attend to
/// keys `k_start..k_start+k_valid`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttnSegment {
    pub q_start: usize,
    pub q_len: usize,
    pub k_start: usize,
    pub k_len: usize,
    /// Keys at offsets `>= k_valid` are masked (padding).
    pub k_valid: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttnLayout {
    pub segments: Vec<AttnSegment>,
    /// Query `i` may only attend to keys `<= i` within its segment.
    pub causal: bool,
}

const LN_EPS: f64 = 1e-5;

enum Op {
    Param(usize),
    Input,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        layout: Arc<AttnLayout>,
        probs: Vec<f64>,
    },
    Gather {
        table: Var,
        rows: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<f64>,
        probs: Vec<f64>,
    },
    Bce {
        scores: Var,
        labels: Vec<f64>,
        weights: Vec<f64>,
    },
    Dot(Var, Var),
    Sum(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Param(_) => "param",
            Op::Input => "input",
            Op::MatMul(..) => "matmul",
            Op::MatMulBt(..) => "matmul_bt",
            Op::Add(..) => "add",
            Op::AddRow(..) => "add_row",
            Op::Scale(..) => "scale",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Softmax(_) => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Attention { .. } => "attention",
            Op::Gather { .. } => "gather",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Bce { .. } => "bce",
            Op::Dot(..) => "dot",
            Op::Sum(_) => "sum",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients {
    params: Vec<Tensor>,
    vars: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn param(&self, id: usize) -> &Tensor {
        &self.params[id]
    }

    pub fn into_params(self) -> Vec<Tensor> {
        self.params
    }

    /// Gradient with respect to an [`Graph::input`] leaf, if it was reached.
    pub fn var(&self, v: Var) -> Option<&Tensor> {
        self.vars[v.0].as_ref()
    }
}

pub struct Graph<'p> {
    params: &'p ParamSet,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
    non_finite: Option<&'static str>,
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamSet) -> Self {
        Graph {
            params,
            nodes: Vec::new(),
            param_vars: vec![None; params.len()],
            non_finite: None,
        }
    }

    pub fn params(&self) -> &'p ParamSet {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        match self.nodes[v.0].op {
            Op::Param(id) => self.params.get(id),
            _ => &self.nodes[v.0].value,
        }
    }

    /// Errors if any recorded op produced a NaN or infinity.
    pub fn check(&self) -> Result<()> {
        match self.non_finite {
            Some(op) => Err(Error::NonFinite { op: op.to_string() }),
            None => Ok(()),
        }
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        if self.non_finite.is_none() && !value.is_finite() {
            self.non_finite = Some(op.name());
        }
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, id: usize) -> Var {
        if let Some(v) = self.param_vars[id] {
            return v;
        }
        self.nodes.push(Node {
            value: Tensor::default(),
            op: Op::Param(id),
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id] = Some(v);
        v
    }

    /// A leaf holding `value`; its gradient is reported by `backward`.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Input)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.cols, bv.rows, "matmul: inner dimensions differ");
        let (m, k, n) = (av.rows, av.cols, bv.cols);
        let mut out = Tensor::zeros(m, n);
        gemm(
            m,
            k,
            n,
            1.0,
            View::rows(&av.data, 0, k),
            View::rows(&bv.data, 0, n),
            0.0,
            &mut out.data,
            0,
            n,
        );
        self.push(out, Op::MatMul(a, b))
    }

    /// `a · bᵀ`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.cols, bv.cols, "matmul_bt: inner dimensions differ");
        let (m, k, n) = (av.rows, av.cols, bv.rows);
        let mut out = Tensor::zeros(m, n);
        gemm(
            m,
            k,
            n,
            1.0,
            View::rows(&av.data, 0, k),
            View::transposed(&bv.data, 0, k),
            0.0,
            &mut out.data,
            0,
            n,
        );
        self.push(out, Op::MatMulBt(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "add: shapes differ");
        let data = av.data.iter().zip(&bv.data).map(|(x, y)| x + y).collect();
        let out = Tensor::new(av.rows, av.cols, data);
        self.push(out, Op::Add(a, b))
    }

    /// Adds a 1×n row to every row of an m×n matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (av, rv) = (self.value(a), self.value(row));
        assert_eq!((1, av.cols), rv.shape(), "add_row: bias shape");
        let mut out = av.clone();
        for r in 0..out.rows {
            for (x, b) in out.row_mut(r).iter_mut().zip(&rv.data) {
                *x += b;
            }
        }
        self.push(out, Op::AddRow(a, row))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let av = self.value(a);
        let out = Tensor::new(av.rows, av.cols, av.data.iter().map(|x| x * s).collect());
        self.push(out, Op::Scale(a, s))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let out = Tensor::new(
            av.rows,
            av.cols,
            av.data.iter().map(|x| x.max(0.0)).collect(),
        );
        self.push(out, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let out = Tensor::new(
            av.rows,
            av.cols,
            av.data.iter().map(|&x| sigmoid(x)).collect(),
        );
        self.push(out, Op::Sigmoid(a))
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for r in 0..out.rows {
            softmax_in_place(out.row_mut(r));
        }
        self.push(out, Op::Softmax(a))
    }

    /// Row-wise layer normalization with 1×n gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        let n = xv.cols;
        assert_eq!(gv.shape(), (1, n), "layer_norm: gain shape");
        assert_eq!(bv.shape(), (1, n), "layer_norm: bias shape");
        let mut xhat = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; xv.rows];
        let mut out = Tensor::zeros(xv.rows, n);
        for r in 0..xv.rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            inv_std[r] = inv;
            let o = out.row_mut(r);
            for j in 0..n {
                let h = (row[j] - mean) * inv;
                xhat[r * n + j] = h;
                o[j] = h * gv.data[j] + bv.data[j];
            }
        }
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        )
    }

    /// Multi-head scaled dot-product attention over packed segments. `q`, `k`
    /// and `v` are already projected; heads split the columns evenly.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        layout: Arc<AttnLayout>,
    ) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.cols;
        assert!(
            heads > 0 && d % heads == 0,
            "attention: width not divisible by heads"
        );
        assert_eq!(kv.cols, d, "attention: key width");
        assert_eq!(vv.shape(), kv.shape(), "attention: value shape");
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Tensor::zeros(qv.rows, d);
        let mut probs = Vec::new();
        for seg in &layout.segments {
            assert!(seg.q_start + seg.q_len <= qv.rows && seg.k_start + seg.k_len <= kv.rows);
            assert!(!layout.causal || seg.q_len <= seg.k_len);
            let (ql, kl) = (seg.q_len, seg.k_len);
            for h in 0..heads {
                let off = probs.len();
                probs.resize(off + ql * kl, 0.0);
                let p = &mut probs[off..];
                gemm(
                    ql,
                    dh,
                    kl,
                    scale,
                    View::rows(&qv.data, seg.q_start * d + h * dh, d),
                    View::transposed(&kv.data, seg.k_start * d + h * dh, d),
                    0.0,
                    p,
                    0,
                    kl,
                );
                for i in 0..ql {
                    let limit = if layout.causal {
                        seg.k_valid.min(i + 1)
                    } else {
                        seg.k_valid
                    }
                    .min(kl);
                    let row = &mut p[i * kl..(i + 1) * kl];
                    if limit == 0 {
                        row.fill(0.0);
                        continue;
                    }
                    softmax_in_place(&mut row[..limit]);
                    row[limit..].fill(0.0);
                }
                gemm(
                    ql,
                    kl,
                    dh,
                    1.0,
                    View::rows(p, 0, kl),
                    View::rows(&vv.data, seg.k_start * d + h * dh, d),
                    0.0,
                    &mut out.data,
                    seg.q_start * d + h * dh,
                    d,
                );
            }
        }
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                layout,
                probs,
            },
        )
    }

    /// Selects rows of `table` (embedding lookup when `table` is a parameter).
    pub fn gather(&mut self, table: Var, rows: Vec<usize>) -> Var {
        let tv = self.value(table);
        let mut out = Tensor::zeros(rows.len(), tv.cols);
        for (i, &r) in rows.iter().enumerate() {
            assert!(r < tv.rows, "gather: row {r} out of range {}", tv.rows);
            out.row_mut(i).copy_from_slice(tv.row(r));
        }
        self.push(out, Op::Gather { table, rows })
    }

    /// `Σ_i w_i · (−log softmax(logits_i)[target_i])` as a 1×1 tensor.
    pub fn cross_entropy(&mut self, logits: Var, targets: Vec<usize>, weights: Vec<f64>) -> Var {
        let lv = self.value(logits);
        assert_eq!(targets.len(), lv.rows, "cross_entropy: one target per row");
        assert_eq!(weights.len(), lv.rows, "cross_entropy: one weight per row");
        let mut probs = lv.data.clone();
        let mut loss = 0.0;
        for r in 0..lv.rows {
            let row = lv.row(r);
            assert!(targets[r] < lv.cols, "cross_entropy: target out of range");
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            loss += weights[r] * (lse - row[targets[r]]);
            softmax_in_place(&mut probs[r * lv.cols..(r + 1) * lv.cols]);
        }
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                probs,
            },
        )
    }

    /// Weighted binary cross-entropy on logistic-squashed scores:
    /// `Σ w·[−y·log σ(s) − (1−y)·log(1−σ(s))]`, flattened over all entries.
    pub fn bce_with_logits(&mut self, scores: Var, labels: Vec<f64>, weights: Vec<f64>) -> Var {
        let sv = self.value(scores);
        assert_eq!(labels.len(), sv.len(), "bce: one label per score");
        assert_eq!(weights.len(), sv.len(), "bce: one weight per score");
        let loss = sv
            .data
            .iter()
            .zip(&labels)
            .zip(&weights)
            .map(|((&s, &y), &w)| w * (y * softplus(-s) + (1.0 - y) * softplus(s)))
            .sum();
        self.push(
            Tensor::scalar(loss),
            Op::Bce {
                scores,
                labels,
                weights,
            },
        )
    }

    /// Sum of element-wise products of two equally shaped tensors.
    pub fn dot(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "dot: shapes differ");
        let s = av.data.iter().zip(&bv.data).map(|(x, y)| x * y).sum();
        self.push(Tensor::scalar(s), Op::Dot(a, b))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    /// Backpropagates from a scalar output.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        assert_eq!(
            self.value(output).shape(),
            (1, 1),
            "backward needs a scalar output"
        );
        self.backward_with(vec![(output, Tensor::scalar(1.0))])
    }

    /// Backpropagates explicit upstream gradients.
    pub fn backward_with(&self, seeds: Vec<(Var, Tensor)>) -> Result<Gradients> {
        self.check()?;
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut last = 0;
        for (v, g) in seeds {
            assert_eq!(self.value(v).shape(), g.shape(), "seed gradient shape");
            last = last.max(v.0);
            accumulate(&mut grads, v, g);
        }
        let mut param_grads: Vec<Tensor> = self
            .params
            .tensors()
            .iter()
            .map(|t| Tensor::zeros(t.rows, t.cols))
            .collect();
        for i in (0..=last).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Param(id) => {
                    param_grads[*id].add_assign(&g);
                }
                Op::Input => {
                    grads[i] = Some(g);
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (m, k, n) = (av.rows, av.cols, bv.cols);
                    let mut ga = Tensor::zeros(m, k);
                    gemm(
                        m,
                        n,
                        k,
                        1.0,
                        View::rows(&g.data, 0, n),
                        View::transposed(&bv.data, 0, n),
                        0.0,
                        &mut ga.data,
                        0,
                        k,
                    );
                    let mut gb = Tensor::zeros(k, n);
                    gemm(
                        k,
                        m,
                        n,
                        1.0,
                        View::transposed(&av.data, 0, k),
                        View::rows(&g.data, 0, n),
                        0.0,
                        &mut gb.data,
                        0,
                        n,
                    );
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::MatMulBt(a, b) => {
                    // out = a·bᵀ: ga = g·b, gb = gᵀ·a
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (m, k, n) = (av.rows, av.cols, bv.rows);
                    let mut ga = Tensor::zeros(m, k);
                    gemm(
                        m,
                        n,
                        k,
                        1.0,
                        View::rows(&g.data, 0, n),
                        View::rows(&bv.data, 0, k),
                        0.0,
                        &mut ga.data,
                        0,
                        k,
                    );
                    let mut gb = Tensor::zeros(n, k);
                    gemm(
                        n,
                        m,
                        k,
                        1.0,
                        View::transposed(&g.data, 0, n),
                        View::rows(&av.data, 0, k),
                        0.0,
                        &mut gb.data,
                        0,
                        k,
                    );
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::AddRow(a, row) => {
                    let mut gr = Tensor::zeros(1, g.cols);
                    for r in 0..g.rows {
                        for (acc, x) in gr.data.iter_mut().zip(g.row(r)) {
                            *acc += x;
                        }
                    }
                    accumulate(&mut grads, *row, gr);
                    accumulate(&mut grads, *a, g);
                }
                Op::Scale(a, s) => {
                    let mut ga = g;
                    ga.data.iter_mut().for_each(|x| *x *= s);
                    accumulate(&mut grads, *a, ga);
                }
                Op::Relu(a) => {
                    let av = self.value(*a);
                    let mut ga = g;
                    for (x, &inp) in ga.data.iter_mut().zip(&av.data) {
                        if inp <= 0.0 {
                            *x = 0.0;
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::Sigmoid(a) => {
                    let mut ga = g;
                    for (x, &y) in ga.data.iter_mut().zip(&node.value.data) {
                        *x *= y * (1.0 - y);
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::Softmax(a) => {
                    let y = &node.value;
                    let mut ga = g;
                    for r in 0..y.rows {
                        let yr = y.row(r);
                        let gr = ga.row_mut(r);
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for (x, &p) in gr.iter_mut().zip(yr) {
                            *x = p * (*x - dot);
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    let gv = self.value(*gain);
                    let n = g.cols;
                    let mut gx = Tensor::zeros(g.rows, n);
                    let mut gg = Tensor::zeros(1, n);
                    let mut gb = Tensor::zeros(1, n);
                    let mut dxhat = vec![0.0; n];
                    for r in 0..g.rows {
                        let gr = g.row(r);
                        let xh = &xhat[r * n..(r + 1) * n];
                        let mut sum_d = 0.0;
                        let mut sum_dx = 0.0;
                        for j in 0..n {
                            gg.data[j] += gr[j] * xh[j];
                            gb.data[j] += gr[j];
                            dxhat[j] = gr[j] * gv.data[j];
                            sum_d += dxhat[j];
                            sum_dx += dxhat[j] * xh[j];
                        }
                        let inv = inv_std[r] / n as f64;
                        let out = gx.row_mut(r);
                        for j in 0..n {
                            out[j] = inv * (n as f64 * dxhat[j] - sum_d - xh[j] * sum_dx);
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                    accumulate(&mut grads, *gain, gg);
                    accumulate(&mut grads, *bias, gb);
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    heads,
                    layout,
                    probs,
                } => {
                    let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                    let d = qv.cols;
                    let dh = d / heads;
                    let scale = 1.0 / (dh as f64).sqrt();
                    let mut gq = Tensor::zeros(qv.rows, d);
                    let mut gk = Tensor::zeros(kv.rows, d);
                    let mut gv = Tensor::zeros(vv.rows, d);
                    let mut off = 0;
                    let mut dp = Vec::new();
                    for seg in &layout.segments {
                        let (ql, kl) = (seg.q_len, seg.k_len);
                        for h in 0..*heads {
                            let p = &probs[off..off + ql * kl];
                            off += ql * kl;
                            let q_off = seg.q_start * d + h * dh;
                            let k_off = seg.k_start * d + h * dh;
                            // gV += Pᵀ·gO
                            gemm(
                                kl,
                                ql,
                                dh,
                                1.0,
                                View::transposed(p, 0, kl),
                                View::rows(&g.data, q_off, d),
                                1.0,
                                &mut gv.data,
                                k_off,
                                d,
                            );
                            // gP = gO·Vᵀ
                            dp.clear();
                            dp.resize(ql * kl, 0.0);
                            gemm(
                                ql,
                                dh,
                                kl,
                                1.0,
                                View::rows(&g.data, q_off, d),
                                View::transposed(&vv.data, k_off, d),
                                0.0,
                                &mut dp,
                                0,
                                kl,
                            );
                            for i in 0..ql {
                                let pr = &p[i * kl..(i + 1) * kl];
                                let dr = &mut dp[i * kl..(i + 1) * kl];
                                let dot: f64 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
                                for (x, &pp) in dr.iter_mut().zip(pr) {
                                    *x = pp * (*x - dot) * scale;
                                }
                            }
                            gemm(
                                ql,
                                kl,
                                dh,
                                1.0,
                                View::rows(&dp, 0, kl),
                                View::rows(&kv.data, k_off, d),
                                1.0,
                                &mut gq.data,
                                q_off,
                                d,
                            );
                            gemm(
                                kl,
                                ql,
                                dh,
                                1.0,
                                View::transposed(&dp, 0, kl),
                                View::rows(&qv.data, q_off, d),
                                1.0,
                                &mut gk.data,
                                k_off,
                                d,
                            );
                        }
                    }
                    accumulate(&mut grads, *q, gq);
                    accumulate(&mut grads, *k, gk);
                    accumulate(&mut grads, *v, gv);
                }
                Op::Gather { table, rows } => {
                    let tv = self.value(*table);
                    let mut gt = Tensor::zeros(tv.rows, tv.cols);
                    for (i, &r) in rows.iter().enumerate() {
                        for (acc, x) in gt.row_mut(r).iter_mut().zip(g.row(i)) {
                            *acc += x;
                        }
                    }
                    accumulate(&mut grads, *table, gt);
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    weights,
                    probs,
                } => {
                    let up = g.item();
                    let lv = self.value(*logits);
                    let mut gl = Tensor::new(lv.rows, lv.cols, probs.clone());
                    for r in 0..lv.rows {
                        let w = weights[r] * up;
                        let row = gl.row_mut(r);
                        row[targets[r]] -= 1.0;
                        row.iter_mut().for_each(|x| *x *= w);
                    }
                    accumulate(&mut grads, *logits, gl);
                }
                Op::Bce {
                    scores,
                    labels,
                    weights,
                } => {
                    let up = g.item();
                    let sv = self.value(*scores);
                    let data = sv
                        .data
                        .iter()
                        .zip(labels)
                        .zip(weights)
                        .map(|((&s, &y), &w)| up * w * (sigmoid(s) - y))
                        .collect();
                    accumulate(&mut grads, *scores, Tensor::new(sv.rows, sv.cols, data));
                }
                Op::Dot(a, b) => {
                    let up = g.item();
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let ga =
                        Tensor::new(bv.rows, bv.cols, bv.data.iter().map(|x| x * up).collect());
                    let gb =
                        Tensor::new(av.rows, av.cols, av.data.iter().map(|x| x * up).collect());
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Sum(a) => {
                    let up = g.item();
                    let av = self.value(*a);
                    accumulate(
                        &mut grads,
                        *a,
                        Tensor::new(av.rows, av.cols, vec![up; av.len()]),
                    );
                }
            }
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if let Some(g) = &grads[i] {
                if !g.is_finite() {
                    return Err(Error::NonFinite {
                        op: format!("gradient of {}", node.op.name()),
                    });
                }
            }
        }
        if let Some((i, _)) = param_grads.iter().enumerate().find(|(_, g)| !g.is_finite()) {
            return Err(Error::NonFinite {
                op: format!("gradient of parameter {}", self.params.name(i)),
            });
        }
        Ok(Gradients {
            params: param_grads,
            vars: grads,
        })
    }
}
