// SPDX-License-Identifier: MIT OR Apache-2.0

//! Tape-based reverse-mode automatic differentiation.
//!
//! Every operation appends a node holding its output value and whatever it
//! needs for the backward pass. Nodes are created in evaluation order, so the
//! tape is topologically sorted by construction and [`Tape::backward`] is a
//! single reverse sweep. A node needs a gradient iff one of its inputs does;
//! subgraphs hanging only off frozen leaves are never visited on the way back.

use std::borrow::Cow;

use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{matmul_into, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    /// Tanh approximation: `0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))`.
    Gelu,
}

impl Activation {
    const GELU_COEFF: f64 = 0.044_715;
    // √(2/π)
    const GELU_SCALE: f64 = 0.797_884_560_802_865_4;

    pub fn apply<S: Scalar>(self, x: S) -> S {
        match self {
            Activation::Relu => {
                if x > S::zero() {
                    x
                } else {
                    S::zero()
                }
            }
            Activation::Gelu => {
                let c = S::lit(Self::GELU_SCALE);
                let inner = c * (x + S::lit(Self::GELU_COEFF) * x * x * x);
                S::lit(0.5) * x * (S::one() + inner.tanh())
            }
        }
    }

    pub fn derivative<S: Scalar>(self, x: S) -> S {
        match self {
            Activation::Relu => {
                if x > S::zero() {
                    S::one()
                } else {
                    S::zero()
                }
            }
            Activation::Gelu => {
                let c = S::lit(Self::GELU_SCALE);
                let k = S::lit(Self::GELU_COEFF);
                let t = (c * (x + k * x * x * x)).tanh();
                let half = S::lit(0.5);
                half * (S::one() + t)
                    + half * x * (S::one() - t * t) * c * (S::one() + S::lit(3.0) * k * x * x)
            }
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Gelu => "gelu",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "relu" => Some(Activation::Relu),
            "gelu" => Some(Activation::Gelu),
            _ => None,
        }
    }
}

/// One packed sequence pair inside a batched attention call: query rows
/// `[q_start, q_start + q_len)` attend to key rows `[k_start, k_start + k_len)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub q_start: usize,
    pub q_len: usize,
    pub k_start: usize,
    pub k_len: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionLayout {
    pub heads: usize,
    /// Query position `i` may only see key positions `≤ i` within its segment.
    pub causal: bool,
    pub segments: Vec<Segment>,
}

impl AttentionLayout {
    /// Self-attention over sequences packed back to back.
    pub fn packed(lengths: &[usize], heads: usize, causal: bool) -> Self {
        let mut start = 0;
        let segments = lengths
            .iter()
            .map(|&len| {
                let s = Segment {
                    q_start: start,
                    q_len: len,
                    k_start: start,
                    k_len: len,
                };
                start += len;
                s
            })
            .collect();
        Self {
            heads,
            causal,
            segments,
        }
    }

    /// Cross-attention: query sequence `i` attends to memory sequence `i`.
    pub fn cross(q_lengths: &[usize], k_lengths: &[usize], heads: usize) -> Self {
        assert_eq!(q_lengths.len(), k_lengths.len());
        let (mut qs, mut ks) = (0, 0);
        let segments = q_lengths
            .iter()
            .zip(k_lengths)
            .map(|(&ql, &kl)| {
                let s = Segment {
                    q_start: qs,
                    q_len: ql,
                    k_start: ks,
                    k_len: kl,
                };
                qs += ql;
                ks += kl;
                s
            })
            .collect();
        Self {
            heads,
            causal: false,
            segments,
        }
    }
}

enum Op<S> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        b_transposed: bool,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, S),
    Sum(Var),
    Softmax(Var),
    Act(Var, Activation),
    LayerNorm {
        x: Var,
        gain: Var,
        normed: Vec<S>,
        rstd: Vec<S>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        layout: AttentionLayout,
        probs: Vec<S>,
    },
    Dropout {
        x: Var,
        mask: Vec<S>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        ignore: usize,
        probs: Vec<S>,
        count: usize,
    },
}

struct Node<'a, S: Scalar> {
    value: Cow<'a, Tensor<S>>,
    op: Op<S>,
    needs_grad: bool,
}

/// Records one forward computation and differentiates it.
pub struct Tape<'a, S: Scalar> {
    nodes: Vec<Node<'a, S>>,
    grads: Vec<Option<Vec<S>>>,
    done: bool,
}

impl<S: Scalar> Default for Tape<'_, S> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    Error::Shape {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

impl<'a, S: Scalar> Tape<'a, S> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Registers an owned input. Gradient tracking follows `tensor.requires_grad()`.
    pub fn leaf(&mut self, mut tensor: Tensor<S>) -> Var {
        let needs = tensor.requires_grad();
        tensor.clear_grad();
        self.push(tensor, Op::Leaf, needs)
    }

    /// Registers a borrowed input (typically a model parameter) without copying it.
    pub fn leaf_ref(&mut self, tensor: &'a Tensor<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Cow::Borrowed(tensor),
            op: Op::Leaf,
            needs_grad: requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Registers an input that never receives a gradient.
    pub fn constant(&mut self, mut tensor: Tensor<S>) -> Var {
        tensor.clear_grad();
        self.push(tensor, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Gradient from the backward pass with respect to `v`, present for every
    /// node that needs one and is reachable from the loss.
    pub fn grad(&self, v: Var) -> Option<&[S]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<S>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }

    fn dims2(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    /// Matrix product `a·b`, with `a: m×k`, `b: k×n`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// Matrix product `a·bᵀ`, with `a: m×k`, `b: n×k`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, b_transposed: bool) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 {
            return Err(shape_err("matmul", sa, sb));
        }
        let (m, k) = (sa[0], sa[1]);
        let (bk, n) = if b_transposed { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != bk {
            return Err(shape_err("matmul", sa, sb));
        }
        let mut out = vec![S::zero(); m * n];
        matmul_into(
            self.value(a).data(),
            m,
            k,
            self.value(b).data(),
            n,
            b_transposed,
            &mut out,
        );
        let needs = self.needs(a) || self.needs(b);
        let t = Tensor::matrix(m, n, out)?;
        Ok(self.push(t, Op::MatMul { a, b, b_transposed }, needs))
    }

    fn elementwise(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(S, S) -> S,
    ) -> Result<Tensor<S>> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(name, ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.elementwise("add", a, b, |x, y| x + y)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::Add(a, b), needs))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.elementwise("mul", a, b, |x, y| x * y)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::Mul(a, b), needs))
    }

    pub fn scale(&mut self, a: Var, factor: S) -> Var {
        let ta = self.value(a);
        let data = ta.data().iter().map(|&x| x * factor).collect();
        let t = Tensor::new(ta.shape().to_vec(), data).expect("same shape");
        let needs = self.needs(a);
        self.push(t, Op::Scale(a, factor), needs)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum();
        let needs = self.needs(a);
        self.push(Tensor::scalar(s), Op::Sum(a), needs)
    }

    /// Softmax along the last dimension, computed after subtracting the row max.
    pub fn row_softmax(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let mut data = ta.data().to_vec();
        let cols = ta.cols();
        if cols > 0 {
            for row in data.chunks_mut(cols) {
                softmax_in_place(row);
            }
        }
        let t = Tensor::new(ta.shape().to_vec(), data).expect("same shape");
        let needs = self.needs(a);
        self.push(t, Op::Softmax(a), needs)
    }

    pub fn act(&mut self, a: Var, kind: Activation) -> Var {
        let ta = self.value(a);
        let data = ta.data().iter().map(|&x| kind.apply(x)).collect();
        let t = Tensor::new(ta.shape().to_vec(), data).expect("same shape");
        let needs = self.needs(a);
        self.push(t, Op::Act(a, kind), needs)
    }

    /// Normalizes each last-dimension row to zero mean and unit variance
    /// (`(x - μ) / √(σ² + eps)`, biased variance), then scales by `gain`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, eps: S) -> Result<Var> {
        let (tx, tg) = (self.value(x), self.value(gain));
        let d = tx.cols();
        if tg.len() != d {
            return Err(shape_err("layer_norm", tx.shape(), tg.shape()));
        }
        let rows = tx.rows();
        let inv_d = S::one() / S::lit(d as f64);
        let mut normed = vec![S::zero(); rows * d];
        let mut rstd = vec![S::zero(); rows];
        let mut out = vec![S::zero(); rows * d];
        for r in 0..rows {
            let row = tx.row(r);
            let mean = row.iter().copied().sum::<S>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() * inv_d;
            let rs = S::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let n = (row[j] - mean) * rs;
                normed[r * d + j] = n;
                out[r * d + j] = n * tg.data()[j];
            }
        }
        let t = Tensor::new(tx.shape().to_vec(), out)?;
        let needs = self.needs(x) || self.needs(gain);
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                normed,
                rstd,
            },
            needs,
        ))
    }

    /// Row lookup: output row `i` is `table[ids[i], :]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        let (rows, d) = (tt.rows(), tt.cols());
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= rows {
                return Err(Error::contract(format!(
                    "token id {id} out of range for table with {rows} rows"
                )));
            }
            out.extend_from_slice(tt.row(id));
        }
        let t = Tensor::matrix(ids.len(), d, out)?;
        let needs = self.needs(table);
        Ok(self.push(
            t,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            needs,
        ))
    }

    /// Multi-head scaled dot-product attention over packed sequences.
    ///
    /// `q` is `[Tq × d]`, `k` and `v` are `[Tk × d]`; head `h` uses columns
    /// `[h·d/n, (h+1)·d/n)`. Scores are scaled by `1/√(d/n)`. Output is the
    /// concatenation of per-head results, `[Tq × d]`, before any output projection.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, layout: AttentionLayout) -> Result<Var> {
        let (tq, d) = self.dims2(q);
        let (tk, dk) = self.dims2(k);
        let (tv, dv) = self.dims2(v);
        if dk != d || dv != d || tv != tk {
            return Err(shape_err("attention", self.value(q).shape(), self.value(k).shape()));
        }
        if layout.heads == 0 || d % layout.heads != 0 {
            return Err(Error::contract(format!(
                "{} heads do not divide model dim {d}",
                layout.heads
            )));
        }
        for s in &layout.segments {
            if s.q_start + s.q_len > tq || s.k_start + s.k_len > tk {
                return Err(Error::contract("attention segment out of range"));
            }
            if layout.causal && s.q_len != s.k_len {
                return Err(Error::contract("causal attention needs square segments"));
            }
            if s.q_len > 0 && s.k_len == 0 {
                return Err(Error::contract("attention segment with no keys"));
            }
        }
        let dh = d / layout.heads;
        let scale = S::one() / S::lit(dh as f64).sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut out = vec![S::zero(); tq * d];
        let prob_len: usize = layout
            .segments
            .iter()
            .map(|s| s.q_len * s.k_len * layout.heads)
            .sum();
        let mut probs = Vec::with_capacity(prob_len);
        let mut scores = Vec::new();
        for s in &layout.segments {
            for h in 0..layout.heads {
                let c0 = h * dh;
                for i in 0..s.q_len {
                    let qrow = &qd[(s.q_start + i) * d + c0..(s.q_start + i) * d + c0 + dh];
                    let visible = if layout.causal { i + 1 } else { s.k_len };
                    scores.clear();
                    for j in 0..s.k_len {
                        if j < visible {
                            let krow = &kd[(s.k_start + j) * d + c0..(s.k_start + j) * d + c0 + dh];
                            let dot: S = qrow.iter().zip(krow).map(|(&a, &b)| a * b).sum();
                            scores.push(dot * scale);
                        } else {
                            scores.push(S::neg_infinity());
                        }
                    }
                    softmax_in_place(&mut scores);
                    let orow = &mut out[(s.q_start + i) * d + c0..(s.q_start + i) * d + c0 + dh];
                    for (j, &p) in scores.iter().enumerate() {
                        if p != S::zero() {
                            let vrow = &vd[(s.k_start + j) * d + c0..(s.k_start + j) * d + c0 + dh];
                            for (o, &x) in orow.iter_mut().zip(vrow) {
                                *o += p * x;
                            }
                        }
                    }
                    probs.extend_from_slice(&scores);
                }
            }
        }
        let t = Tensor::matrix(tq, d, out)?;
        let needs = self.needs(q) || self.needs(k) || self.needs(v);
        Ok(self.push(
            t,
            Op::Attention {
                q,
                k,
                v,
                layout,
                probs,
            },
            needs,
        ))
    }

    /// Inverted dropout: zeroes each element with probability `p` and scales
    /// survivors by `1/(1-p)`. Returns `x` unchanged when `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, rng: &mut R) -> Var {
        if p <= 0.0 {
            return x;
        }
        let keep = S::lit(1.0 / (1.0 - p));
        let tx = self.value(x);
        let mask: Vec<S> = (0..tx.len())
            .map(|_| if rng.random::<f64>() < p { S::zero() } else { keep })
            .collect();
        let data = tx.data().iter().zip(&mask).map(|(&a, &m)| a * m).collect();
        let t = Tensor::new(tx.shape().to_vec(), data).expect("same shape");
        let needs = self.needs(x);
        self.push(t, Op::Dropout { x, mask }, needs)
    }

    /// Mean negative log-softmax over rows whose target is not `ignore`.
    /// With every row ignored the loss is 0 and so is its gradient.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], ignore: usize) -> Result<Var> {
        let tl = self.value(logits);
        let (rows, vocab) = (tl.rows(), tl.cols());
        if targets.len() != rows {
            return Err(shape_err("cross_entropy", tl.shape(), &[targets.len()]));
        }
        let mut probs = tl.data().to_vec();
        let mut total = S::zero();
        let mut count = 0usize;
        for (r, &t) in targets.iter().enumerate() {
            let row = &mut probs[r * vocab..(r + 1) * vocab];
            softmax_in_place(row);
            if t == ignore {
                continue;
            }
            if t >= vocab {
                return Err(Error::contract(format!("target {t} outside vocabulary of {vocab}")));
            }
            // log p_t = z_t - logsumexp(z), evaluated stably from the logits.
            let z = tl.row(r);
            let max = z.iter().copied().fold(S::neg_infinity(), S::max);
            let lse = max + z.iter().map(|&x| (x - max).exp()).sum::<S>().ln();
            total += lse - z[t];
            count += 1;
        }
        let loss = if count == 0 {
            S::zero()
        } else {
            total / S::lit(count as f64)
        };
        let needs = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                ignore,
                probs,
                count,
            },
            needs,
        ))
    }

    /// Reverse sweep from a scalar `loss`. Afterwards every node that needs a
    /// gradient carries one (see [`Tape::grad`]); uses of a value accumulate.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.done {
            return Err(Error::contract("backward already ran on this tape"));
        }
        if loss.0 >= self.nodes.len() {
            return Err(Error::contract("loss is not on this tape"));
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        self.done = true;
        let mut grads: Vec<Option<Vec<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].needs_grad {
            return Ok(());
        }
        grads[loss.0] = Some(vec![S::one()]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else {
                continue;
            };
            self.backprop_node(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn backprop_node(&self, id: usize, g: &[S], grads: &mut [Option<Vec<S>>]) {
        let node = &self.nodes[id];
        let needs = |v: Var| self.nodes[v.0].needs_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, b_transposed } => {
                let (m, k) = self.dims2(*a);
                let n = node.value.cols();
                let ad = self.value(*a).data();
                let bd = self.value(*b).data();
                if needs(*a) {
                    // dA = dC·Bᵀ (or dC·B when B was used transposed)
                    let acc = grad_slot(grads, *a, m * k);
                    let b_str = if *b_transposed { (k, 1) } else { (1, n) };
                    S::gemm(m, n, k, S::one(), g, (n, 1), bd, b_str, S::one(), acc, (k, 1));
                }
                if needs(*b) {
                    let acc = grad_slot(grads, *b, k * n);
                    if *b_transposed {
                        // B is n×k: dB = dCᵀ·A
                        S::gemm(n, m, k, S::one(), g, (1, n), ad, (k, 1), S::one(), acc, (k, 1));
                    } else {
                        // dB = Aᵀ·dC
                        S::gemm(k, m, n, S::one(), ad, (1, k), g, (n, 1), S::one(), acc, (n, 1));
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if needs(v) {
                        let acc = grad_slot(grads, v, g.len());
                        acc.iter_mut().zip(g).for_each(|(x, &y)| *x += y);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if needs(*a) {
                    let acc = grad_slot(grads, *a, g.len());
                    for i in 0..g.len() {
                        acc[i] += g[i] * bv[i];
                    }
                }
                if needs(*b) {
                    let acc = grad_slot(grads, *b, g.len());
                    for i in 0..g.len() {
                        acc[i] += g[i] * av[i];
                    }
                }
            }
            Op::Scale(a, c) => {
                if needs(*a) {
                    let acc = grad_slot(grads, *a, g.len());
                    acc.iter_mut().zip(g).for_each(|(x, &y)| *x += y * *c);
                }
            }
            Op::Sum(a) => {
                if needs(*a) {
                    let n = self.value(*a).len();
                    let acc = grad_slot(grads, *a, n);
                    acc.iter_mut().for_each(|x| *x += g[0]);
                }
            }
            Op::Softmax(a) => {
                if needs(*a) {
                    let y = node.value.data();
                    let cols = node.value.cols();
                    let acc = grad_slot(grads, *a, y.len());
                    for r in 0..node.value.rows() {
                        let (yr, gr) = (&y[r * cols..(r + 1) * cols], &g[r * cols..(r + 1) * cols]);
                        let dot: S = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                        for j in 0..cols {
                            acc[r * cols + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::Act(a, kind) => {
                if needs(*a) {
                    let x = self.value(*a).data();
                    let acc = grad_slot(grads, *a, x.len());
                    for i in 0..x.len() {
                        acc[i] += g[i] * kind.derivative(x[i]);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                normed,
                rstd,
            } => {
                let d = self.value(*x).cols();
                let rows = rstd.len();
                let gv = self.value(*gain).data();
                if needs(*gain) {
                    let acc = grad_slot(grads, *gain, d);
                    for r in 0..rows {
                        for j in 0..d {
                            acc[j] += g[r * d + j] * normed[r * d + j];
                        }
                    }
                }
                if needs(*x) {
                    let acc = grad_slot(grads, *x, rows * d);
                    let inv_d = S::one() / S::lit(d as f64);
                    for r in 0..rows {
                        let (gr, nr) = (&g[r * d..(r + 1) * d], &normed[r * d..(r + 1) * d]);
                        let mut mean_dn = S::zero();
                        let mut mean_dn_n = S::zero();
                        for j in 0..d {
                            let dn = gr[j] * gv[j];
                            mean_dn += dn;
                            mean_dn_n += dn * nr[j];
                        }
                        mean_dn *= inv_d;
                        mean_dn_n *= inv_d;
                        for j in 0..d {
                            let dn = gr[j] * gv[j];
                            acc[r * d + j] += rstd[r] * (dn - mean_dn - nr[j] * mean_dn_n);
                        }
                    }
                }
            }
            Op::Gather { table, ids } => {
                if needs(*table) {
                    let d = node.value.cols();
                    let n = self.value(*table).len();
                    let acc = grad_slot(grads, *table, n);
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            acc[id * d + j] += g[r * d + j];
                        }
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                layout,
                probs,
            } => self.backprop_attention(*q, *k, *v, layout, probs, g, grads),
            Op::Dropout { x, mask } => {
                if needs(*x) {
                    let acc = grad_slot(grads, *x, g.len());
                    for i in 0..g.len() {
                        acc[i] += g[i] * mask[i];
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                ignore,
                probs,
                count,
            } => {
                if needs(*logits) && *count > 0 {
                    let vocab = self.value(*logits).cols();
                    let acc = grad_slot(grads, *logits, probs.len());
                    let w = g[0] / S::lit(*count as f64);
                    for (r, &t) in targets.iter().enumerate() {
                        if t == *ignore {
                            continue;
                        }
                        for j in 0..vocab {
                            let onehot = if j == t { S::one() } else { S::zero() };
                            acc[r * vocab + j] += w * (probs[r * vocab + j] - onehot);
                        }
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backprop_attention(
        &self,
        q: Var,
        k: Var,
        v: Var,
        layout: &AttentionLayout,
        probs: &[S],
        g: &[S],
        grads: &mut [Option<Vec<S>>],
    ) {
        let needs = |x: Var| self.nodes[x.0].needs_grad;
        let (tq, d) = self.dims2(q);
        let tk = self.value(k).rows();
        let dh = d / layout.heads;
        let scale = S::one() / S::lit(dh as f64).sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut dq = needs(q).then(|| vec![S::zero(); tq * d]);
        let mut dk = needs(k).then(|| vec![S::zero(); tk * d]);
        let mut dv = needs(v).then(|| vec![S::zero(); tk * d]);
        let mut offset = 0;
        let mut dscore = Vec::new();
        for s in &layout.segments {
            for h in 0..layout.heads {
                let c0 = h * dh;
                for i in 0..s.q_len {
                    let p = &probs[offset..offset + s.k_len];
                    offset += s.k_len;
                    let qi = (s.q_start + i) * d + c0;
                    let go = &g[qi..qi + dh];
                    // dP_j = dO · v_j ; dV_j += P_j · dO
                    dscore.clear();
                    for (j, &pj) in p.iter().enumerate() {
                        let kj = (s.k_start + j) * d + c0;
                        let vrow = &vd[kj..kj + dh];
                        dscore.push(go.iter().zip(vrow).map(|(&a, &b)| a * b).sum::<S>());
                        if let Some(dv) = dv.as_mut() {
                            if pj != S::zero() {
                                for (x, &y) in dv[kj..kj + dh].iter_mut().zip(go) {
                                    *x += pj * y;
                                }
                            }
                        }
                    }
                    let dot: S = p.iter().zip(&dscore).map(|(&a, &b)| a * b).sum();
                    for (j, &pj) in p.iter().enumerate() {
                        let ds = pj * (dscore[j] - dot) * scale;
                        if ds == S::zero() {
                            continue;
                        }
                        let kj = (s.k_start + j) * d + c0;
                        if let Some(dq) = dq.as_mut() {
                            for (x, &y) in dq[qi..qi + dh].iter_mut().zip(&kd[kj..kj + dh]) {
                                *x += ds * y;
                            }
                        }
                        if let Some(dk) = dk.as_mut() {
                            for (x, &y) in dk[kj..kj + dh].iter_mut().zip(&qd[qi..qi + dh]) {
                                *x += ds * y;
                            }
                        }
                    }
                }
            }
        }
        for (var, local) in [(q, dq), (k, dk), (v, dv)] {
            if let Some(local) = local {
                let acc = grad_slot(grads, var, local.len());
                acc.iter_mut().zip(&local).for_each(|(x, &y)| *x += y);
            }
        }
    }
}

fn grad_slot<S: Scalar>(grads: &mut [Option<Vec<S>>], v: Var, len: usize) -> &mut [S] {
    grads[v.0].get_or_insert_with(|| vec![S::zero(); len])
}

/// Numerically stable softmax of one row. `-inf` entries map to exactly 0.
pub fn softmax_in_place<S: Scalar>(row: &mut [S]) {
    let max = row.iter().copied().fold(S::neg_infinity(), S::max);
    if max == S::neg_infinity() {
        return;
    }
    let mut total = S::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in row.iter_mut() {
        *x /= total;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[&[f64]]) -> Tensor<f64> {
        Tensor::from_rows(rows)
    }

    #[test]
    fn matmul_identity_and_dot() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(t(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let eye = tape.constant(t(&[&[1.0, 0.0], &[0.0, 1.0]]));
        let c = tape.matmul(a, eye).unwrap();
        assert_eq!(tape.value(c).data(), &[1.0, 2.0, 3.0, 4.0]);

        let row = tape.constant(t(&[&[1.0, 2.0]]));
        let col = tape.constant(t(&[&[3.0], &[4.0]]));
        let d = tape.matmul(row, col).unwrap();
        assert_eq!(tape.value(d).data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(vec![2, 3]));
        let b = tape.constant(Tensor::zeros(vec![4, 2]));
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[&[0.0, 0.0], &[1000.0, 1000.0], &[0.0, 3f64.ln()]]));
        let y = tape.row_softmax(x);
        let v = tape.value(y).data();
        for (got, want) in v.iter().zip([0.5, 0.5, 0.5, 0.5, 0.25, 0.75]) {
            assert!((got - want).abs() < 1e-15, "{got} vs {want}");
        }
    }

    #[test]
    fn activations() {
        assert_eq!(Activation::Relu.apply(-1.0f64), 0.0);
        assert_eq!(Activation::Relu.apply(2.0f64), 2.0);
        assert_eq!(Activation::Gelu.apply(0.0f64), 0.0);
        // 0.5·(1 + tanh(√(2/π)·1.044715))
        assert!((Activation::Gelu.apply(1.0f64) - 0.841_191_990_607_477_2).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_examples() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[&[3.0, 3.0, 3.0], &[1.0, -1.0, 0.0]]));
        let g = tape.constant(Tensor::vector(vec![1.0; 3]));
        let y = tape.layer_norm(x, g, 1e-5).unwrap();
        assert!(tape.value(y).row(0).iter().all(|&v| v == 0.0));

        let x2 = tape.constant(t(&[&[1.0, -1.0]]));
        let g2 = tape.constant(Tensor::vector(vec![1.0; 2]));
        let y2 = tape.layer_norm(x2, g2, 1e-300).unwrap();
        assert!((tape.value(y2).data()[0] - 1.0).abs() < 1e-12);
        assert!((tape.value(y2).data()[1] + 1.0).abs() < 1e-12);

        let g0 = tape.constant(Tensor::vector(vec![0.0; 2]));
        let y3 = tape.layer_norm(x2, g0, 1e-5).unwrap();
        assert!(tape.value(y3).data().iter().all(|&v| v == 0.0));

        let bad = tape.constant(Tensor::vector(vec![1.0; 4]));
        assert!(tape.layer_norm(x2, bad, 1e-5).is_err());
    }

    #[test]
    fn cross_entropy_examples() {
        let mut tape = Tape::<f64>::new();
        let uniform = tape.constant(Tensor::zeros(vec![1, 4]));
        let l = tape.cross_entropy(uniform, &[2], 99).unwrap();
        assert!((tape.value(l).item() - 4f64.ln()).abs() < 1e-15);

        let peaked = tape.constant(t(&[&[50.0, 0.0, 0.0]]));
        let l = tape.cross_entropy(peaked, &[0], 99).unwrap();
        assert!(tape.value(l).item() < 1e-9);

        let x = tape.leaf(Tensor::zeros(vec![2, 3]).with_grad());
        let l = tape.cross_entropy(x, &[7, 7], 7).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
        tape.backward(l).unwrap();
        assert!(tape.grad(x).is_none_or(|g| g.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn backward_square_and_accumulation() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::scalar(3.0).with_grad());
        let y = tape.mul(x, x).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[6.0]);

        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::scalar(2.0).with_grad());
        let b = tape.constant(Tensor::scalar(5.0));
        let c = tape.constant(Tensor::scalar(-7.0));
        let ab = tape.mul(a, b).unwrap();
        let ac = tape.mul(a, c).unwrap();
        let y = tape.add(ab, ac).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[-2.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_and_reuse() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros(vec![2]).with_grad());
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::scalar(1.0).with_grad());
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert!(tape.backward(s).is_err());
    }

    #[test]
    fn frozen_leaves_get_no_gradient() {
        let mut tape = Tape::<f64>::new();
        let w = tape.leaf(Tensor::from_rows(&[&[1.0, 2.0]]));
        let x = tape.leaf(Tensor::from_rows(&[&[3.0], &[4.0]]).with_grad());
        let y = tape.matmul(w, x).unwrap();
        tape.backward(y).unwrap();
        assert!(tape.grad(w).is_none());
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 2.0]);
    }

    #[test]
    fn causal_attention_hides_future() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[&[1.0, 0.0], &[0.0, 1.0], &[5.0, 5.0]]));
        let layout = AttentionLayout::packed(&[3], 1, true);
        let y = tape.attention(x, x, x, layout).unwrap();
        // first position sees only itself
        assert_eq!(tape.value(y).row(0), &[1.0, 0.0]);
    }
}
