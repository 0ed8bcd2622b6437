//! A small reverse-mode tape over row-major matrices.
//!
//! Each operation records its inputs and whatever it needs for the backward
//! pass. Nodes are appended in evaluation order, so a reverse sweep over the
//! node list is a valid topological order. Gradients are only propagated
//! into nodes that (transitively) depend on a leaf created with
//! `requires_grad = true`.

use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};

use crate::kernels::{
    decay_transform_scalar, sigmoid, wkv_sequence, wkv_sequence_backward, WkvSeqTrace,
};
use crate::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, T),
    Tanh(Var),
    Sigmoid(Var),
    Silu(Var),
    SqRelu(Var),
    Gelu(Var),
    Decay(Var),
    Norm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        xhat: Array2<T>,
        inv_std: Array2<T>,
    },
    ShiftRows(Var),
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    Wkv {
        r: Var,
        k: Var,
        v: Var,
        u: Var,
        w: Var,
        heads: usize,
        traces: Vec<WkvSeqTrace<T>>,
    },
    CausalAttention {
        q: Var,
        k: Var,
        v: Var,
        probs: Array2<T>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<T>,
        probs: Array2<T>,
    },
    WeightedSum {
        x: Var,
        weights: Array2<T>,
    },
}

struct Node<T> {
    value: Array2<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub const NORM_EPS: f64 = 1e-5;

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn gelu<T: Real>(x: T) -> T {
    let c = T::of((2.0 / std::f64::consts::PI).sqrt());
    let a = T::of(0.044_715);
    let half = T::of(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

fn gelu_grad<T: Real>(x: T) -> T {
    let c = T::of((2.0 / std::f64::consts::PI).sqrt());
    let a = T::of(0.044_715);
    let half = T::of(0.5);
    let inner = c * (x + a * x * x * x);
    let t = inner.tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::of(3.0) * a * x * x)
}

pub fn gelu_scalar<T: Real>(x: T) -> T {
    gelu(x)
}

/// Group normalization over the columns of each row: `groups` equal slices
/// are normalized independently, then scaled by `gamma` and shifted by `beta`.
/// Returns `(y, xhat, inv_std)`.
pub fn group_norm<T: Real>(
    x: ArrayView2<'_, T>,
    gamma: ndarray::ArrayView1<'_, T>,
    beta: ndarray::ArrayView1<'_, T>,
    groups: usize,
) -> (Array2<T>, Array2<T>, Array2<T>) {
    let (rows, cols) = x.dim();
    let width = cols / groups;
    let eps = T::of(NORM_EPS);
    let n = T::from_usize(width).expect("width");
    let mut xhat = Array2::zeros((rows, cols));
    let mut inv_std = Array2::zeros((rows, groups));
    for r in 0..rows {
        for g in 0..groups {
            let slice = x.slice(s![r, g * width..(g + 1) * width]);
            let mean = slice.sum() / n;
            let var = slice.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let inv = T::one() / (var + eps).sqrt();
            inv_std[[r, g]] = inv;
            for (j, &v) in slice.iter().enumerate() {
                xhat[[r, g * width + j]] = (v - mean) * inv;
            }
        }
    }
    let y = &(&xhat * &gamma) + &beta;
    (y, xhat, inv_std)
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Array2<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Array2<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Array2<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        self.push(value, Op::MatMul(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        self.push(value, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) - self.value(b);
        self.push(value, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) * self.value(b);
        self.push(value, Op::Mul(a, b), &[a, b])
    }

    /// `a + row`, broadcasting a `1 × n` row over every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let value = self.value(a) + self.value(row);
        self.push(value, Op::AddRow(a, row), &[a, row])
    }

    /// `a ⊙ row`, broadcasting a `1 × n` row over every row of `a`.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let value = self.value(a) * self.value(row);
        self.push(value, Op::MulRow(a, row), &[a, row])
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Var {
        let value = self.value(a) * factor;
        self.push(value, Op::Scale(a, factor), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x.tanh());
        self.push(value, Op::Tanh(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(sigmoid);
        self.push(value, Op::Sigmoid(a), &[a])
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x * sigmoid(x));
        self.push(value, Op::Silu(a), &[a])
    }

    /// `max(x, 0)²`
    pub fn sq_relu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| {
            let r = x.max(T::zero());
            r * r
        });
        self.push(value, Op::SqRelu(a), &[a])
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(gelu);
        self.push(value, Op::Gelu(a), &[a])
    }

    /// `exp(−exp(x))`
    pub fn decay(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(decay_transform_scalar);
        self.push(value, Op::Decay(a), &[a])
    }

    /// Full-width (`groups = 1`) or per-head layer normalization.
    pub fn norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Var {
        let (value, xhat, inv_std) = group_norm(
            self.value(x).view(),
            self.value(gamma).row(0),
            self.value(beta).row(0),
            groups,
        );
        self.push(
            value,
            Op::Norm {
                x,
                gamma,
                beta,
                groups,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        )
    }

    /// Row `t` of the result is row `t − 1` of the input; row 0 is zero.
    pub fn shift_rows(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let mut value = Array2::zeros(src.dim());
        if src.nrows() > 1 {
            value
                .slice_mut(s![1.., ..])
                .assign(&src.slice(s![..src.nrows() - 1, ..]));
        }
        self.push(value, Op::ShiftRows(a), &[a])
    }

    /// Row `i` of the result is row `idx[i]` of the input.
    pub fn gather_rows(&mut self, x: Var, idx: Vec<usize>) -> Var {
        let value = self.value(x).select(Axis(0), &idx);
        self.push(value, Op::GatherRows { x, idx }, &[x])
    }

    pub fn concat_rows(&mut self, parts: Vec<Var>) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let value = ndarray::concatenate(Axis(0), &views).expect("matching column counts");
        let inputs = parts.clone();
        self.push(value, Op::ConcatRows(parts), &inputs)
    }

    /// Multi-head WKV over a sequence. `r`, `k`, `v` are `T × D`; `u` is
    /// `1 × D`; `w` is either `T × D` (per-step decays) or `1 × D` (shared).
    /// Output row `t` is the concatenation over heads of `r_t·wkv_t`.
    pub fn wkv(&mut self, r: Var, k: Var, v: Var, u: Var, w: Var, heads: usize) -> Var {
        let (len, d) = self.value(k).dim();
        let n = d / heads;
        let wv = self.value(w);
        let w_full = if wv.nrows() == 1 && len != 1 {
            wv.broadcast((len, d)).expect("row broadcast").to_owned()
        } else {
            wv.clone()
        };
        let mut value = Array2::zeros((len, d));
        let mut traces = Vec::with_capacity(heads);
        for h in 0..heads {
            let cols = s![.., h * n..(h + 1) * n];
            let trace = wkv_sequence(
                self.value(r).slice(cols),
                self.value(k).slice(cols),
                self.value(v).slice(cols),
                self.value(u).slice(s![0, h * n..(h + 1) * n]),
                w_full.slice(cols),
            );
            value.slice_mut(cols).assign(&trace.y);
            traces.push(trace);
        }
        self.push(
            value,
            Op::Wkv {
                r,
                k,
                v,
                u,
                w,
                heads,
                traces,
            },
            &[r, k, v, u, w],
        )
    }

    /// Single-head causal attention `softmax(q·kᵀ/√d + mask)·v`.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var) -> Var {
        let probs = causal_probs(self.value(q).view(), self.value(k).view());
        let value = probs.dot(self.value(v));
        self.push(value, Op::CausalAttention { q, k, v, probs }, &[q, k, v])
    }

    /// `Σ_t weights[t] · (−log softmax(logits_t)[targets[t]])`; rows with zero
    /// weight do not contribute.
    pub fn cross_entropy(&mut self, logits: Var, targets: Vec<usize>, weights: Vec<T>) -> Var {
        let l = self.value(logits);
        assert_eq!(l.nrows(), targets.len());
        assert_eq!(l.nrows(), weights.len());
        let mut probs = Array2::zeros(l.dim());
        let mut loss = T::zero();
        for (t, row) in l.rows().into_iter().enumerate() {
            let max = row.fold(T::neg_infinity(), |m, &x| m.max(x));
            let exps = row.mapv(|x| (x - max).exp());
            let z = exps.sum();
            probs.row_mut(t).assign(&(&exps / z));
            if weights[t] != T::zero() {
                let logp = row[targets[t]] - max - z.ln();
                loss = loss - weights[t] * logp;
            }
        }
        let value = Array2::from_elem((1, 1), loss);
        self.push(
            value,
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                probs,
            },
            &[logits],
        )
    }

    /// `Σ x ⊙ weights` as a `1 × 1` scalar.
    pub fn weighted_sum(&mut self, x: Var, weights: Array2<T>) -> Var {
        let value = Array2::from_elem((1, 1), (self.value(x) * &weights).sum());
        self.push(value, Op::WeightedSum { x, weights }, &[x])
    }

    /// Reverse sweep from a `1 × 1` output. Returns gradients for every node
    /// that requires them.
    pub fn backward(&self, out: Var) -> TapeGrads<T> {
        let mut grads: Vec<Option<Array2<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        assert_eq!(
            self.value(out).dim(),
            (1, 1),
            "backward needs a scalar output"
        );
        grads[out.0] = Some(Array2::ones((1, 1)));
        for i in (0..=out.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.backprop(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        TapeGrads { grads }
    }

    fn backprop(&self, node: &Node<T>, g: &Array2<T>, grads: &mut [Option<Array2<T>>]) {
        let mut acc = |v: Var, delta: Array2<T>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => *existing += &delta,
                slot @ None => *slot = Some(delta),
            }
        };
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if needs(*a) {
                    acc(*a, g.dot(&self.value(*b).t()));
                }
                if needs(*b) {
                    acc(*b, self.value(*a).t().dot(g));
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                if needs(*b) {
                    acc(*b, g.mapv(|x| -x));
                }
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    acc(*a, g * self.value(*b));
                }
                if needs(*b) {
                    acc(*b, g * self.value(*a));
                }
            }
            Op::AddRow(a, row) => {
                acc(*a, g.clone());
                if needs(*row) {
                    acc(*row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::MulRow(a, row) => {
                if needs(*a) {
                    acc(*a, g * self.value(*row));
                }
                if needs(*row) {
                    let prod = g * self.value(*a);
                    acc(*row, prod.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::Scale(a, f) => acc(*a, g * *f),
            Op::Tanh(a) => {
                let d = Zip::from(g)
                    .and(&node.value)
                    .map_collect(|&g, &t| g * (T::one() - t * t));
                acc(*a, d);
            }
            Op::Sigmoid(a) => {
                let d = Zip::from(g)
                    .and(&node.value)
                    .map_collect(|&g, &s| g * s * (T::one() - s));
                acc(*a, d);
            }
            Op::Silu(a) => {
                let d = Zip::from(g).and(self.value(*a)).map_collect(|&g, &x| {
                    let s = sigmoid(x);
                    g * (s + x * s * (T::one() - s))
                });
                acc(*a, d);
            }
            Op::SqRelu(a) => {
                let two = T::one() + T::one();
                let d = Zip::from(g)
                    .and(self.value(*a))
                    .map_collect(|&g, &x| g * two * x.max(T::zero()));
                acc(*a, d);
            }
            Op::Gelu(a) => {
                let d = Zip::from(g)
                    .and(self.value(*a))
                    .map_collect(|&g, &x| g * gelu_grad(x));
                acc(*a, d);
            }
            Op::Decay(a) => {
                let d = Zip::from(g)
                    .and(self.value(*a))
                    .and(&node.value)
                    .map_collect(|&g, &x, &w| g * -(x.exp()) * w);
                acc(*a, d);
            }
            Op::Norm {
                x,
                gamma,
                beta,
                groups,
                xhat,
                inv_std,
            } => {
                if needs(*gamma) {
                    acc(*gamma, (g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                if needs(*beta) {
                    acc(*beta, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                if needs(*x) {
                    let dxhat = g * self.value(*gamma);
                    let (rows, cols) = dxhat.dim();
                    let width = cols / groups;
                    let n = T::from_usize(width).expect("width");
                    let mut dx = Array2::zeros((rows, cols));
                    for r in 0..rows {
                        for h in 0..*groups {
                            let span = h * width..(h + 1) * width;
                            let dh = dxhat.slice(s![r, span.clone()]);
                            let xh = xhat.slice(s![r, span.clone()]);
                            let sum_d = dh.sum();
                            let sum_dx = (&dh * &xh).sum();
                            let inv = inv_std[[r, h]];
                            for j in 0..width {
                                dx[[r, h * width + j]] =
                                    inv / n * (n * dh[j] - sum_d - xh[j] * sum_dx);
                            }
                        }
                    }
                    acc(*x, dx);
                }
            }
            Op::ShiftRows(a) => {
                let mut d = Array2::zeros(g.dim());
                let rows = g.nrows();
                if rows > 1 {
                    d.slice_mut(s![..rows - 1, ..])
                        .assign(&g.slice(s![1.., ..]));
                }
                acc(*a, d);
            }
            Op::GatherRows { x, idx } => {
                let mut d = Array2::zeros(self.value(*x).dim());
                for (i, &src) in idx.iter().enumerate() {
                    let mut row = d.row_mut(src);
                    row += &g.row(i);
                }
                acc(*x, d);
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for p in parts {
                    let rows = self.value(*p).nrows();
                    if needs(*p) {
                        acc(*p, g.slice(s![start..start + rows, ..]).to_owned());
                    }
                    start += rows;
                }
            }
            Op::Wkv {
                r,
                k,
                v,
                u,
                w,
                heads,
                traces,
            } => {
                let (len, d) = self.value(*k).dim();
                let n = d / heads;
                let wv = self.value(*w);
                let shared = wv.nrows() == 1 && len != 1;
                let w_full = if shared {
                    wv.broadcast((len, d)).expect("row broadcast").to_owned()
                } else {
                    wv.clone()
                };
                let mut dr = Array2::zeros((len, d));
                let mut dk = Array2::zeros((len, d));
                let mut dv = Array2::zeros((len, d));
                let mut du = Array2::zeros((1, d));
                let mut dw = Array2::zeros((len, d));
                for (h, trace) in traces.iter().enumerate() {
                    let cols = s![.., h * n..(h + 1) * n];
                    let hg = wkv_sequence_backward(
                        trace,
                        self.value(*r).slice(cols),
                        self.value(*k).slice(cols),
                        self.value(*v).slice(cols),
                        self.value(*u).slice(s![0, h * n..(h + 1) * n]),
                        w_full.slice(cols),
                        g.slice(cols),
                    );
                    dr.slice_mut(cols).assign(&hg.r);
                    dk.slice_mut(cols).assign(&hg.k);
                    dv.slice_mut(cols).assign(&hg.v);
                    du.slice_mut(s![0, h * n..(h + 1) * n]).assign(&hg.u);
                    dw.slice_mut(cols).assign(&hg.w);
                }
                acc(*r, dr);
                acc(*k, dk);
                acc(*v, dv);
                acc(*u, du);
                if shared {
                    acc(*w, dw.sum_axis(Axis(0)).insert_axis(Axis(0)));
                } else {
                    acc(*w, dw);
                }
            }
            Op::CausalAttention { q, k, v, probs } => {
                let dim = self.value(*q).ncols();
                let scale = T::one() / T::from_usize(dim).expect("dim").sqrt();
                if needs(*v) {
                    acc(*v, probs.t().dot(g));
                }
                let dp = g.dot(&self.value(*v).t());
                let row_dot: Array1<T> = (&dp * probs).sum_axis(Axis(1));
                let ds = Zip::from(&dp)
                    .and(probs)
                    .and_broadcast(&row_dot.insert_axis(Axis(1)))
                    .map_collect(|&dp, &p, &rd| p * (dp - rd) * scale);
                if needs(*q) {
                    acc(*q, ds.dot(self.value(*k)));
                }
                if needs(*k) {
                    acc(*k, ds.t().dot(self.value(*q)));
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                probs,
            } => {
                let scale = g[[0, 0]];
                let mut d = Array2::zeros(probs.dim());
                for (t, (&y, &w)) in targets.iter().zip(weights.iter()).enumerate() {
                    if w == T::zero() {
                        continue;
                    }
                    let mut row = d.row_mut(t);
                    row.assign(&(&probs.row(t) * (w * scale)));
                    row[y] = row[y] - w * scale;
                }
                acc(*logits, d);
            }
            Op::WeightedSum { x, weights } => acc(*x, weights * g[[0, 0]]),
        }
    }
}

/// Causal softmax attention probabilities for single-head `q`, `k`.
pub fn causal_probs<T: Real>(q: ArrayView2<'_, T>, k: ArrayView2<'_, T>) -> Array2<T> {
    let dim = q.ncols();
    let scale = T::one() / T::from_usize(dim).expect("dim").sqrt();
    let scores = q.dot(&k.t()) * scale;
    let len = scores.nrows();
    let mut probs = Array2::zeros((len, k.nrows()));
    for i in 0..len {
        let row = scores.slice(s![i, ..=i]);
        let max = row.fold(T::neg_infinity(), |m, &x| m.max(x));
        let exps = row.mapv(|x| (x - max).exp());
        let z = exps.sum();
        probs.slice_mut(s![i, ..=i]).assign(&(&exps / z));
    }
    probs
}

pub struct TapeGrads<T> {
    grads: Vec<Option<Array2<T>>>,
}

impl<T: Real> TapeGrads<T> {
    pub fn get(&self, v: Var) -> Option<&Array2<T>> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Array2<T>> {
        self.grads[v.0].take()
    }
}
