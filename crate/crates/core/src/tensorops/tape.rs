//! Reverse-mode differentiation over a fixed operator set.
//!
//! Every operation appends a node holding its forward value to the [`Tape`].
//! Node inputs always precede the node itself, so the tape is topologically
//! ordered by construction and [`Tape::backward`] is a single reverse sweep.

use std::sync::Arc;

use super::array::{gemm, DenseArray};
use crate::error::{Result, UfoError};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Swish,
    Sigmoid,
    Tanh,
    Softplus,
    Exp,
    Sqrt,
    Recip,
    Square,
}

impl Unary {
    fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Swish => x * sigmoid(x),
            Unary::Sigmoid => sigmoid(x),
            Unary::Tanh => x.tanh(),
            Unary::Softplus => softplus(x),
            Unary::Exp => x.exp(),
            Unary::Sqrt => x.sqrt(),
            Unary::Recip => 1.0 / x,
            Unary::Square => x * x,
        }
    }

    /// Derivative given the input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Swish => {
                let s = sigmoid(x);
                s + x * s * (1.0 - s)
            }
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Tanh => 1.0 - y * y,
            Unary::Softplus => sigmoid(x),
            Unary::Exp => y,
            Unary::Sqrt => 0.5 / y,
            Unary::Recip => -y * y,
            Unary::Square => 2.0 * x,
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.max(0.0) + (-x.abs()).exp().ln_1p()
    }
}

pub fn swish(x: f64) -> f64 {
    x * sigmoid(x)
}

/// Sparse row mixing: output row `r` is `Σ weight · input[index]` over the
/// entries of row `r`. Covers gathers, broadcasts, and kernel-weighted sums.
#[derive(Clone, Debug, Default)]
pub struct RowMixPlan {
    offsets: Vec<usize>,
    indices: Vec<usize>,
    weights: Vec<f64>,
}

impl RowMixPlan {
    pub fn new() -> Self {
        Self {
            offsets: vec![0],
            indices: Vec::new(),
            weights: Vec::new(),
        }
    }

    /// Appends one output row.
    pub fn push_row(&mut self, entries: impl IntoIterator<Item = (usize, f64)>) {
        for (i, w) in entries {
            self.indices.push(i);
            self.weights.push(w);
        }
        self.offsets.push(self.indices.len());
    }

    /// Plain gather: output row `r` copies input row `rows[r]`.
    pub fn gather(rows: &[usize]) -> Self {
        let mut plan = Self::new();
        for &r in rows {
            plan.push_row([(r, 1.0)]);
        }
        plan
    }

    pub fn out_rows(&self) -> usize {
        self.offsets.len() - 1
    }

    fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let (s, e) = (self.offsets[r], self.offsets[r + 1]);
        self.indices[s..e]
            .iter()
            .copied()
            .zip(self.weights[s..e].iter().copied())
    }

    fn max_index(&self) -> Option<usize> {
        self.indices.iter().copied().max()
    }
}

/// Layout of a fused multi-head attention call.
///
/// Queries are `q_groups` stacked sequences; keys/values are `kv_groups`
/// stacked sequences, with query group `g` reading key group
/// `g / (q_groups / kv_groups)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionLayout {
    pub heads: usize,
    pub causal: bool,
    pub q_groups: usize,
    pub kv_groups: usize,
}

#[derive(Debug)]
struct AttentionCache {
    q: Var,
    k: Var,
    v: Var,
    layout: AttentionLayout,
    tq: usize,
    tk: usize,
    probs: Vec<f64>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    RowScale(Var, Arc<Vec<f64>>),
    Unary(Var, Unary),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    Reshape(Var),
    RowNorm(Var, Vec<f64>),
    Softmax(Var),
    RowMix(Var, Arc<RowMixPlan>),
    GroupColMean(Var, usize),
    Attention(Box<AttentionCache>),
    Crps(Var, usize, usize, DenseArray),
    Sum(Var),
    Dot(Var, Arc<Vec<f64>>),
}

#[derive(Debug)]
struct Node {
    value: DenseArray,
    op: Op,
    requires_grad: bool,
}

/// Recording of a forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    first_nonfinite: Option<(usize, &'static str)>,
}

/// Adjoints produced by [`Tape::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<DenseArray>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&DenseArray> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, zero-filled when no path reaches it.
    pub fn wrt(&self, v: Var) -> DenseArray {
        match self.get(v) {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[v.0];
                DenseArray::zeros(r, c)
            }
        }
    }

    pub fn take(&mut self, v: Var) -> DenseArray {
        match self.grads[v.0].take() {
            Some(g) => g,
            None => {
                let (r, c) = self.shapes[v.0];
                DenseArray::zeros(r, c)
            }
        }
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

    pub fn value(&self, v: Var) -> &DenseArray {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Attention probabilities of an attention node, laid out as
    /// `[group][head][query][key]`.
    pub fn attention_probs(&self, v: Var) -> Option<(&[f64], AttentionLayout, usize, usize)> {
        match &self.nodes[v.0].op {
            Op::Attention(c) => Some((&c.probs, c.layout, c.tq, c.tk)),
            _ => None,
        }
    }

    /// Fails with a numeric-failure error if any recorded value is non-finite.
    pub fn check_finite(&self) -> Result<()> {
        match self.first_nonfinite {
            None => Ok(()),
            Some((idx, op)) => Err(UfoError::NumericFailure(format!(
                "non-finite value produced by `{op}` at tape node {idx}"
            ))),
        }
    }

    fn push(&mut self, value: DenseArray, op: Op, requires_grad: bool, name: &'static str) -> Var {
        let idx = self.nodes.len();
        if self.first_nonfinite.is_none() && !value.is_finite() {
            self.first_nonfinite = Some((idx, name));
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(idx)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Differentiable leaf (parameter or probed input).
    pub fn param(&mut self, value: DenseArray) -> Var {
        self.push(value, Op::Leaf, true, "param")
    }

    pub fn constant(&mut self, value: DenseArray) -> Var {
        self.push(value, Op::Leaf, false, "constant")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        assert_eq!(k, k2, "matmul inner dimension mismatch");
        let mut out = DenseArray::zeros(m, n);
        gemm(
            false,
            false,
            m,
            k,
            n,
            self.value(a).data(),
            self.value(b).data(),
            out.data_mut(),
            0.0,
        );
        let rg = self.rg(&[a, b]);
        self.push(out, Op::MatMul(a, b), rg, "matmul")
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> DenseArray {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "elementwise shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        DenseArray::from_vec(va.rows(), va.cols(), data).expect("shape preserved")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip_with(a, b, |x, y| x + y);
        let rg = self.rg(&[a, b]);
        self.push(out, Op::Add(a, b), rg, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip_with(a, b, |x, y| x - y);
        let rg = self.rg(&[a, b]);
        self.push(out, Op::Sub(a, b), rg, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip_with(a, b, |x, y| x * y);
        let rg = self.rg(&[a, b]);
        self.push(out, Op::Mul(a, b), rg, "mul")
    }

    /// `a + row` with `row` (1 × cols) broadcast over the rows of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let va = self.value(a);
        let vr = self.value(row);
        assert_eq!(vr.shape(), (1, va.cols()), "add_row expects a 1 x cols row");
        let mut out = va.clone();
        let cols = va.cols();
        for r in 0..va.rows() {
            for (x, b) in out.row_mut(r).iter_mut().zip(&vr.data()[..cols]) {
                *x += b;
            }
        }
        let rg = self.rg(&[a, row]);
        self.push(out, Op::AddRow(a, row), rg, "add_row")
    }

    /// `a ⊙ row` with `row` (1 × cols) broadcast over the rows of `a`.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let va = self.value(a);
        let vr = self.value(row);
        assert_eq!(vr.shape(), (1, va.cols()), "mul_row expects a 1 x cols row");
        let mut out = va.clone();
        for r in 0..va.rows() {
            for (x, b) in out.row_mut(r).iter_mut().zip(vr.data()) {
                *x *= b;
            }
        }
        let rg = self.rg(&[a, row]);
        self.push(out, Op::MulRow(a, row), rg, "mul_row")
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x * s);
        let rg = self.rg(&[a]);
        self.push(out, Op::Scale(a, s), rg, "scale")
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x + s);
        let rg = self.rg(&[a]);
        self.push(out, Op::AddScalar(a), rg, "add_scalar")
    }

    /// Multiplies row `r` of `a` by the constant `factors[r]`.
    pub fn row_scale(&mut self, a: Var, factors: Arc<Vec<f64>>) -> Var {
        let va = self.value(a);
        assert_eq!(factors.len(), va.rows(), "row_scale needs one factor per row");
        let mut out = va.clone();
        for (r, f) in factors.iter().enumerate() {
            for x in out.row_mut(r) {
                *x *= f;
            }
        }
        let rg = self.rg(&[a]);
        self.push(out, Op::RowScale(a, factors), rg, "row_scale")
    }

    pub fn unary(&mut self, a: Var, kind: Unary) -> Var {
        let out = self.value(a).map(|x| kind.apply(x));
        let rg = self.rg(&[a]);
        self.push(out, Op::Unary(a, kind), rg, "unary")
    }

    pub fn swish(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Swish)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Tanh)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Softplus)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let rows = self.shape(parts[0]).0;
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                let (r, c) = self.shape(p);
                assert_eq!(r, rows, "concat_cols row mismatch");
                c
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut out = DenseArray::zeros(rows, total);
        for r in 0..rows {
            let mut off = 0;
            for (&p, &w) in parts.iter().zip(&widths) {
                out.row_mut(r)[off..off + w].copy_from_slice(self.value(p).row(r));
                off += w;
            }
        }
        let rg = self.rg(parts);
        self.push(out, Op::ConcatCols(parts.to_vec()), rg, "concat_cols")
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let va = self.value(a);
        assert!(start <= end && end <= va.cols(), "slice_cols out of range");
        let mut out = DenseArray::zeros(va.rows(), end - start);
        for r in 0..va.rows() {
            out.row_mut(r).copy_from_slice(&va.row(r)[start..end]);
        }
        let rg = self.rg(&[a]);
        self.push(out, Op::SliceCols(a, start), rg, "slice_cols")
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let out = self
            .value(a)
            .clone()
            .reshaped(rows, cols)
            .expect("reshape must preserve element count");
        let rg = self.rg(&[a]);
        self.push(out, Op::Reshape(a), rg, "reshape")
    }

    /// Standardizes every row to zero mean and unit variance (no affine).
    pub fn row_norm(&mut self, a: Var, eps: f64) -> Var {
        let va = self.value(a);
        let cols = va.cols() as f64;
        let mut out = va.clone();
        let mut inv = Vec::with_capacity(va.rows());
        for r in 0..va.rows() {
            let row = out.row_mut(r);
            let mean = row.iter().sum::<f64>() / cols;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / cols;
            let is = 1.0 / (var + eps).sqrt();
            for x in row.iter_mut() {
                *x = (*x - mean) * is;
            }
            inv.push(is);
        }
        let rg = self.rg(&[a]);
        self.push(out, Op::RowNorm(a, inv), rg, "row_norm")
    }

    /// Softmax along each row.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let max = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            let mut z = 0.0;
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                z += *x;
            }
            for x in row.iter_mut() {
                *x /= z;
            }
        }
        let rg = self.rg(&[a]);
        self.push(out, Op::Softmax(a), rg, "softmax")
    }

    pub fn row_mix(&mut self, a: Var, plan: Arc<RowMixPlan>) -> Var {
        let va = self.value(a);
        if let Some(m) = plan.max_index() {
            assert!(m < va.rows(), "row_mix index out of range");
        }
        let cols = va.cols();
        let mut out = DenseArray::zeros(plan.out_rows(), cols);
        for r in 0..plan.out_rows() {
            let dst = &mut out.data_mut()[r * cols..(r + 1) * cols];
            for (i, w) in plan.row(r) {
                for (d, s) in dst.iter_mut().zip(va.row(i)) {
                    *d += w * s;
                }
            }
        }
        let rg = self.rg(&[a]);
        self.push(out, Op::RowMix(a, plan), rg, "row_mix")
    }

    /// Column means of `groups` equal contiguous row blocks: `groups × cols`.
    pub fn group_col_mean(&mut self, a: Var, groups: usize) -> Var {
        let va = self.value(a);
        assert!(groups > 0 && va.rows() % groups == 0, "rows must split into groups");
        let block = va.rows() / groups;
        let cols = va.cols();
        let mut out = DenseArray::zeros(groups, cols);
        for r in 0..va.rows() {
            let g = r / block;
            for c in 0..cols {
                let v = out.get(g, c) + va.get(r, c) / block as f64;
                out.set(g, c, v);
            }
        }
        let rg = self.rg(&[a]);
        self.push(out, Op::GroupColMean(a, groups), rg, "group_col_mean")
    }

    /// Scaled dot-product multi-head attention.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, layout: AttentionLayout) -> Var {
        let (qr, d) = self.shape(q);
        let (kr, dk) = self.shape(k);
        assert_eq!(self.shape(v), (kr, dk), "key/value shape mismatch");
        assert_eq!(d, dk, "query/key width mismatch");
        let AttentionLayout {
            heads,
            causal,
            q_groups,
            kv_groups,
        } = layout;
        assert!(heads > 0 && d % heads == 0, "width must split into heads");
        assert!(q_groups % kv_groups == 0, "query groups must be a multiple of kv groups");
        assert!(qr % q_groups == 0 && kr % kv_groups == 0, "rows must split into groups");
        let tq = qr / q_groups;
        let tk = kr / kv_groups;
        assert!(tk > 0, "attention over an empty key set");
        assert!(!causal || tq == tk, "causal attention needs equal lengths");
        let dh = d / heads;
        let ratio = q_groups / kv_groups;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut probs = vec![0.0; q_groups * heads * tq * tk];
        let mut out = DenseArray::zeros(qr, d);
        let mut scores = vec![0.0; tk];
        for g in 0..q_groups {
            let kg = g / ratio;
            for h in 0..heads {
                let c0 = h * dh;
                for i in 0..tq {
                    let qi = &qv.row(g * tq + i)[c0..c0 + dh];
                    let limit = if causal { i + 1 } else { tk };
                    let mut max = f64::NEG_INFINITY;
                    for (j, s) in scores.iter_mut().enumerate().take(limit) {
                        let kj = &kv.row(kg * tk + j)[c0..c0 + dh];
                        *s = scale * qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>();
                        max = max.max(*s);
                    }
                    let base = ((g * heads + h) * tq + i) * tk;
                    let mut z = 0.0;
                    for j in 0..limit {
                        let e = (scores[j] - max).exp();
                        probs[base + j] = e;
                        z += e;
                    }
                    let orow = &mut out.data_mut()[(g * tq + i) * d + c0..(g * tq + i) * d + c0 + dh];
                    for j in 0..limit {
                        let p = probs[base + j] / z;
                        probs[base + j] = p;
                        let vj = &vv.row(kg * tk + j)[c0..c0 + dh];
                        for (o, x) in orow.iter_mut().zip(vj) {
                            *o += p * x;
                        }
                    }
                }
            }
        }
        let rg = self.rg(&[q, k, v]);
        let cache = AttentionCache {
            q,
            k,
            v,
            layout,
            tq,
            tk,
            probs,
        };
        self.push(out, Op::Attention(Box::new(cache)), rg, "attention")
    }

    /// Per-cell sample CRPS of an ensemble.
    ///
    /// `samples` stacks `groups × members × steps` rows of `channels` columns
    /// (member-major inside each group); `truth` stacks `groups × steps` rows.
    /// The output has the shape of `truth`. The sort permutation is treated as
    /// locally constant in the backward pass.
    pub fn crps(&mut self, samples: Var, truth: &DenseArray, groups: usize, members: usize) -> Var {
        let vs = self.value(samples);
        let (rows, ch) = vs.shape();
        assert_eq!(truth.cols(), ch, "crps channel mismatch");
        assert!(members > 0 && groups > 0, "crps needs members and groups");
        assert_eq!(truth.rows() % groups, 0, "truth rows must split into groups");
        let steps = truth.rows() / groups;
        assert_eq!(rows, groups * members * steps, "crps row layout mismatch");
        let mut coeff = DenseArray::zeros(rows, ch);
        let mut out = DenseArray::zeros(truth.rows(), ch);
        let p = members as f64;
        let mut buf: Vec<(f64, usize)> = Vec::with_capacity(members);
        for g in 0..groups {
            for t in 0..steps {
                for c in 0..ch {
                    let y = truth.get(g * steps + t, c);
                    buf.clear();
                    for s in 0..members {
                        let r = (g * members + s) * steps + t;
                        buf.push((vs.get(r, c), r));
                    }
                    let val = crps_cell(&mut buf, y, p, |r, d| coeff.set(r, c, d));
                    out.set(g * steps + t, c, val);
                }
            }
        }
        let rg = self.rg(&[samples]);
        self.push(out, Op::Crps(samples, members, steps, coeff), rg, "crps")
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let rg = self.rg(&[a]);
        self.push(DenseArray::scalar(s), Op::Sum(a), rg, "sum")
    }

    /// `Σ a ⊙ weights` with constant weights, as a 1 × 1 result.
    pub fn dot_const(&mut self, a: Var, weights: Arc<Vec<f64>>) -> Var {
        let va = self.value(a);
        assert_eq!(weights.len(), va.len(), "dot weight count mismatch");
        let s = va.data().iter().zip(weights.iter()).map(|(x, w)| x * w).sum();
        let rg = self.rg(&[a]);
        self.push(DenseArray::scalar(s), Op::Dot(a, weights), rg, "dot")
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        self.check_finite()?;
        let n = self.nodes.len();
        if output.0 >= n {
            return Err(UfoError::Internal("output not recorded on this tape".into()));
        }
        if self.shape(output) != (1, 1) {
            return Err(UfoError::invalid("backward needs a scalar output"));
        }
        let shapes: Vec<_> = self.nodes.iter().map(|nd| nd.value.shape()).collect();
        let mut grads: Vec<Option<DenseArray>> = (0..n).map(|_| None).collect();
        grads[output.0] = Some(DenseArray::scalar(1.0));
        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            for input in self.inputs(idx) {
                if input.0 >= idx {
                    return Err(UfoError::Internal(format!(
                        "tape cycle: node {idx} reads node {}",
                        input.0
                    )));
                }
            }
            self.propagate(idx, &g, &mut grads, &shapes);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads, shapes })
    }

    fn inputs(&self, idx: usize) -> Vec<Var> {
        match &self.nodes[idx].op {
            Op::Leaf => vec![],
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRow(a, b)
            | Op::MulRow(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::RowScale(a, _)
            | Op::Unary(a, _)
            | Op::SliceCols(a, _)
            | Op::Reshape(a)
            | Op::RowNorm(a, _)
            | Op::Softmax(a)
            | Op::RowMix(a, _)
            | Op::GroupColMean(a, _)
            | Op::Crps(a, _, _, _)
            | Op::Sum(a)
            | Op::Dot(a, _) => vec![*a],
            Op::ConcatCols(parts) => parts.clone(),
            Op::Attention(c) => vec![c.q, c.k, c.v],
        }
    }

    fn propagate(
        &self,
        idx: usize,
        g: &DenseArray,
        grads: &mut [Option<DenseArray>],
        shapes: &[(usize, usize)],
    ) {
        let node = &self.nodes[idx];
        let needs = |v: &Var| self.nodes[v.0].requires_grad;
        macro_rules! acc {
            ($v:expr) => {{
                let (r, c) = shapes[$v.0];
                grads[$v.0].get_or_insert_with(|| DenseArray::zeros(r, c))
            }};
        }
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = shapes[a.0];
                let n = shapes[b.0].1;
                if needs(a) {
                    let bv = self.value(*b).data();
                    let ga = acc!(a);
                    gemm(false, true, m, n, k, g.data(), bv, ga.data_mut(), 1.0);
                }
                if needs(b) {
                    let av = self.value(*a).data();
                    let gb = acc!(b);
                    gemm(true, false, k, m, n, av, g.data(), gb.data_mut(), 1.0);
                }
            }
            Op::Add(a, b) => {
                if needs(a) {
                    acc!(a).add_assign(g);
                }
                if needs(b) {
                    acc!(b).add_assign(g);
                }
            }
            Op::Sub(a, b) => {
                if needs(a) {
                    acc!(a).add_assign(g);
                }
                if needs(b) {
                    for (x, y) in acc!(b).data_mut().iter_mut().zip(g.data()) {
                        *x -= y;
                    }
                }
            }
            Op::Mul(a, b) => {
                if needs(a) {
                    let bv = self.value(*b).data();
                    for ((x, gi), bi) in acc!(a).data_mut().iter_mut().zip(g.data()).zip(bv) {
                        *x += gi * bi;
                    }
                }
                if needs(b) {
                    let av = self.value(*a).data();
                    for ((x, gi), ai) in acc!(b).data_mut().iter_mut().zip(g.data()).zip(av) {
                        *x += gi * ai;
                    }
                }
            }
            Op::AddRow(a, row) => {
                if needs(a) {
                    acc!(a).add_assign(g);
                }
                if needs(row) {
                    let gr = acc!(row);
                    for r in 0..g.rows() {
                        for (x, y) in gr.data_mut().iter_mut().zip(g.row(r)) {
                            *x += y;
                        }
                    }
                }
            }
            Op::MulRow(a, row) => {
                let av = self.value(*a);
                let rv = self.value(*row);
                if needs(a) {
                    let ga = acc!(a);
                    for r in 0..g.rows() {
                        for ((x, gi), w) in ga.row_mut(r).iter_mut().zip(g.row(r)).zip(rv.data()) {
                            *x += gi * w;
                        }
                    }
                }
                if needs(row) {
                    let gr = acc!(row);
                    for r in 0..g.rows() {
                        for ((x, gi), ai) in gr.data_mut().iter_mut().zip(g.row(r)).zip(av.row(r)) {
                            *x += gi * ai;
                        }
                    }
                }
            }
            Op::Scale(a, s) => {
                for (x, y) in acc!(a).data_mut().iter_mut().zip(g.data()) {
                    *x += s * y;
                }
            }
            Op::AddScalar(a) => acc!(a).add_assign(g),
            Op::RowScale(a, f) => {
                let ga = acc!(a);
                for (r, s) in f.iter().enumerate() {
                    for (x, y) in ga.row_mut(r).iter_mut().zip(g.row(r)) {
                        *x += s * y;
                    }
                }
            }
            Op::Unary(a, kind) => {
                let xv = self.value(*a).data();
                let yv = node.value.data();
                let ga = acc!(a);
                for (((x, gi), xi), yi) in ga.data_mut().iter_mut().zip(g.data()).zip(xv).zip(yv) {
                    *x += gi * kind.derivative(*xi, *yi);
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for p in parts {
                    let w = shapes[p.0].1;
                    if needs(p) {
                        let gp = acc!(p);
                        for r in 0..g.rows() {
                            for (x, y) in gp.row_mut(r).iter_mut().zip(&g.row(r)[off..off + w]) {
                                *x += y;
                            }
                        }
                    }
                    off += w;
                }
            }
            Op::SliceCols(a, start) => {
                let w = g.cols();
                let ga = acc!(a);
                for r in 0..g.rows() {
                    for (x, y) in ga.row_mut(r)[*start..*start + w].iter_mut().zip(g.row(r)) {
                        *x += y;
                    }
                }
            }
            Op::Reshape(a) => {
                for (x, y) in acc!(a).data_mut().iter_mut().zip(g.data()) {
                    *x += y;
                }
            }
            Op::RowNorm(a, inv) => {
                let yv = &node.value;
                let cols = yv.cols() as f64;
                let ga = acc!(a);
                for (r, is) in inv.iter().enumerate() {
                    let gr = g.row(r);
                    let yr = yv.row(r);
                    let mg = gr.iter().sum::<f64>() / cols;
                    let mgy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / cols;
                    for ((x, gi), yi) in ga.row_mut(r).iter_mut().zip(gr).zip(yr) {
                        *x += is * (gi - mg - yi * mgy);
                    }
                }
            }
            Op::Softmax(a) => {
                let yv = &node.value;
                let ga = acc!(a);
                for r in 0..g.rows() {
                    let (gr, yr) = (g.row(r), yv.row(r));
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for ((x, gi), yi) in ga.row_mut(r).iter_mut().zip(gr).zip(yr) {
                        *x += yi * (gi - dot);
                    }
                }
            }
            Op::RowMix(a, plan) => {
                let ga = acc!(a);
                let cols = g.cols();
                for r in 0..plan.out_rows() {
                    let gr = g.row(r);
                    for (i, w) in plan.row(r) {
                        let dst = &mut ga.data_mut()[i * cols..(i + 1) * cols];
                        for (x, y) in dst.iter_mut().zip(gr) {
                            *x += w * y;
                        }
                    }
                }
            }
            Op::GroupColMean(a, groups) => {
                let (rows, cols) = shapes[a.0];
                let block = rows / groups;
                let ga = acc!(a);
                for r in 0..rows {
                    let gr = g.row(r / block);
                    for (x, y) in ga.row_mut(r).iter_mut().zip(gr) {
                        *x += y / block as f64;
                    }
                }
                let _ = cols;
            }
            Op::Attention(c) => self.attention_backward(c, g, grads, shapes),
            Op::Crps(a, members, steps, coeff) => {
                let ga = acc!(a);
                let ch = g.cols();
                let per_group = members * steps;
                for r in 0..coeff.rows() {
                    let grp = r / per_group;
                    let t = grp * steps + (r % per_group) % steps;
                    for c in 0..ch {
                        let v = ga.get(r, c) + coeff.get(r, c) * g.get(t, c);
                        ga.set(r, c, v);
                    }
                }
            }
            Op::Sum(a) => {
                let s = g.data()[0];
                for x in acc!(a).data_mut() {
                    *x += s;
                }
            }
            Op::Dot(a, w) => {
                let s = g.data()[0];
                for (x, wi) in acc!(a).data_mut().iter_mut().zip(w.iter()) {
                    *x += s * wi;
                }
            }
        }
    }

    fn attention_backward(
        &self,
        c: &AttentionCache,
        g: &DenseArray,
        grads: &mut [Option<DenseArray>],
        shapes: &[(usize, usize)],
    ) {
        let AttentionLayout {
            heads,
            causal,
            q_groups,
            kv_groups,
        } = c.layout;
        let (tq, tk) = (c.tq, c.tk);
        let d = g.cols();
        let dh = d / heads;
        let ratio = q_groups / kv_groups;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qv, kv, vv) = (self.value(c.q), self.value(c.k), self.value(c.v));
        let mut gq = DenseArray::zeros(shapes[c.q.0].0, d);
        let mut gk = DenseArray::zeros(shapes[c.k.0].0, d);
        let mut gv = DenseArray::zeros(shapes[c.v.0].0, d);
        let mut dp = vec![0.0; tk];
        for grp in 0..q_groups {
            let kg = grp / ratio;
            for h in 0..heads {
                let c0 = h * dh;
                for i in 0..tq {
                    let limit = if causal { i + 1 } else { tk };
                    let base = ((grp * heads + h) * tq + i) * tk;
                    let p = &c.probs[base..base + limit];
                    let go = &g.row(grp * tq + i)[c0..c0 + dh];
                    let mut dot = 0.0;
                    for j in 0..limit {
                        let vj = &vv.row(kg * tk + j)[c0..c0 + dh];
                        dp[j] = go.iter().zip(vj).map(|(a, b)| a * b).sum();
                        dot += dp[j] * p[j];
                        let gvj = &mut gv.row_mut(kg * tk + j)[c0..c0 + dh];
                        for (x, y) in gvj.iter_mut().zip(go) {
                            *x += p[j] * y;
                        }
                    }
                    let qi: Vec<f64> = qv.row(grp * tq + i)[c0..c0 + dh].to_vec();
                    for j in 0..limit {
                        let ds = p[j] * (dp[j] - dot) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        let kj = &kv.row(kg * tk + j)[c0..c0 + dh];
                        let gqi = &mut gq.row_mut(grp * tq + i)[c0..c0 + dh];
                        for (x, y) in gqi.iter_mut().zip(kj) {
                            *x += ds * y;
                        }
                        let gkj = &mut gk.row_mut(kg * tk + j)[c0..c0 + dh];
                        for (x, y) in gkj.iter_mut().zip(&qi) {
                            *x += ds * y;
                        }
                    }
                }
            }
        }
        for (var, grad) in [(c.q, gq), (c.k, gk), (c.v, gv)] {
            if self.nodes[var.0].requires_grad {
                let (r, cc) = shapes[var.0];
                grads[var.0]
                    .get_or_insert_with(|| DenseArray::zeros(r, cc))
                    .add_assign(&grad);
            }
        }
    }
}

/// Sample CRPS of one cell. `buf` holds `(value, row)` pairs; `emit` receives
/// the derivative of the score with respect to each row's value.
pub(crate) fn crps_cell(
    buf: &mut [(f64, usize)],
    y: f64,
    p: f64,
    mut emit: impl FnMut(usize, f64),
) -> f64 {
    buf.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut mae = 0.0;
    let mut spread = 0.0;
    for (i, &(x, r)) in buf.iter().enumerate() {
        let coef = (2.0 * (i as f64 + 1.0) - p - 1.0) / (p * p);
        mae += (x - y).abs();
        spread += coef * x;
        let sign = if x > y {
            1.0
        } else if x < y {
            -1.0
        } else {
            0.0
        };
        emit(r, sign / p - coef);
    }
    mae / p - spread
}
