//! Tape-based reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so the tape is already a
//! topological order and the backward pass is a single reverse sweep.

use std::collections::HashMap;

use crate::params::{Grads, ParamId, ParamMask, ParamStore};
use crate::real::Real;
use crate::tensor::{
    gelu, gelu_grad, layer_norm_rows, log_softmax_rows, matmul, matmul_nt, matmul_tn,
    softmax_rows, Tensor,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Param,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Gelu(Var),
    Exp(Var),
    Abs(Var),
    Clamp(Var, T, T),
    LayerNorm { x: Var, gain: Var, bias: Var, stats: Vec<(T, T)> },
    Softmax(Var),
    LogSoftmax(Var),
    /// Saved policy log-probabilities and their difference to the reference.
    CategoricalKl { logits: Var, log_probs: Tensor<T>, diff: Tensor<T> },
    Pick(Var, Vec<usize>),
    Gather(Var, Vec<usize>),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    SelectRows(Var, Vec<usize>),
    Sum(Var),
    RowSum(Var),
    StraightThrough(Var),
    Min(Var, Var),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients of one backward sweep, indexed by node.
pub struct NodeGrads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> NodeGrads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    mask: ParamMask,
    bound: HashMap<ParamId, Var>,
}

impl<T: Real> Graph<T> {
    /// Graph in which parameters selected by `mask` are differentiable.
    pub fn new(mask: ParamMask) -> Self {
        Self { nodes: Vec::with_capacity(256), mask, bound: HashMap::new() }
    }

    /// Graph with no trainable parameters (pure evaluation).
    pub fn inference() -> Self {
        Self::new(ParamMask(Vec::new()))
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    #[inline]
    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    #[inline]
    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.ng(v)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Differentiable leaf not backed by the parameter store.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Binds a stored parameter; repeated binds return the same node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let trainable = self.mask.contains(id);
        let v = self.push(store.get(id).clone(), Op::Param, trainable);
        self.bound.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = matmul(self.value(a), self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::MatMul(a, b), ng)
    }

    /// `a * b^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let out = matmul_nt(self.value(a), self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::MatMulNT(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Add(a, b), ng)
    }

    /// Adds a `1 x cols` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let mut out = self.value(a).clone();
        assert_eq!(self.value(row).rows(), 1, "add_row expects a row vector");
        out.add_row_assign(self.value(row).data());
        let ng = self.ng(a) || self.ng(row);
        self.push(out, Op::AddRow(a, row), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).map(|x| x * s);
        let ng = self.ng(a);
        self.push(out, Op::Scale(a, s), ng)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(gelu);
        let ng = self.ng(a);
        self.push(out, Op::Gelu(a), ng)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.exp());
        let ng = self.ng(a);
        self.push(out, Op::Exp(a), ng)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.abs());
        let ng = self.ng(a);
        self.push(out, Op::Abs(a), ng)
    }

    pub fn clamp(&mut self, a: Var, lo: T, hi: T) -> Var {
        let out = self.value(a).map(|x| x.max(lo).min(hi));
        let ng = self.ng(a);
        self.push(out, Op::Clamp(a, lo, hi), ng)
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let (out, stats) =
            layer_norm_rows(self.value(x), self.value(gain).data(), self.value(bias).data());
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        self.push(out, Op::LayerNorm { x, gain, bias, stats }, ng)
    }

    /// Row softmax with a bottom-right aligned causal mask.
    pub fn causal_softmax(&mut self, a: Var) -> Var {
        let out = softmax_rows(self.value(a), true);
        let ng = self.ng(a);
        self.push(out, Op::Softmax(a), ng)
    }

    pub fn softmax(&mut self, a: Var) -> Var {
        let out = softmax_rows(self.value(a), false);
        let ng = self.ng(a);
        self.push(out, Op::Softmax(a), ng)
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let out = log_softmax_rows(self.value(a));
        let ng = self.ng(a);
        self.push(out, Op::LogSoftmax(a), ng)
    }

    /// Row-wise `KL(softmax(logits) || exp(reference))` as an `n x 1` column;
    /// `reference` holds log-probabilities. The gradient is exactly zero
    /// wherever the two distributions agree bitwise.
    pub fn categorical_kl(&mut self, logits: Var, reference: &Tensor<T>) -> Var {
        let lp = log_softmax_rows(self.value(logits));
        assert_eq!(lp.shape(), reference.shape(), "categorical_kl shape mismatch");
        let diff = lp.zip_map(reference, |a, b| a - b);
        let out = Tensor::from_fn(lp.rows(), 1, |r, _| {
            lp.row(r).iter().zip(diff.row(r)).map(|(&l, &d)| l.exp() * d).fold(T::zero(), |a, b| a + b)
        });
        let ng = self.ng(logits);
        self.push(out, Op::CategoricalKl { logits, log_probs: lp, diff }, ng)
    }

    /// `out[r] = a[r, idx[r]]`, a column vector.
    pub fn pick(&mut self, a: Var, idx: Vec<usize>) -> Var {
        let src = self.value(a);
        assert_eq!(idx.len(), src.rows(), "pick needs one index per row");
        let out = Tensor::from_fn(src.rows(), 1, |r, _| src.get(r, idx[r]));
        let ng = self.ng(a);
        self.push(out, Op::Pick(a, idx), ng)
    }

    /// Row lookup: `out[i] = table[ids[i]]`.
    pub fn gather(&mut self, table: Var, ids: Vec<usize>) -> Var {
        let src = self.value(table);
        let mut out = Tensor::zeros(ids.len(), src.cols());
        for (i, &id) in ids.iter().enumerate() {
            out.row_mut(i).copy_from_slice(src.row(id));
        }
        let ng = self.ng(table);
        self.push(out, Op::Gather(table, ids), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut out = Tensor::zeros(rows, total);
        let mut off = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.rows(), rows, "concat_cols row mismatch");
            for r in 0..rows {
                out.row_mut(r)[off..off + v.cols()].copy_from_slice(v.row(r));
            }
            off += v.cols();
        }
        let ng = parts.iter().any(|p| self.ng(*p));
        self.push(out, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let out = self.value(a).slice_cols(start, len);
        let ng = self.ng(a);
        self.push(out, Op::SliceCols(a, start), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let mut out = Tensor::zeros(0, self.value(parts[0]).cols());
        for &p in parts {
            out.append_rows(self.value(p));
        }
        let ng = parts.iter().any(|p| self.ng(*p));
        self.push(out, Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let out = self.value(a).slice_rows(start, len);
        let ng = self.ng(a);
        self.push(out, Op::SliceRows(a, start), ng)
    }

    pub fn select_rows(&mut self, a: Var, idx: Vec<usize>) -> Var {
        let src = self.value(a);
        let mut out = Tensor::zeros(idx.len(), src.cols());
        for (i, &r) in idx.iter().enumerate() {
            out.row_mut(i).copy_from_slice(src.row(r));
        }
        let ng = self.ng(a);
        self.push(out, Op::SelectRows(a, idx), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::full(1, 1, self.value(a).sum());
        let ng = self.ng(a);
        self.push(out, Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = T::from_usize(self.value(a).len().max(1)).unwrap();
        let s = self.sum(a);
        self.scale(s, T::one() / n)
    }

    /// Sums each row into a `rows x 1` column.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let out = Tensor::from_fn(src.rows(), 1, |r, _| src.row(r).iter().copied().sum());
        let ng = self.ng(a);
        self.push(out, Op::RowSum(a), ng)
    }

    /// Forward value `hard`, gradient routed to `soft` unchanged.
    pub fn straight_through(&mut self, soft: Var, hard: Tensor<T>) -> Var {
        assert_eq!(self.value(soft).shape(), hard.shape(), "straight_through shape");
        let ng = self.ng(soft);
        self.push(hard, Op::StraightThrough(soft), ng)
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x.min(y));
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Min(a, b), ng)
    }

    /// `x W + b` for a row-major batch `x`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let y = self.matmul(x, w);
        match b {
            Some(b) => self.add_row(y, b),
            None => y,
        }
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> NodeGrads<T> {
        assert_eq!(self.value(loss).len(), 1, "backward expects a scalar");
        self.backward_with_seed(loss, Tensor::full(1, 1, T::one()))
    }

    pub fn backward_with_seed(&self, out: Var, seed: Tensor<T>) -> NodeGrads<T> {
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.ng(out) {
            grads[out.0] = Some(seed);
        }
        for i in (0..=out.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        NodeGrads { grads }
    }

    /// Backward sweep that adds parameter gradients into `acc`.
    pub fn backward_into(&self, loss: Var, acc: &mut Grads<T>) {
        let ng = self.backward(loss);
        self.collect_param_grads(&ng, acc);
    }

    pub fn collect_param_grads(&self, ng: &NodeGrads<T>, acc: &mut Grads<T>) {
        for (&id, &v) in &self.bound {
            if let Some(g) = ng.get(v) {
                if self.nodes[v.0].needs_grad {
                    acc.accumulate(id, g);
                }
            }
        }
    }

    fn acc(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.ng(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(a) => a.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                if self.ng(*a) {
                    self.acc(grads, *a, matmul_nt(g, self.value(*b)));
                }
                if self.ng(*b) {
                    self.acc(grads, *b, matmul_tn(self.value(*a), g));
                }
            }
            Op::MatMulNT(a, b) => {
                if self.ng(*a) {
                    self.acc(grads, *a, matmul(g, self.value(*b)));
                }
                if self.ng(*b) {
                    self.acc(grads, *b, matmul_tn(g, self.value(*a)));
                }
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::AddRow(a, row) => {
                self.acc(grads, *a, g.clone());
                if self.ng(*row) {
                    let mut s = Tensor::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (o, &v) in s.data_mut().iter_mut().zip(g.row(r)) {
                            *o = *o + v;
                        }
                    }
                    self.acc(grads, *row, s);
                }
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    self.acc(grads, *a, g.zip_map(self.value(*b), |x, y| x * y));
                }
                if self.ng(*b) {
                    self.acc(grads, *b, g.zip_map(self.value(*a), |x, y| x * y));
                }
            }
            Op::Scale(a, s) => self.acc(grads, *a, g.map(|v| v * *s)),
            Op::Gelu(a) => self.acc(grads, *a, g.zip_map(self.value(*a), |gv, x| gv * gelu_grad(x))),
            Op::Exp(a) => self.acc(grads, *a, g.zip_map(&node.value, |gv, y| gv * y)),
            Op::Abs(a) => self.acc(
                grads,
                *a,
                g.zip_map(self.value(*a), |gv, x| {
                    if x > T::zero() {
                        gv
                    } else if x < T::zero() {
                        -gv
                    } else {
                        T::zero()
                    }
                }),
            ),
            Op::Clamp(a, lo, hi) => self.acc(
                grads,
                *a,
                g.zip_map(self.value(*a), |gv, x| if x >= *lo && x <= *hi { gv } else { T::zero() }),
            ),
            Op::LayerNorm { x, gain, bias, stats } => {
                let xv = self.value(*x);
                let gainv = self.value(*gain).data();
                let d = xv.cols();
                let inv_d = T::one() / T::from_usize(d).unwrap();
                let mut dx = Tensor::zeros(xv.rows(), d);
                let mut dgain = Tensor::zeros(1, d);
                let mut dbias = Tensor::zeros(1, d);
                let mut xhat = vec![T::zero(); d];
                let mut dxhat = vec![T::zero(); d];
                for r in 0..xv.rows() {
                    let (mean, rstd) = stats[r];
                    let row = xv.row(r);
                    let gr = g.row(r);
                    let mut m1 = T::zero();
                    let mut m2 = T::zero();
                    for j in 0..d {
                        xhat[j] = (row[j] - mean) * rstd;
                        dxhat[j] = gr[j] * gainv[j];
                        m1 = m1 + dxhat[j];
                        m2 = m2 + dxhat[j] * xhat[j];
                        dgain.data_mut()[j] = dgain.data()[j] + gr[j] * xhat[j];
                        dbias.data_mut()[j] = dbias.data()[j] + gr[j];
                    }
                    m1 = m1 * inv_d;
                    m2 = m2 * inv_d;
                    let o = dx.row_mut(r);
                    for j in 0..d {
                        o[j] = rstd * (dxhat[j] - m1 - xhat[j] * m2);
                    }
                }
                self.acc(grads, *x, dx);
                self.acc(grads, *gain, dgain);
                self.acc(grads, *bias, dbias);
            }
            Op::Softmax(a) => {
                let y = &node.value;
                let mut dx = Tensor::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let yr = y.row(r);
                    let gr = g.row(r);
                    let dot: T = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                    for (o, (&p, &q)) in dx.row_mut(r).iter_mut().zip(yr.iter().zip(gr)) {
                        *o = p * (q - dot);
                    }
                }
                self.acc(grads, *a, dx);
            }
            Op::LogSoftmax(a) => {
                let y = &node.value;
                let mut dx = Tensor::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let gr = g.row(r);
                    let gs: T = gr.iter().copied().sum();
                    for (o, (&ly, &q)) in dx.row_mut(r).iter_mut().zip(y.row(r).iter().zip(gr)) {
                        *o = q - ly.exp() * gs;
                    }
                }
                self.acc(grads, *a, dx);
            }
            Op::CategoricalKl { logits, log_probs, diff } => {
                let kl = &node.value;
                let dx = Tensor::from_fn(log_probs.rows(), log_probs.cols(), |r, c| {
                    g.get(r, 0) * log_probs.get(r, c).exp() * (diff.get(r, c) - kl.get(r, 0))
                });
                self.acc(grads, *logits, dx);
            }
            Op::Pick(a, idx) => {
                let src = self.value(*a);
                let mut dx = Tensor::zeros(src.rows(), src.cols());
                for (r, &c) in idx.iter().enumerate() {
                    dx.set(r, c, g.get(r, 0));
                }
                self.acc(grads, *a, dx);
            }
            Op::Gather(table, ids) => {
                let src = self.value(*table);
                let mut dt = Tensor::zeros(src.rows(), src.cols());
                for (i, &id) in ids.iter().enumerate() {
                    for (o, &v) in dt.row_mut(id).iter_mut().zip(g.row(i)) {
                        *o = *o + v;
                    }
                }
                self.acc(grads, *table, dt);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.ng(p) {
                        self.acc(grads, p, g.slice_cols(off, w));
                    }
                    off += w;
                }
            }
            Op::SliceCols(a, start) => {
                let src = self.value(*a);
                let mut dx = Tensor::zeros(src.rows(), src.cols());
                for r in 0..g.rows() {
                    dx.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                }
                self.acc(grads, *a, dx);
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let h = self.value(p).rows();
                    if self.ng(p) {
                        self.acc(grads, p, g.slice_rows(off, h));
                    }
                    off += h;
                }
            }
            Op::SliceRows(a, start) => {
                let src = self.value(*a);
                let mut dx = Tensor::zeros(src.rows(), src.cols());
                for r in 0..g.rows() {
                    dx.row_mut(start + r).copy_from_slice(g.row(r));
                }
                self.acc(grads, *a, dx);
            }
            Op::SelectRows(a, idx) => {
                let src = self.value(*a);
                let mut dx = Tensor::zeros(src.rows(), src.cols());
                for (i, &r) in idx.iter().enumerate() {
                    for (o, &v) in dx.row_mut(r).iter_mut().zip(g.row(i)) {
                        *o = *o + v;
                    }
                }
                self.acc(grads, *a, dx);
            }
            Op::Sum(a) => {
                let src = self.value(*a);
                self.acc(grads, *a, Tensor::full(src.rows(), src.cols(), g.scalar()));
            }
            Op::RowSum(a) => {
                let src = self.value(*a);
                self.acc(grads, *a, Tensor::from_fn(src.rows(), src.cols(), |r, _| g.get(r, 0)));
            }
            Op::StraightThrough(soft) => self.acc(grads, *soft, g.clone()),
            Op::Min(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.ng(*a) {
                    let mut d = g.clone();
                    for (k, v) in d.data_mut().iter_mut().enumerate() {
                        if av.data()[k] > bv.data()[k] {
                            *v = T::zero();
                        }
                    }
                    self.acc(grads, *a, d);
                }
                if self.ng(*b) {
                    let mut d = g.clone();
                    for (k, v) in d.data_mut().iter_mut().enumerate() {
                        if av.data()[k] <= bv.data()[k] {
                            *v = T::zero();
                        }
                    }
                    self.acc(grads, *b, d);
                }
            }
        }
    }
}
