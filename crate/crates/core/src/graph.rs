//! A small reverse-mode autodiff tape over dense matrices.
//!
//! Every op is eagerly evaluated when it is recorded. `backward` walks the
//! tape in reverse and accumulates adjoints for nodes that depend on a
//! parameter; constants never receive gradients.

use std::collections::HashMap;
use std::rc::Rc;

use crate::params::{ParamId, ParamStore};
use crate::tensor::{matmul, matmul_nt, matmul_tn, Mat, Real};

const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Boolean keep-mask for (log-)softmax. `false` entries are excluded.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    pub rows: usize,
    pub cols: usize,
    keep: Vec<bool>,
}

impl Mask {
    pub fn new(rows: usize, cols: usize, keep: Vec<bool>) -> Self {
        assert_eq!(keep.len(), rows * cols);
        Self { rows, cols, keep }
    }

    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let keep = (0..rows * cols).map(|i| f(i / cols, i % cols)).collect();
        Self { rows, cols, keep }
    }

    /// Lower-triangular mask, row `i` sees columns `0..=i`.
    pub fn causal(n: usize) -> Self {
        Self::from_fn(n, n, |r, c| c <= r)
    }

    #[inline]
    pub fn keeps(&self, r: usize, c: usize) -> bool {
        self.keep[r * self.cols + c]
    }
}

enum Op<T> {
    Const,
    Param,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Exp(Var),
    GatherRows(Var, Rc<[usize]>),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Mat<T>,
        inv_std: Vec<T>,
    },
    Softmax(Var),
    LogSoftmax(Var, Option<Rc<Mask>>),
    Pick(Var, Rc<[usize]>),
    SumAll(Var),
    SumRows(Var),
}

struct Node<T> {
    value: Mat<T>,
    op: Op<T>,
    tracked: bool,
}

pub struct Graph<T: Real = f64> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Shape relation of the right operand in a broadcasting binary op.
#[derive(Clone, Copy)]
enum Bcast {
    Same,
    Row,
    Col,
    Scalar,
}

fn bcast_kind(a: (usize, usize), b: (usize, usize)) -> Bcast {
    match b {
        _ if a == b => Bcast::Same,
        (1, 1) => Bcast::Scalar,
        (1, c) if c == a.1 => Bcast::Row,
        (r, 1) if r == a.0 => Bcast::Col,
        _ => panic!("cannot broadcast {b:?} onto {a:?}"),
    }
}

#[inline]
fn bcast_index(kind: Bcast, r: usize, c: usize, cols: usize) -> usize {
    match kind {
        Bcast::Same => r * cols + c,
        Bcast::Row => c,
        Bcast::Col => r,
        Bcast::Scalar => 0,
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    #[inline]
    pub fn value(&self, v: Var) -> &Mat<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    /// Value of a 1×1 node.
    pub fn scalar(&self, v: Var) -> T {
        let m = self.value(v);
        assert_eq!(m.shape(), (1, 1), "not a scalar node");
        m.data[0]
    }

    fn push(&mut self, value: Mat<T>, op: Op<T>, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    pub fn constant(&mut self, value: Mat<T>) -> Var {
        self.push(value, Op::Const, false)
    }

    /// Leaf bound to a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.value(id).cast(), Op::Param, true);
        self.params.insert(id, v);
        v
    }

    /// Copy of `v` cut off from the tape: gradients stop here.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = matmul(self.value(a), self.value(b));
        let t = self.tracked(a) || self.tracked(b);
        self.push(value, Op::MatMul(a, b), t)
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let value = matmul_nt(self.value(a), self.value(b));
        let t = self.tracked(a) || self.tracked(b);
        self.push(value, Op::MatMulNT(a, b), t)
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Mat<T> {
        let (am, bm) = (self.value(a), self.value(b));
        let kind = bcast_kind(am.shape(), bm.shape());
        let mut out = Mat::zeros(am.rows, am.cols);
        for r in 0..am.rows {
            for c in 0..am.cols {
                let i = r * am.cols + c;
                out.data[i] = f(am.data[i], bm.data[bcast_index(kind, r, c, am.cols)]);
            }
        }
        out
    }

    /// Elementwise `a + b`; `b` may be a row vector, column vector or scalar.
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.binary(a, b, |x, y| x + y);
        let t = self.tracked(a) || self.tracked(b);
        self.push(value, Op::Add(a, b), t)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.binary(a, b, |x, y| x - y);
        let t = self.tracked(a) || self.tracked(b);
        self.push(value, Op::Sub(a, b), t)
    }

    /// Elementwise (Hadamard) product with the same broadcasting as [`Graph::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.binary(a, b, |x, y| x * y);
        let t = self.tracked(a) || self.tracked(b);
        self.push(value, Op::Mul(a, b), t)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let value = self.value(a).map(|x| x * s);
        let t = self.tracked(a);
        self.push(value, Op::Scale(a, s), t)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| if x > T::zero() { x } else { T::zero() });
        let t = self.tracked(a);
        self.push(value, Op::Relu(a), t)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.exp());
        let t = self.tracked(a);
        self.push(value, Op::Exp(a), t)
    }

    pub fn gather_rows(&mut self, a: Var, idx: impl Into<Rc<[usize]>>) -> Var {
        let idx: Rc<[usize]> = idx.into();
        let src = self.value(a);
        let mut out = Mat::zeros(idx.len(), src.cols);
        for (r, &i) in idx.iter().enumerate() {
            out.row_mut(r).copy_from_slice(src.row(i));
        }
        let t = self.tracked(a);
        self.push(out, Op::GatherRows(a, idx), t)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let src = self.value(a);
        assert!(start + len <= src.cols);
        let mut out = Mat::zeros(src.rows, len);
        for r in 0..src.rows {
            out.row_mut(r).copy_from_slice(&src.row(r)[start..start + len]);
        }
        let t = self.tracked(a);
        self.push(out, Op::SliceCols(a, start), t)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut out = Mat::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let m = self.value(p);
            assert_eq!(m.rows, rows);
            for r in 0..rows {
                out.row_mut(r)[off..off + m.cols].copy_from_slice(m.row(r));
            }
            off += m.cols;
        }
        let t = parts.iter().any(|&p| self.tracked(p));
        self.push(out, Op::ConcatCols(parts.to_vec()), t)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let m = self.value(p);
            assert_eq!(m.cols, cols);
            data.extend_from_slice(&m.data);
            rows += m.rows;
        }
        let t = parts.iter().any(|&p| self.tracked(p));
        self.push(Mat::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()), t)
    }

    /// Row-wise layer normalization with `1×d` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let xm = self.value(x);
        let (n, d) = xm.shape();
        let (g, b) = (self.value(gain), self.value(bias));
        let eps = T::of(LAYER_NORM_EPS);
        let dn = T::of(d as f64);
        let mut xhat = Mat::zeros(n, d);
        let mut inv_std = Vec::with_capacity(n);
        let mut out = Mat::zeros(n, d);
        for r in 0..n {
            let row = xm.row(r);
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            for c in 0..d {
                let h = (row[c] - mean) * is;
                xhat.set(r, c, h);
                out.set(r, c, g.data[c] * h + b.data[c]);
            }
        }
        let t = self.tracked(x) || self.tracked(gain) || self.tracked(bias);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            t,
        )
    }

    /// Row-wise softmax; masked entries are exactly zero.
    pub fn softmax(&mut self, a: Var, mask: Option<Rc<Mask>>) -> Var {
        let value = row_softmax(self.value(a), mask.as_deref(), false);
        let t = self.tracked(a);
        self.push(value, Op::Softmax(a), t)
    }

    /// Row-wise log-softmax; masked entries are `-inf`.
    pub fn log_softmax(&mut self, a: Var, mask: Option<Rc<Mask>>) -> Var {
        let value = row_softmax(self.value(a), mask.as_deref(), true);
        let t = self.tracked(a);
        self.push(value, Op::LogSoftmax(a, mask), t)
    }

    /// Selects one column per row: `[n, m] -> [n, 1]`.
    pub fn pick(&mut self, a: Var, cols: impl Into<Rc<[usize]>>) -> Var {
        let cols: Rc<[usize]> = cols.into();
        let m = self.value(a);
        assert_eq!(cols.len(), m.rows);
        let data = cols.iter().enumerate().map(|(r, &c)| m.get(r, c)).collect();
        let t = self.tracked(a);
        self.push(Mat::from_vec(m.rows, 1, data), Op::Pick(a, cols), t)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().copied().sum();
        let t = self.tracked(a);
        self.push(Mat::scalar(s), Op::SumAll(a), t)
    }

    /// `[n, m] -> [n, 1]`
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let data = (0..m.rows).map(|r| m.row(r).iter().copied().sum()).collect();
        let t = self.tracked(a);
        self.push(Mat::from_vec(m.rows, 1, data), Op::SumRows(a), t)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).data.len();
        let s = self.sum(a);
        self.scale(s, T::one() / T::of(n as f64))
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(self.shape(loss), (1, 1), "backward needs a scalar loss");
        let mut grads: Vec<Option<Mat<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Mat::scalar(T::one()));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.tracked {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients {
            grads,
            params: self.params.iter().map(|(&k, &v)| (k, v)).collect(),
        }
    }

    fn backprop_node(&self, node: &Node<T>, g: &Mat<T>, grads: &mut [Option<Mat<T>>]) {
        let mut acc = |v: Var, m: Mat<T>| {
            if !self.tracked(v) {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&m),
                slot @ None => *slot = Some(m),
            }
        };
        match &node.op {
            Op::Const | Op::Param => {}
            Op::MatMul(a, b) => {
                if self.tracked(*a) {
                    acc(*a, matmul_nt(g, self.value(*b)));
                }
                if self.tracked(*b) {
                    acc(*b, matmul_tn(self.value(*a), g));
                }
            }
            Op::MatMulNT(a, b) => {
                // out = a bᵀ: da = g b, db = gᵀ a
                if self.tracked(*a) {
                    acc(*a, matmul(g, self.value(*b)));
                }
                if self.tracked(*b) {
                    acc(*b, matmul_tn(g, self.value(*a)));
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let neg = matches!(node.op, Op::Sub(..));
                if self.tracked(*a) {
                    acc(*a, g.clone());
                }
                if self.tracked(*b) {
                    let bm = self.value(*b);
                    let mut gb = reduce_to(g, bm.shape());
                    if neg {
                        gb = gb.map(|x| -x);
                    }
                    acc(*b, gb);
                }
            }
            Op::Mul(a, b) => {
                let (am, bm) = (self.value(*a), self.value(*b));
                let kind = bcast_kind(am.shape(), bm.shape());
                if self.tracked(*a) {
                    let mut ga = Mat::zeros(am.rows, am.cols);
                    for r in 0..am.rows {
                        for c in 0..am.cols {
                            let i = r * am.cols + c;
                            ga.data[i] = g.data[i] * bm.data[bcast_index(kind, r, c, am.cols)];
                        }
                    }
                    acc(*a, ga);
                }
                if self.tracked(*b) {
                    let mut gb = Mat::zeros(bm.rows, bm.cols);
                    for r in 0..am.rows {
                        for c in 0..am.cols {
                            let i = r * am.cols + c;
                            let j = bcast_index(kind, r, c, am.cols);
                            gb.data[j] = gb.data[j] + g.data[i] * am.data[i];
                        }
                    }
                    acc(*b, gb);
                }
            }
            Op::Scale(a, s) => acc(*a, g.map(|x| x * *s)),
            Op::Relu(a) => {
                let am = self.value(*a);
                let data = g
                    .data
                    .iter()
                    .zip(&am.data)
                    .map(|(&gv, &x)| if x > T::zero() { gv } else { T::zero() })
                    .collect();
                acc(*a, Mat::from_vec(g.rows, g.cols, data));
            }
            Op::Exp(a) => {
                let data = g.data.iter().zip(&node.value.data).map(|(&gv, &y)| gv * y).collect();
                acc(*a, Mat::from_vec(g.rows, g.cols, data));
            }
            Op::GatherRows(a, idx) => {
                let am = self.value(*a);
                let mut ga = Mat::zeros(am.rows, am.cols);
                for (r, &i) in idx.iter().enumerate() {
                    for (d, &s) in ga.row_mut(i).iter_mut().zip(g.row(r)) {
                        *d = *d + s;
                    }
                }
                acc(*a, ga);
            }
            Op::SliceCols(a, start) => {
                let am = self.value(*a);
                let mut ga = Mat::zeros(am.rows, am.cols);
                for r in 0..g.rows {
                    ga.row_mut(r)[*start..*start + g.cols].copy_from_slice(g.row(r));
                }
                acc(*a, ga);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let cols = self.value(p).cols;
                    if self.tracked(p) {
                        let mut gp = Mat::zeros(g.rows, cols);
                        for r in 0..g.rows {
                            gp.row_mut(r).copy_from_slice(&g.row(r)[off..off + cols]);
                        }
                        acc(p, gp);
                    }
                    off += cols;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let rows = self.value(p).rows;
                    if self.tracked(p) {
                        let data = g.data[off * g.cols..(off + rows) * g.cols].to_vec();
                        acc(p, Mat::from_vec(rows, g.cols, data));
                    }
                    off += rows;
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let (n, d) = xhat.shape();
                let gm = self.value(*gain);
                if self.tracked(*gain) {
                    let mut gg = Mat::zeros(1, d);
                    for r in 0..n {
                        for c in 0..d {
                            gg.data[c] = gg.data[c] + g.get(r, c) * xhat.get(r, c);
                        }
                    }
                    acc(*gain, gg);
                }
                if self.tracked(*bias) {
                    acc(*bias, reduce_to(g, (1, d)));
                }
                if self.tracked(*x) {
                    let dn = T::of(d as f64);
                    let mut gx = Mat::zeros(n, d);
                    for r in 0..n {
                        let dxhat: Vec<T> = (0..d).map(|c| g.get(r, c) * gm.data[c]).collect();
                        let sum_d: T = dxhat.iter().copied().sum();
                        let sum_dx: T = (0..d).map(|c| dxhat[c] * xhat.get(r, c)).sum();
                        for c in 0..d {
                            let v = inv_std[r] / dn * (dn * dxhat[c] - sum_d - xhat.get(r, c) * sum_dx);
                            gx.set(r, c, v);
                        }
                    }
                    acc(*x, gx);
                }
            }
            Op::Softmax(a) => {
                let p = &node.value;
                let mut ga = Mat::zeros(p.rows, p.cols);
                for r in 0..p.rows {
                    let dot: T = p.row(r).iter().zip(g.row(r)).map(|(&pv, &gv)| pv * gv).sum();
                    for c in 0..p.cols {
                        ga.set(r, c, p.get(r, c) * (g.get(r, c) - dot));
                    }
                }
                acc(*a, ga);
            }
            Op::LogSoftmax(a, mask) => {
                let lp = &node.value;
                let mut ga = Mat::zeros(lp.rows, lp.cols);
                for r in 0..lp.rows {
                    let keep = |c: usize| mask.as_ref().is_none_or(|m| m.keeps(r, c));
                    let gsum: T = (0..lp.cols).filter(|&c| keep(c)).map(|c| g.get(r, c)).sum();
                    for c in 0..lp.cols {
                        if keep(c) {
                            ga.set(r, c, g.get(r, c) - lp.get(r, c).exp() * gsum);
                        }
                    }
                }
                acc(*a, ga);
            }
            Op::Pick(a, cols) => {
                let am = self.value(*a);
                let mut ga = Mat::zeros(am.rows, am.cols);
                for (r, &c) in cols.iter().enumerate() {
                    ga.set(r, c, g.data[r]);
                }
                acc(*a, ga);
            }
            Op::SumAll(a) => {
                let am = self.value(*a);
                acc(*a, Mat::filled(am.rows, am.cols, g.data[0]));
            }
            Op::SumRows(a) => {
                let am = self.value(*a);
                let mut ga = Mat::zeros(am.rows, am.cols);
                for r in 0..am.rows {
                    ga.row_mut(r).fill(g.data[r]);
                }
                acc(*a, ga);
            }
        }
    }
}

fn reduce_to<T: Real>(g: &Mat<T>, shape: (usize, usize)) -> Mat<T> {
    match bcast_kind(g.shape(), shape) {
        Bcast::Same => g.clone(),
        Bcast::Scalar => Mat::scalar(g.data.iter().copied().sum()),
        Bcast::Row => {
            let mut out = Mat::zeros(1, g.cols);
            for r in 0..g.rows {
                for (o, &v) in out.data.iter_mut().zip(g.row(r)) {
                    *o = *o + v;
                }
            }
            out
        }
        Bcast::Col => {
            let data = (0..g.rows).map(|r| g.row(r).iter().copied().sum()).collect();
            Mat::from_vec(g.rows, 1, data)
        }
    }
}

fn row_softmax<T: Real>(x: &Mat<T>, mask: Option<&Mask>, log: bool) -> Mat<T> {
    let mut out = Mat::zeros(x.rows, x.cols);
    for r in 0..x.rows {
        let keep = |c: usize| mask.is_none_or(|m| m.keeps(r, c));
        let row = x.row(r);
        let max = (0..x.cols)
            .filter(|&c| keep(c))
            .map(|c| row[c])
            .fold(T::neg_infinity(), T::max);
        let denom: T = (0..x.cols).filter(|&c| keep(c)).map(|c| (row[c] - max).exp()).sum();
        let log_denom = denom.ln();
        for c in 0..x.cols {
            let v = if !keep(c) {
                if log {
                    T::neg_infinity()
                } else {
                    T::zero()
                }
            } else if log {
                row[c] - max - log_denom
            } else {
                (row[c] - max).exp() / denom
            };
            out.set(r, c, v);
        }
    }
    out
}

/// Adjoints produced by [`Graph::backward`].
pub struct Gradients<T: Real> {
    grads: Vec<Option<Mat<T>>>,
    params: Vec<(ParamId, Var)>,
}

impl<T: Real> Gradients<T> {
    /// Adjoint of any node; `None` when nothing flowed into it.
    pub fn of(&self, v: Var) -> Option<&Mat<T>> {
        self.grads[v.0].as_ref()
    }

    /// Adds parameter gradients into an `f64` buffer laid out like the store.
    pub fn accumulate_into(&self, buffer: &mut [Mat<f64>]) {
        for &(id, v) in &self.params {
            if let Some(g) = &self.grads[v.0] {
                let dst = &mut buffer[id.0];
                for (d, &s) in dst.data.iter_mut().zip(&g.data) {
                    *d += s.as_f64();
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamGroup;

    /// Central differences on one parameter of a scalar function.
    fn numeric(store: &mut ParamStore, id: ParamId, f: &dyn Fn(&ParamStore) -> f64) -> Vec<f64> {
        let h = 1e-6;
        let n = store.value(id).data.len();
        (0..n)
            .map(|i| {
                let orig = store.value(id).data[i];
                store.value_mut(id).data[i] = orig + h;
                let up = f(store);
                store.value_mut(id).data[i] = orig - h;
                let down = f(store);
                store.value_mut(id).data[i] = orig;
                (up - down) / (2.0 * h)
            })
            .collect()
    }

    fn check(store: &mut ParamStore, build: &dyn Fn(&mut Graph, &ParamStore) -> Var) {
        let mut g = Graph::new();
        let loss = build(&mut g, store);
        let grads = g.backward(loss);
        let mut buf = store.zero_grads();
        grads.accumulate_into(&mut buf);
        let f = |s: &ParamStore| {
            let mut g = Graph::new();
            let l = build(&mut g, s);
            g.scalar(l)
        };
        let ids: Vec<ParamId> = store.iter().map(|(id, _)| id).collect();
        for id in ids {
            let num = numeric(store, id, &f);
            for (a, n) in buf[id.0].data.iter().zip(&num) {
                let err = (a - n).abs() / a.abs().max(n.abs()).max(1e-6);
                assert!(err < 1e-5, "{}: analytic {a} numeric {n}", store.get(id).name);
            }
        }
    }

    fn store_with(shapes: &[(usize, usize)]) -> ParamStore {
        let mut s = ParamStore::new();
        let mut k = 0.37;
        for (i, &(r, c)) in shapes.iter().enumerate() {
            let data = (0..r * c)
                .map(|_| {
                    k = (k * 7.13 + 0.11) % 2.0;
                    k - 1.0
                })
                .collect();
            s.add(format!("p{i}"), ParamGroup::Attention, Mat::from_vec(r, c, data));
        }
        s
    }

    #[test]
    fn matmul_broadcast_and_softmax_gradients() {
        let mut s = store_with(&[(3, 4), (4, 2), (1, 2), (3, 1)]);
        check(&mut s, &|g, s| {
            let a = g.param(s, ParamId(0));
            let b = g.param(s, ParamId(1));
            let row = g.param(s, ParamId(2));
            let col = g.param(s, ParamId(3));
            let ab = g.matmul(a, b);
            let x = g.add(ab, row);
            let x = g.mul(x, col);
            let x = g.sub(x, row);
            let sm = g.softmax(x, None);
            let e = g.exp(sm);
            g.sum(e)
        });
    }

    #[test]
    fn layer_norm_gradients() {
        let mut s = store_with(&[(3, 5), (1, 5), (1, 5), (5, 5)]);
        check(&mut s, &|g, s| {
            let x = g.param(s, ParamId(0));
            let gain = g.param(s, ParamId(1));
            let bias = g.param(s, ParamId(2));
            let w = g.param(s, ParamId(3));
            let y = g.layer_norm(x, gain, bias);
            let y = g.matmul(y, w);
            let y = g.mul(y, y);
            g.mean(y)
        });
    }

    #[test]
    fn masked_log_softmax_pick_and_gather_gradients() {
        let mut s = store_with(&[(4, 3), (3, 3)]);
        let mask = Rc::new(Mask::causal(3));
        check(&mut s, &|g, s| {
            let table = g.param(s, ParamId(0));
            let w = g.param(s, ParamId(1));
            let x = g.gather_rows(table, vec![2, 0, 2]);
            let y = g.matmul_nt(x, w);
            let lp = g.log_softmax(y, Some(mask.clone()));
            let p = g.pick(lp, vec![0, 1, 2]);
            let left = g.slice_cols(x, 0, 2);
            let right = g.slice_cols(x, 2, 1);
            let cat = g.concat_cols(&[right, left]);
            let stacked = g.concat_rows(&[cat, x]);
            let r = g.relu(stacked);
            let rs = g.sum_rows(r);
            let a = g.sum(p);
            let b = g.mean(rs);
            let b = g.scale(b, 0.3);
            g.add(a, b)
        });
    }

    #[test]
    fn masked_entries() {
        let mut g: Graph = Graph::new();
        let x = g.constant(Mat::from_rows(&[[1.0, 2.0], [3.0, 4.0]]));
        let m = Rc::new(Mask::causal(2));
        let sm = g.softmax(x, Some(m.clone()));
        assert_eq!(g.value(sm).row(0), &[1.0, 0.0]);
        let lsm = g.log_softmax(x, Some(m));
        assert_eq!(g.value(lsm).get(0, 1), f64::NEG_INFINITY);
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut s = store_with(&[(2, 2)]);
        let mut g: Graph = Graph::new();
        let a = g.param(&s, ParamId(0));
        let d = g.detach(a);
        let y = g.mul(a, d);
        let l = g.sum(y);
        let grads = g.backward(l);
        let mut buf = s.zero_grads();
        grads.accumulate_into(&mut buf);
        // d/da sum(a * const(a)) = a
        assert_eq!(buf[0], s.value(ParamId(0)).clone());
        assert!(grads.of(d).is_none());
        s.value_mut(ParamId(0)).data[0] = 9.0;
    }
}
