//! Reverse-mode gradient tape.
//!
//! Every operation appends a node holding its forward value. `backward`
//! walks the nodes in exact reverse order of recording and accumulates
//! adjoints. Nodes that do not depend on any differentiable leaf are
//! skipped.

use super::tensor::{dot, gemm_nt, gemm_tn, Tensor};
use super::{NumericsError, EPS_LOG, EPS_NORM};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MulConst(Var, Tensor),
    Relu(Var),
    Log(Var),
    Exp(Var),
    SoftmaxRows(Var),
    L2NormalizeRows { x: Var, norms: Vec<f64> },
    GatherRows { x: Var, rows: Vec<usize> },
    Sum(Var),
    Mean(Var),
    SumRows(Var),
    RowDot(Var, Var),
    Dot(Var, Var),
    LogSumExpRows { x: Var, mask: Option<Vec<bool>> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation. Owned by a single evaluation; not shared.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the differentiated scalar w.r.t. `v`. Zero tensor when
    /// `v` did not influence it.
    pub fn get(&self, v: Var, like: &Tape) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(like.value(v).shape()),
        }
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads[v.0].take()
    }
}

fn shape_err(what: &str, a: &Tensor, b: &Tensor) -> NumericsError {
    NumericsError::Shape(format!("{what}: {:?} vs {:?}", a.shape(), b.shape()))
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Input treated as a constant: no gradient is propagated into it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    fn same_len(&self, what: &str, a: Var, b: Var) -> Result<(), NumericsError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.len() != tb.len() || ta.rows() != tb.rows() {
            return Err(shape_err(what, ta, tb));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.same_len("add", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.same_len("sub", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.same_len("mul", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    /// Broadcast a length-`n` bias over every row of an `m×n` matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var, NumericsError> {
        let (tx, tb) = (self.value(x), self.value(bias));
        if tx.cols() != tb.len() {
            return Err(shape_err("add_bias", tx, tb));
        }
        let n = tb.len();
        let mut value = tx.clone();
        for (i, v) in value.data_mut().iter_mut().enumerate() {
            *v += tb.data()[i % n];
        }
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(value, Op::AddBias(x, bias), rg))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let value = self.value(x).map(|v| v * s);
        let rg = self.rg(x);
        self.push(value, Op::Scale(x, s), rg)
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        let value = self.value(x).map(|v| v + s);
        let rg = self.rg(x);
        self.push(value, Op::AddScalar(x), rg)
    }

    /// Elementwise product with a constant tensor of the same size.
    pub fn mul_const(&mut self, x: Var, c: Tensor) -> Result<Var, NumericsError> {
        let tx = self.value(x);
        if tx.len() != c.len() {
            return Err(shape_err("mul_const", tx, &c));
        }
        let value = tx.zip_map(&c, |a, b| a * b);
        let rg = self.rg(x);
        Ok(self.push(value, Op::MulConst(x, c), rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(0.0));
        let rg = self.rg(x);
        self.push(value, Op::Relu(x), rg)
    }

    /// `log(max(x, EPS_LOG))`; the gradient is zero where the clamp is active.
    pub fn log(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(EPS_LOG).ln());
        let rg = self.rg(x);
        self.push(value, Op::Log(x), rg)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let value = self.value(x).map(f64::exp);
        let rg = self.rg(x);
        self.push(value, Op::Exp(x), rg)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let value = softmax_rows(self.value(x));
        let rg = self.rg(x);
        self.push(value, Op::SoftmaxRows(x), rg)
    }

    /// Row-wise Euclidean normalisation. Rows with norm below `EPS_NORM`
    /// are rejected.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var, NumericsError> {
        let tx = self.value(x);
        let mut value = tx.clone();
        let mut norms = Vec::with_capacity(tx.rows());
        for i in 0..tx.rows() {
            let row = value.row_mut(i);
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n < EPS_NORM || !n.is_finite() {
                return Err(NumericsError::Degenerate(n));
            }
            row.iter_mut().for_each(|v| *v /= n);
            norms.push(n);
        }
        let rg = self.rg(x);
        Ok(self.push(value, Op::L2NormalizeRows { x, norms }, rg))
    }

    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var, NumericsError> {
        let tx = self.value(x);
        let (r, c) = (tx.rows(), tx.cols());
        let mut data = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            if i >= r {
                return Err(NumericsError::Shape(format!("row {i} of {r}")));
            }
            data.extend_from_slice(tx.row(i));
        }
        let value = Tensor::matrix(rows.len(), c, data);
        let rg = self.rg(x);
        Ok(self.push(value, Op::GatherRows { x, rows: rows.to_vec() }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.push(value, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let value = Tensor::scalar(t.sum() / t.len() as f64);
        let rg = self.rg(x);
        self.push(value, Op::Mean(x), rg)
    }

    /// Sum each row, giving a vector of length `rows`.
    pub fn sum_rows(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let value = Tensor::vector((0..t.rows()).map(|i| t.row(i).iter().sum()).collect());
        let rg = self.rg(x);
        self.push(value, Op::SumRows(x), rg)
    }

    /// Per-row inner product of two equally shaped matrices.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.same_len("row_dot", a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let value = Tensor::vector((0..ta.rows()).map(|i| dot(ta.row(i), tb.row(i))).collect());
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::RowDot(a, b), rg))
    }

    /// Inner product of the flattened tensors.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.len() != tb.len() {
            return Err(shape_err("dot", ta, tb));
        }
        let value = Tensor::scalar(dot(ta.data(), tb.data()));
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Dot(a, b), rg))
    }

    /// `log Σ_c exp(x_rc)` per row, restricted to columns where `mask` is true.
    pub fn logsumexp_rows(&mut self, x: Var, mask: Option<Vec<bool>>) -> Result<Var, NumericsError> {
        let t = self.value(x);
        if let Some(m) = &mask {
            if m.len() != t.cols() {
                return Err(NumericsError::Shape(format!("mask of {} for {} columns", m.len(), t.cols())));
            }
            if !m.iter().any(|&b| b) {
                return Err(NumericsError::Shape("mask selects no column".into()));
            }
        }
        let value = Tensor::vector((0..t.rows()).map(|i| masked_logsumexp(t.row(i), mask.as_deref())).collect());
        let rg = self.rg(x);
        Ok(self.push(value, Op::LogSumExpRows { x, mask }, rg))
    }

    /// Gradients of the scalar `output` w.r.t. every recorded node.
    pub fn backward(&self, output: Var) -> Result<Gradients, NumericsError> {
        if self.value(output).len() != 1 {
            return Err(NumericsError::Shape("backward needs a scalar output".into()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(Tensor::new(self.value(output).shape().to_vec(), vec![1.0])?);

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let mut acc = |v: Var, delta: Tensor| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&delta),
                slot @ None => *slot = Some(delta),
            }
        };
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                if self.rg(*a) {
                    let da = gemm_nt(g.data(), tb.data(), m, n, k);
                    acc(*a, Tensor::new(ta.shape().to_vec(), da).unwrap());
                }
                if self.rg(*b) {
                    let db = gemm_tn(ta.data(), g.data(), m, k, n);
                    acc(*b, Tensor::new(tb.shape().to_vec(), db).unwrap());
                }
            }
            Op::Add(a, b) => {
                acc(*a, reshape_like(g, self.value(*a)));
                acc(*b, reshape_like(g, self.value(*b)));
            }
            Op::Sub(a, b) => {
                acc(*a, reshape_like(g, self.value(*a)));
                acc(*b, reshape_like(&g.map(|v| -v), self.value(*b)));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                acc(*a, reshape_like(&g.zip_map(tb, |x, y| x * y), ta));
                acc(*b, reshape_like(&g.zip_map(ta, |x, y| x * y), tb));
            }
            Op::AddBias(x, bias) => {
                acc(*x, g.clone());
                let tb = self.value(*bias);
                let n = tb.len();
                let mut db = vec![0.0; n];
                for (i, v) in g.data().iter().enumerate() {
                    db[i % n] += v;
                }
                acc(*bias, Tensor::new(tb.shape().to_vec(), db).unwrap());
            }
            Op::Scale(x, s) => acc(*x, g.map(|v| v * s)),
            Op::AddScalar(x) => acc(*x, g.clone()),
            Op::MulConst(x, c) => acc(*x, g.zip_map(c, |a, b| a * b)),
            Op::Relu(x) => {
                let tx = self.value(*x);
                acc(*x, g.zip_map(tx, |gv, xv| if xv > 0.0 { gv } else { 0.0 }));
            }
            Op::Log(x) => {
                let tx = self.value(*x);
                acc(*x, g.zip_map(tx, |gv, xv| if xv > EPS_LOG { gv / xv } else { 0.0 }));
            }
            Op::Exp(x) => acc(*x, g.zip_map(y, |gv, yv| gv * yv)),
            Op::SoftmaxRows(x) => {
                let mut dx = g.clone();
                for i in 0..y.rows() {
                    let yr = y.row(i);
                    let s = dot(g.row(i), yr);
                    for (d, &yv) in dx.row_mut(i).iter_mut().zip(yr) {
                        *d = yv * (*d - s);
                    }
                }
                acc(*x, dx);
            }
            Op::L2NormalizeRows { x, norms } => {
                let mut dx = g.clone();
                for (i, &n) in norms.iter().enumerate() {
                    let yr = y.row(i);
                    let s = dot(g.row(i), yr);
                    for (d, &yv) in dx.row_mut(i).iter_mut().zip(yr) {
                        *d = (*d - yv * s) / n;
                    }
                }
                acc(*x, dx);
            }
            Op::GatherRows { x, rows } => {
                let tx = self.value(*x);
                let mut dx = Tensor::zeros(tx.shape());
                for (k, &r) in rows.iter().enumerate() {
                    for (d, &gv) in dx.row_mut(r).iter_mut().zip(g.row(k)) {
                        *d += gv;
                    }
                }
                acc(*x, dx);
            }
            Op::Sum(x) => {
                let gv = g.item();
                acc(*x, self.value(*x).map(|_| gv));
            }
            Op::Mean(x) => {
                let tx = self.value(*x);
                let gv = g.item() / tx.len() as f64;
                acc(*x, tx.map(|_| gv));
            }
            Op::SumRows(x) => {
                let tx = self.value(*x);
                let mut dx = Tensor::zeros(tx.shape());
                for i in 0..tx.rows() {
                    let gv = g.data()[i];
                    dx.row_mut(i).iter_mut().for_each(|d| *d = gv);
                }
                acc(*x, dx);
            }
            Op::RowDot(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let scale_rows = |t: &Tensor| {
                    let mut out = t.clone();
                    for i in 0..t.rows() {
                        let gv = g.data()[i];
                        out.row_mut(i).iter_mut().for_each(|v| *v *= gv);
                    }
                    out
                };
                acc(*a, scale_rows(tb));
                acc(*b, scale_rows(ta));
            }
            Op::Dot(a, b) => {
                let gv = g.item();
                let (ta, tb) = (self.value(*a), self.value(*b));
                acc(*a, reshape_like(&tb.map(|v| v * gv), ta));
                acc(*b, reshape_like(&ta.map(|v| v * gv), tb));
            }
            Op::LogSumExpRows { x, mask } => {
                let tx = self.value(*x);
                let mut dx = Tensor::zeros(tx.shape());
                for i in 0..tx.rows() {
                    let lse = y.data()[i];
                    let gv = g.data()[i];
                    for (c, (d, &xv)) in dx.row_mut(i).iter_mut().zip(tx.row(i)).enumerate() {
                        if mask.as_ref().is_none_or(|m| m[c]) {
                            *d = gv * (xv - lse).exp();
                        }
                    }
                }
                acc(*x, dx);
            }
        }
    }
}

fn reshape_like(g: &Tensor, like: &Tensor) -> Tensor {
    if g.shape() == like.shape() {
        g.clone()
    } else {
        Tensor::new(like.shape().to_vec(), g.data().to_vec()).unwrap()
    }
}

pub(crate) fn masked_logsumexp(row: &[f64], mask: Option<&[bool]>) -> f64 {
    let keep = |c: usize| mask.is_none_or(|m| m[c]);
    let max = row.iter().enumerate().filter(|(c, _)| keep(*c)).map(|(_, &v)| v).fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = row.iter().enumerate().filter(|(c, _)| keep(*c)).map(|(_, &v)| (v - max).exp()).sum();
    max + s.ln()
}

/// Max-subtracted row-wise softmax.
pub fn softmax_rows(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    for i in 0..x.rows() {
        softmax_in_place(out.row_mut(i));
    }
    out
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        s += *v;
    }
    row.iter_mut().for_each(|v| *v /= s);
}
