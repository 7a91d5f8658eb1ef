//! Define-by-run reverse-mode differentiation.
//!
//! Every primitive applied through a [`Tape`] is evaluated eagerly and
//! appended to the tape together with its output value. Because a node can
//! only reference nodes that already exist, the tape is topologically ordered
//! by construction and [`Tape::backward`] is a single reverse sweep.
//!
//! [`Tape::evaluate`] re-runs the recorded program with new leaf values, which
//! is what the finite-difference checks use.

use std::rc::Rc;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Probabilities are clamped to this floor before taking a logarithm.
pub const LOG_CLAMP: f64 = 1e-12;

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub enum Op {
    Leaf,
    /// `a · b`
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulT(Var, Var),
    Add(Var, Var),
    /// Matrix plus a row vector broadcast over rows.
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    RowSoftmax(Var),
    RowLogSoftmax(Var),
    /// Per-row zero-mean, unit-variance normalization with the given epsilon.
    RowStandardize(Var, f64),
    Sum(Var),
    Mean(Var),
    Dot(Var, Var),
    Norm(Var),
    ConcatCols(Vec<Var>),
    /// Row-wise log-sum-exp restricted to entries where the mask is set.
    MaskedRowLogSumExp(Var, Rc<[bool]>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::MatMulT(..) => "matmul_t",
            Op::Add(..) => "add",
            Op::AddRow(..) => "add_row",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::RowSoftmax(_) => "row_softmax",
            Op::RowLogSoftmax(_) => "row_log_softmax",
            Op::RowStandardize(..) => "row_standardize",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::Dot(..) => "dot",
            Op::Norm(_) => "norm",
            Op::ConcatCols(_) => "concat_cols",
            Op::MaskedRowLogSumExp(..) => "masked_row_logsumexp",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b)
            | Op::MatMulT(a, b)
            | Op::Add(a, b)
            | Op::AddRow(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Dot(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::Relu(a)
            | Op::Sigmoid(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::RowSoftmax(a)
            | Op::RowLogSoftmax(a)
            | Op::RowStandardize(a, _)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::Norm(a)
            | Op::MaskedRowLogSumExp(a, _) => vec![*a],
            Op::ConcatCols(vs) => vs.clone(),
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Tensor,
}

/// Ordered record of primitive applications and their outputs.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar output with respect to every node of a tape.
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `v`; nodes the output does not depend on get zeros.
    pub fn get(&self, v: Var) -> Vec<f64> {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => vec![0.0; self.shapes[v.0].iter().product()],
        }
    }

    pub fn take(&mut self, v: Var) -> Vec<f64> {
        match self.grads[v.0].take() {
            Some(g) => g,
            None => vec![0.0; self.shapes[v.0].iter().product()],
        }
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn need_matrix(op: &'static str, a: &Tensor) -> Result<()> {
    if !a.is_matrix() {
        return Err(Error::shape(op, format!("expected a matrix, got {:?}", a.shape())));
    }
    Ok(())
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("shape checked by caller")
}

pub(crate) fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    need_matrix("matmul", a)?;
    need_matrix("matmul", b)?;
    let (n, k, m) = (a.rows(), a.cols(), b.cols());
    if b.rows() != k {
        return Err(Error::shape("matmul", format!("{:?} x {:?}", a.shape(), b.shape())));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let orow = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let av = ad[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &bd[p * m..(p + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::matrix(n, m, out)
}

pub(crate) fn matmul_t(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    need_matrix("matmul_t", a)?;
    need_matrix("matmul_t", b)?;
    let (n, k, m) = (a.rows(), a.cols(), b.rows());
    if b.cols() != k {
        return Err(Error::shape("matmul_t", format!("{:?} x {:?}ᵀ", a.shape(), b.shape())));
    }
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let ar = a.row(i);
        for j in 0..m {
            out[i * m + j] = ar.iter().zip(b.row(j)).map(|(x, y)| x * y).sum();
        }
    }
    Tensor::matrix(n, m, out)
}

/// `aᵀ · b`
fn matmul_tn(a: &Tensor, b: &Tensor) -> Vec<f64> {
    let (n, k, m) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![0.0; k * m];
    for i in 0..n {
        let ar = a.row(i);
        let br = b.row(i);
        for (p, &av) in ar.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * m..(p + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(br) {
                *o += av * bv;
            }
        }
    }
    out
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

pub(crate) fn log_softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
    for (o, &v) in out.iter_mut().zip(row) {
        *o = v - lse;
    }
}

pub(crate) fn standardize_row(row: &[f64], eps: f64, out: &mut [f64]) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let s = (var + eps).sqrt();
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v - mean) / s;
    }
}

fn row_wise(a: &Tensor, f: impl Fn(&[f64], &mut [f64])) -> Tensor {
    let mut out = Tensor::zeros(a.shape().to_vec());
    let c = a.cols();
    for (src, dst) in a.data().chunks(c).zip(out.data_mut().chunks_mut(c)) {
        f(src, dst);
    }
    out
}

fn compute(op: &Op, nodes: &[Node]) -> Result<Tensor> {
    let v = |x: &Var| &nodes[x.0].value;
    Ok(match op {
        Op::Leaf => unreachable!("leaves carry their own values"),
        Op::MatMul(a, b) => matmul(v(a), v(b))?,
        Op::MatMulT(a, b) => matmul_t(v(a), v(b))?,
        Op::Add(a, b) => {
            same_shape("add", v(a), v(b))?;
            zip_map(v(a), v(b), |x, y| x + y)
        }
        Op::Sub(a, b) => {
            same_shape("sub", v(a), v(b))?;
            zip_map(v(a), v(b), |x, y| x - y)
        }
        Op::Mul(a, b) => {
            same_shape("mul", v(a), v(b))?;
            zip_map(v(a), v(b), |x, y| x * y)
        }
        Op::AddRow(a, b) => {
            let (m, r) = (v(a), v(b));
            need_matrix("add_row", m)?;
            if r.len() != m.cols() {
                return Err(Error::shape("add_row", format!("{:?} + row {:?}", m.shape(), r.shape())));
            }
            let mut out = m.clone();
            out.grad = None;
            for row in out.data_mut().chunks_mut(r.len()) {
                for (o, &b) in row.iter_mut().zip(r.data()) {
                    *o += b;
                }
            }
            out
        }
        Op::Scale(a, s) => v(a).map(|x| x * s),
        Op::Relu(a) => v(a).map(|x| if x > 0.0 { x } else { 0.0 }),
        Op::Sigmoid(a) => v(a).map(sigmoid),
        Op::Exp(a) => v(a).map(f64::exp),
        Op::Log(a) => v(a).map(|x| x.max(LOG_CLAMP).ln()),
        Op::RowSoftmax(a) => {
            need_matrix("row_softmax", v(a))?;
            row_wise(v(a), softmax_row)
        }
        Op::RowLogSoftmax(a) => {
            need_matrix("row_log_softmax", v(a))?;
            row_wise(v(a), log_softmax_row)
        }
        Op::RowStandardize(a, eps) => {
            need_matrix("row_standardize", v(a))?;
            let eps = *eps;
            row_wise(v(a), |r, o| standardize_row(r, eps, o))
        }
        Op::Sum(a) => Tensor::scalar(v(a).data().iter().sum()),
        Op::Mean(a) => Tensor::scalar(v(a).data().iter().sum::<f64>() / v(a).len() as f64),
        Op::Dot(a, b) => {
            same_shape("dot", v(a), v(b))?;
            Tensor::scalar(v(a).data().iter().zip(v(b).data()).map(|(x, y)| x * y).sum())
        }
        Op::Norm(a) => Tensor::scalar(v(a).data().iter().map(|x| x * x).sum::<f64>().sqrt()),
        Op::ConcatCols(vs) => {
            let first = vs.first().ok_or_else(|| Error::shape("concat_cols", "no inputs"))?;
            let rows = v(first).rows();
            let mut cols = 0;
            for x in vs {
                need_matrix("concat_cols", v(x))?;
                if v(x).rows() != rows {
                    return Err(Error::shape(
                        "concat_cols",
                        format!("row counts {} vs {}", v(x).rows(), rows),
                    ));
                }
                cols += v(x).cols();
            }
            let mut data = Vec::with_capacity(rows * cols);
            for i in 0..rows {
                for x in vs {
                    data.extend_from_slice(v(x).row(i));
                }
            }
            Tensor::matrix(rows, cols, data)?
        }
        Op::MaskedRowLogSumExp(a, mask) => {
            let x = v(a);
            need_matrix("masked_row_logsumexp", x)?;
            if mask.len() != x.len() {
                return Err(Error::shape(
                    "masked_row_logsumexp",
                    format!("mask of {} for {:?}", mask.len(), x.shape()),
                ));
            }
            let c = x.cols();
            let mut out = Vec::with_capacity(x.rows());
            for (i, row) in x.row_iter().enumerate() {
                let m = &mask[i * c..(i + 1) * c];
                let max = row
                    .iter()
                    .zip(m)
                    .filter(|(_, &on)| on)
                    .map(|(&v, _)| v)
                    .fold(f64::NEG_INFINITY, f64::max);
                if max == f64::NEG_INFINITY {
                    return Err(Error::shape("masked_row_logsumexp", format!("row {i} has an empty mask")));
                }
                let s: f64 = row.iter().zip(m).filter(|(_, &on)| on).map(|(&v, _)| (v - max).exp()).sum();
                out.push(max + s.ln());
            }
            Tensor::matrix(x.rows(), 1, out)?
        }
    })
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

    /// Declares a leaf (data, constant or parameter).
    pub fn leaf(&mut self, mut value: Tensor) -> Var {
        value.grad = None;
        self.nodes.push(Node { op: Op::Leaf, value });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Leaves in declaration order; these are the `inputs` of [`Tape::evaluate`].
    pub fn leaves(&self) -> Vec<Var> {
        (0..self.nodes.len()).filter(|&i| matches!(self.nodes[i].op, Op::Leaf)).map(Var).collect()
    }

    /// The op recorded for `v` and its input handles.
    pub fn record(&self, v: Var) -> (&'static str, Vec<Var>) {
        let op = &self.nodes[v.0].op;
        (op.name(), op.inputs())
    }

    fn push(&mut self, op: Op) -> Result<Var> {
        let value = compute(&op, &self.nodes)?;
        self.nodes.push(Node { op, value });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::MatMul(a, b))
    }
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::MatMulT(a, b))
    }
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Add(a, b))
    }
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.push(Op::AddRow(a, row))
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Sub(a, b))
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Mul(a, b))
    }
    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        self.push(Op::Scale(a, s))
    }
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Relu(a))
    }
    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Sigmoid(a))
    }
    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Exp(a))
    }
    pub fn ln(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Log(a))
    }
    pub fn row_softmax(&mut self, a: Var) -> Result<Var> {
        self.push(Op::RowSoftmax(a))
    }
    pub fn row_log_softmax(&mut self, a: Var) -> Result<Var> {
        self.push(Op::RowLogSoftmax(a))
    }
    pub fn row_standardize(&mut self, a: Var, eps: f64) -> Result<Var> {
        self.push(Op::RowStandardize(a, eps))
    }
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Sum(a))
    }
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Mean(a))
    }
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Dot(a, b))
    }
    pub fn norm(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Norm(a))
    }
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        self.push(Op::ConcatCols(parts.to_vec()))
    }
    pub fn masked_row_logsumexp(&mut self, a: Var, mask: Vec<bool>) -> Result<Var> {
        self.push(Op::MaskedRowLogSumExp(a, mask.into()))
    }

    /// Re-runs the recorded program with new leaf values (in [`Tape::leaves`]
    /// order) and returns the value of the last node.
    pub fn evaluate(&mut self, inputs: &[Tensor]) -> Result<&Tensor> {
        let leaves = self.leaves();
        if leaves.len() != inputs.len() {
            return Err(Error::shape(
                "evaluate",
                format!("tape declares {} inputs, got {}", leaves.len(), inputs.len()),
            ));
        }
        for (leaf, t) in leaves.iter().zip(inputs) {
            let slot = &mut self.nodes[leaf.0].value;
            if slot.shape() != t.shape() {
                return Err(Error::shape(
                    "evaluate",
                    format!("input {} expects {:?}, got {:?}", leaf.0, slot.shape(), t.shape()),
                ));
            }
            *slot = t.clone();
            slot.grad = None;
        }
        for i in 0..self.nodes.len() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let value = compute(&self.nodes[i].op, &self.nodes[..i])?;
            self.nodes[i].value = value;
        }
        self.nodes.last().map(|n| &n.value).ok_or_else(|| Error::shape("evaluate", "empty tape"))
    }

    /// Reverse sweep from the scalar `output`.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out = self.value(output);
        if !out.is_scalar() {
            return Err(Error::NonScalarOutput(out.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; output.0 + 1];
        grads[output.0] = Some(vec![1.0]);
        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        grads.resize(self.nodes.len(), None);
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let y = &node.value;
        let val = |v: &Var| &self.nodes[v.0].value;
        let mut acc = |v: Var, delta: Vec<f64>| match &mut grads[v.0] {
            Some(existing) => {
                for (e, d) in existing.iter_mut().zip(delta) {
                    *e += d;
                }
            }
            slot @ None => *slot = Some(delta),
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let gt = Tensor::matrix(y.rows(), y.cols(), g.to_vec()).expect("grad shape");
                let da = matmul_t(&gt, val(b)).expect("shapes recorded");
                let db = matmul_tn(val(a), &gt);
                acc(*a, da.into_data());
                acc(*b, db);
            }
            Op::MatMulT(a, b) => {
                let gt = Tensor::matrix(y.rows(), y.cols(), g.to_vec()).expect("grad shape");
                let da = matmul(&gt, val(b)).expect("shapes recorded");
                let db = matmul_tn(&gt, val(a));
                acc(*a, da.into_data());
                acc(*b, db);
            }
            Op::Add(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.iter().map(|x| -x).collect());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(a).data(), val(b).data());
                acc(*a, g.iter().zip(bv).map(|(g, b)| g * b).collect());
                acc(*b, g.iter().zip(av).map(|(g, a)| g * a).collect());
            }
            Op::AddRow(a, b) => {
                let c = y.cols();
                let mut db = vec![0.0; c];
                for row in g.chunks(c) {
                    for (d, &x) in db.iter_mut().zip(row) {
                        *d += x;
                    }
                }
                acc(*a, g.to_vec());
                acc(*b, db);
            }
            Op::Scale(a, s) => acc(*a, g.iter().map(|x| x * s).collect()),
            Op::Relu(a) => {
                let x = val(a).data();
                acc(*a, g.iter().zip(x).map(|(g, &x)| if x > 0.0 { *g } else { 0.0 }).collect());
            }
            Op::Sigmoid(a) => {
                acc(*a, g.iter().zip(y.data()).map(|(g, s)| g * s * (1.0 - s)).collect());
            }
            Op::Exp(a) => acc(*a, g.iter().zip(y.data()).map(|(g, e)| g * e).collect()),
            Op::Log(a) => {
                let x = val(a).data();
                acc(*a, g.iter().zip(x).map(|(g, &x)| if x > LOG_CLAMP { g / x } else { 0.0 }).collect());
            }
            Op::RowSoftmax(a) => {
                let c = y.cols();
                let mut d = Vec::with_capacity(g.len());
                for (gr, yr) in g.chunks(c).zip(y.data().chunks(c)) {
                    let dotp: f64 = gr.iter().zip(yr).map(|(g, y)| g * y).sum();
                    d.extend(gr.iter().zip(yr).map(|(g, y)| y * (g - dotp)));
                }
                acc(*a, d);
            }
            Op::RowLogSoftmax(a) => {
                let c = y.cols();
                let mut d = Vec::with_capacity(g.len());
                for (gr, yr) in g.chunks(c).zip(y.data().chunks(c)) {
                    let gs: f64 = gr.iter().sum();
                    d.extend(gr.iter().zip(yr).map(|(g, ly)| g - ly.exp() * gs));
                }
                acc(*a, d);
            }
            Op::RowStandardize(a, eps) => {
                let x = val(a);
                let c = x.cols();
                let n = c as f64;
                let mut d = Vec::with_capacity(g.len());
                for ((gr, yr), xr) in g.chunks(c).zip(y.data().chunks(c)).zip(x.data().chunks(c)) {
                    let mean = xr.iter().sum::<f64>() / n;
                    let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                    let s = (var + eps).sqrt();
                    let gm = gr.iter().sum::<f64>() / n;
                    let gy = gr.iter().zip(yr).map(|(g, y)| g * y).sum::<f64>() / n;
                    d.extend(gr.iter().zip(yr).map(|(g, y)| (g - gm - y * gy) / s));
                }
                acc(*a, d);
            }
            Op::Sum(a) => acc(*a, vec![g[0]; val(a).len()]),
            Op::Mean(a) => {
                let n = val(a).len();
                acc(*a, vec![g[0] / n as f64; n]);
            }
            Op::Dot(a, b) => {
                let (av, bv) = (val(a).data(), val(b).data());
                acc(*a, bv.iter().map(|b| g[0] * b).collect());
                acc(*b, av.iter().map(|a| g[0] * a).collect());
            }
            Op::Norm(a) => {
                let nrm = y.item();
                let x = val(a).data();
                if nrm > 0.0 {
                    acc(*a, x.iter().map(|x| g[0] * x / nrm).collect());
                } else {
                    acc(*a, vec![0.0; x.len()]);
                }
            }
            Op::ConcatCols(vs) => {
                let c = y.cols();
                let mut offset = 0;
                for v in vs {
                    let w = val(v).cols();
                    let mut d = Vec::with_capacity(val(v).len());
                    for row in g.chunks(c) {
                        d.extend_from_slice(&row[offset..offset + w]);
                    }
                    offset += w;
                    acc(*v, d);
                }
            }
            Op::MaskedRowLogSumExp(a, mask) => {
                let x = val(a);
                let c = x.cols();
                let mut d = vec![0.0; x.len()];
                for (r, row) in x.row_iter().enumerate() {
                    let lse = y.data()[r];
                    for j in 0..c {
                        if mask[r * c + j] {
                            d[r * c + j] = g[r] * (row[j] - lse).exp();
                        }
                    }
                }
                acc(*a, d);
            }
        }
    }
}
