//! Reverse-mode automatic differentiation over a per-pass tape.
//!
//! A [`Graph`] records every operation of one forward pass. Calling
//! [`Graph::backward`] consumes the tape and returns [`Gradients`], which can
//! then be accumulated into the [`ParamStore`] the graph read from.
//!
//! All reductions run in a fixed sequential order, so forward values and
//! gradients are bit-reproducible for identical inputs.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::{ParamId, ParamStore, Tensor};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Powf(Var, f64),
    Clamp(Var, f64, f64),
    Relu(Var),
    Sigmoid(Var),
    Log(Var),
    Exp(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    SumCols(Var),
    NormRows(Var),
    Stack(Vec<Var>),
    IndexRows(Var, Vec<usize>),
    Reshape(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Tape of one forward pass.
#[derive(Debug)]
pub struct Graph<'p> {
    nodes: Vec<Node>,
    params: Option<&'p ParamStore>,
    bound: HashMap<ParamId, Var>,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

/// Splits a 1-D or 2-D shape into (rows, cols); 1-D counts as a single row.
fn as_matrix(shape: &[usize]) -> Option<(usize, usize)> {
    match shape {
        [] => Some((1, 1)),
        [n] => Some((1, *n)),
        [m, n] => Some((*m, *n)),
        _ => None,
    }
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
    out
}

fn transpose_raw(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

fn softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &x) in out.iter_mut().zip(row) {
        *o = (x - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

impl<'p> Graph<'p> {
    /// A graph with no parameter store; only leaves and constants.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: None,
            bound: HashMap::new(),
        }
    }

    pub fn with_params(params: &'p ParamStore) -> Self {
        Self {
            nodes: Vec::new(),
            params: Some(params),
            bound: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let src = &self.nodes[x.0].value;
        let data = src.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::new(src.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(value, op, rg)
    }

    fn matrix_dims(&self, op: &'static str, x: Var) -> Result<(usize, usize)> {
        let shape = self.shape(x);
        as_matrix(shape).ok_or_else(|| Error::shape(op, shape, &[]))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Records a value that takes no gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Records a leaf whose gradient is reported by [`Gradients::wrt`].
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Binds a stored parameter onto the tape. Repeated calls return the same var.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let store = self.params.expect("graph has no parameter store");
        let t = store.tensor(id);
        let value = Tensor::new(t.shape().to_vec(), t.data().to_vec()).expect("valid");
        let v = self.push(value, Op::Param, true);
        self.bound.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], data)?, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(Error::shape("transpose", s, &[]));
        }
        let (m, n) = (s[0], s[1]);
        let data = transpose_raw(self.value(a).data(), m, n);
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(vec![n, m], data)?, Op::Transpose(a), rg))
    }

    fn zip(&mut self, op_name: &'static str, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape(op_name, ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// Adds vector `b` (length n) to every row of matrix `a` (m×n).
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 1 || sa[1] != sb[0] {
            return Err(Error::shape("add_row", sa, sb));
        }
        let n = sb[0];
        let bias = self.value(b).data();
        let data = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + bias[i % n])
            .collect();
        let value = Tensor::new(sa.to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::AddRow(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, Op::Scale(a, s), |x| x * s)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, Op::AddScalar(a), |x| x + s)
    }

    pub fn powf(&mut self, a: Var, p: f64) -> Var {
        self.unary(a, Op::Powf(a, p), |x| x.powf(p))
    }

    /// Clamps into `[lo, hi]`; gradient passes only inside the interval.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, Op::Clamp(a, lo, hi), |x| x.clamp(lo, hi))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| if x > 0.0 { x } else { 0.0 })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), |x| {
            if x >= 0.0 {
                1.0 / (1.0 + (-x).exp())
            } else {
                let e = x.exp();
                e / (1.0 + e)
            }
        })
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let v = self.unary(a, Op::Log(a), f64::ln);
        if !self.value(v).is_finite() {
            return Err(Error::Numeric("log".into()));
        }
        Ok(v)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let v = self.unary(a, Op::Exp(a), f64::exp);
        if !self.value(v).is_finite() {
            return Err(Error::Numeric("exp".into()));
        }
        Ok(v)
    }

    fn rowwise(&mut self, name: &'static str, a: Var, op: Op, log: bool) -> Result<Var> {
        let (m, n) = self.matrix_dims(name, a)?;
        if n == 0 {
            return Err(Error::EmptyInput(name));
        }
        let src = self.value(a);
        if !src.is_finite() {
            return Err(Error::Numeric(name.into()));
        }
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            let row = &src.data()[i * n..(i + 1) * n];
            let out = &mut data[i * n..(i + 1) * n];
            softmax_row(row, out);
            if log {
                // log-sum-exp form keeps tiny probabilities exact
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
                for (o, &x) in out.iter_mut().zip(row) {
                    *o = x - lse;
                }
            }
        }
        let value = Tensor::new(src.shape().to_vec(), data)?;
        let rg = self.rg(a);
        Ok(self.push(value, op, rg))
    }

    /// Row-wise softmax, stabilised by subtracting each row's maximum.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        self.rowwise("softmax_rows", a, Op::SoftmaxRows(a), false)
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        self.rowwise("log_softmax_rows", a, Op::LogSoftmaxRows(a), true)
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(total), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.is_empty() {
            return Err(Error::EmptyInput("mean"));
        }
        let m = t.data().iter().sum::<f64>() / t.len() as f64;
        let rg = self.rg(a);
        Ok(self.push(Tensor::scalar(m), Op::Mean(a), rg))
    }

    /// Global average pooling: mean over the rows of a D×C matrix, giving C values.
    pub fn global_average_pool(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(Error::shape("global_average_pool", s, &[]));
        }
        let (d, c) = (s[0], s[1]);
        if d == 0 {
            return Err(Error::EmptyInput("global_average_pool"));
        }
        let src = self.value(a).data();
        let mut out = vec![0.0; c];
        for i in 0..d {
            for (o, &x) in out.iter_mut().zip(&src[i * c..(i + 1) * c]) {
                *o += x;
            }
        }
        for o in &mut out {
            *o /= d as f64;
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::vector(out), Op::MeanRows(a), rg))
    }

    /// Per-row sums of an m×n matrix, giving m values.
    pub fn sum_cols(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.matrix_dims("sum_cols", a)?;
        let src = self.value(a).data();
        let out = (0..m).map(|i| src[i * n..(i + 1) * n].iter().sum()).collect();
        let rg = self.rg(a);
        Ok(self.push(Tensor::vector(out), Op::SumCols(a), rg))
    }

    /// Per-row Euclidean norms. The gradient of a zero row is taken as zero.
    pub fn norm_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.matrix_dims("norm_rows", a)?;
        let src = self.value(a).data();
        let out = (0..m)
            .map(|i| src[i * n..(i + 1) * n].iter().map(|x| x * x).sum::<f64>().sqrt())
            .collect();
        let rg = self.rg(a);
        Ok(self.push(Tensor::vector(out), Op::NormRows(a), rg))
    }

    /// Stacks equal-shape inputs along a new leading axis (vectors) or the
    /// existing row axis (matrices).
    pub fn stack(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(Error::EmptyInput("stack"))?;
        let shape = self.shape(first).to_vec();
        let mut data = Vec::with_capacity(shape.iter().product::<usize>() * parts.len());
        for &p in parts {
            if self.shape(p) != shape.as_slice() {
                return Err(Error::shape("stack", &shape, self.shape(p)));
            }
            data.extend_from_slice(self.value(p).data());
        }
        let out_shape = match shape.as_slice() {
            [] => vec![parts.len()],
            [n] => vec![parts.len(), *n],
            [m, n] => vec![parts.len() * m, *n],
            _ => return Err(Error::shape("stack", &shape, &[])),
        };
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::new(out_shape, data)?, Op::Stack(parts.to_vec()), rg))
    }

    /// Gathers rows of an m×n matrix (indices may repeat); result is len×n.
    pub fn index_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (m, n) = self.matrix_dims("index_rows", a)?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= m) {
            return Err(Error::shape("index_rows", &[m, n], &[bad]));
        }
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            data.extend_from_slice(&src[i * n..(i + 1) * n]);
        }
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::new(vec![idx.len(), n], data)?,
            Op::IndexRows(a, idx.to_vec()),
            rg,
        ))
    }

    /// Row `i` of a matrix, as a vector.
    pub fn row(&mut self, a: Var, i: usize) -> Result<Var> {
        let r = self.index_rows(a, &[i])?;
        let n = self.shape(r)[1];
        self.reshape(r, &[n])
    }

    /// Contiguous block of rows `[start, start + len)`.
    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let idx: Vec<usize> = (start..start + len).collect();
        self.index_rows(a, &idx)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a);
        if shape.iter().product::<usize>() != t.len() {
            return Err(Error::shape("reshape", t.shape(), shape));
        }
        let value = Tensor::new(shape.to_vec(), t.data().to_vec())?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    /// Runs reverse accumulation from a scalar `loss`, consuming the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf | Op::Param) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let mut send = |v: Var, contrib: Vec<f64>| {
                if !self.nodes[v.0].requires_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, c)| *a += c),
                    slot => *slot = Some(contrib),
                }
            };
            let y = node.value.data();
            match &node.op {
                Op::Leaf | Op::Param => unreachable!(),
                Op::MatMul(a, b) => {
                    let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                    if self.nodes[a.0].requires_grad {
                        let bt = transpose_raw(tb.data(), k, n);
                        send(*a, matmul_raw(&g, &bt, m, n, k));
                    }
                    if self.nodes[b.0].requires_grad {
                        let at = transpose_raw(ta.data(), m, k);
                        send(*b, matmul_raw(&at, &g, k, m, n));
                    }
                }
                Op::Transpose(a) => {
                    let s = node.value.shape();
                    send(*a, transpose_raw(&g, s[0], s[1]));
                }
                Op::Add(a, b) => {
                    send(*a, g.clone());
                    send(*b, g);
                }
                Op::Sub(a, b) => {
                    send(*a, g.clone());
                    send(*b, g.iter().map(|x| -x).collect());
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (self.nodes[a.0].value.data(), self.nodes[b.0].value.data());
                    send(*a, g.iter().zip(tb).map(|(g, y)| g * y).collect());
                    send(*b, g.iter().zip(ta).map(|(g, x)| g * x).collect());
                }
                Op::AddRow(a, b) => {
                    let n = self.nodes[b.0].value.len();
                    let mut gb = vec![0.0; n];
                    for (i, &gi) in g.iter().enumerate() {
                        gb[i % n] += gi;
                    }
                    send(*a, g);
                    send(*b, gb);
                }
                Op::Scale(a, s) => send(*a, g.iter().map(|x| x * s).collect()),
                Op::AddScalar(a) | Op::Reshape(a) => send(*a, g),
                Op::Powf(a, p) => {
                    let x = self.nodes[a.0].value.data();
                    send(*a, g.iter().zip(x).map(|(g, &x)| g * p * x.powf(p - 1.0)).collect());
                }
                Op::Clamp(a, lo, hi) => {
                    let x = self.nodes[a.0].value.data();
                    send(
                        *a,
                        g.iter()
                            .zip(x)
                            .map(|(&g, &x)| if x >= *lo && x <= *hi { g } else { 0.0 })
                            .collect(),
                    );
                }
                Op::Relu(a) => {
                    let x = self.nodes[a.0].value.data();
                    send(*a, g.iter().zip(x).map(|(&g, &x)| if x > 0.0 { g } else { 0.0 }).collect());
                }
                Op::Sigmoid(a) => {
                    send(*a, g.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect());
                }
                Op::Log(a) => {
                    let x = self.nodes[a.0].value.data();
                    send(*a, g.iter().zip(x).map(|(g, x)| g / x).collect());
                }
                Op::Exp(a) => send(*a, g.iter().zip(y).map(|(g, y)| g * y).collect()),
                Op::SoftmaxRows(a) => {
                    let (m, n) = as_matrix(node.value.shape()).expect("matrix");
                    let mut gx = vec![0.0; m * n];
                    for i in 0..m {
                        let r = i * n..(i + 1) * n;
                        let dot: f64 = g[r.clone()].iter().zip(&y[r.clone()]).map(|(a, b)| a * b).sum();
                        for j in r {
                            gx[j] = y[j] * (g[j] - dot);
                        }
                    }
                    send(*a, gx);
                }
                Op::LogSoftmaxRows(a) => {
                    let (m, n) = as_matrix(node.value.shape()).expect("matrix");
                    let mut gx = vec![0.0; m * n];
                    for i in 0..m {
                        let r = i * n..(i + 1) * n;
                        let total: f64 = g[r.clone()].iter().sum();
                        for j in r {
                            gx[j] = g[j] - y[j].exp() * total;
                        }
                    }
                    send(*a, gx);
                }
                Op::Sum(a) => {
                    let n = self.nodes[a.0].value.len();
                    send(*a, vec![g[0]; n]);
                }
                Op::Mean(a) => {
                    let n = self.nodes[a.0].value.len();
                    send(*a, vec![g[0] / n as f64; n]);
                }
                Op::MeanRows(a) => {
                    let s = self.nodes[a.0].value.shape();
                    let (d, c) = (s[0], s[1]);
                    let mut gx = vec![0.0; d * c];
                    for i in 0..d {
                        for j in 0..c {
                            gx[i * c + j] = g[j] / d as f64;
                        }
                    }
                    send(*a, gx);
                }
                Op::SumCols(a) => {
                    let (m, n) = as_matrix(self.nodes[a.0].value.shape()).expect("matrix");
                    let mut gx = vec![0.0; m * n];
                    for i in 0..m {
                        gx[i * n..(i + 1) * n].fill(g[i]);
                    }
                    send(*a, gx);
                }
                Op::NormRows(a) => {
                    let src = &self.nodes[a.0].value;
                    let (m, n) = as_matrix(src.shape()).expect("matrix");
                    let x = src.data();
                    let mut gx = vec![0.0; m * n];
                    for i in 0..m {
                        if y[i] > 0.0 {
                            for j in i * n..(i + 1) * n {
                                gx[j] = g[i] * x[j] / y[i];
                            }
                        }
                    }
                    send(*a, gx);
                }
                Op::Stack(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let len = self.nodes[p.0].value.len();
                        send(*p, g[offset..offset + len].to_vec());
                        offset += len;
                    }
                }
                Op::IndexRows(a, idx) => {
                    let src = &self.nodes[a.0].value;
                    let (m, n) = as_matrix(src.shape()).expect("matrix");
                    let mut gx = vec![0.0; m * n];
                    for (r, &i) in idx.iter().enumerate() {
                        for j in 0..n {
                            gx[i * n + j] += g[r * n + j];
                        }
                    }
                    send(*a, gx);
                }
            }
        }

        let params = self
            .bound
            .iter()
            .map(|(&id, &v)| (id, v))
            .collect::<Vec<_>>();
        Ok(Gradients { grads, params })
    }
}

/// Gradients produced by one backward pass.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    /// Gradient of the loss with respect to a leaf or parameter var.
    /// `None` when the var did not influence the loss.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn param(&self, id: ParamId) -> Option<&[f64]> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .and_then(|(_, v)| self.wrt(*v))
    }

    /// Adds these gradients into the parameters' `grad` buffers.
    pub fn accumulate_into(&self, store: &mut ParamStore) {
        for &(id, v) in &self.params {
            let Some(g) = self.wrt(v) else { continue };
            let t = store.tensor_mut(id);
            let buf = t.grad.get_or_insert_with(|| vec![0.0; g.len()]);
            buf.iter_mut().zip(g).for_each(|(a, b)| *a += b);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_value() {
        let mut g = Graph::new();
        let i2 = g.constant(Tensor::identity(2));
        let a = g.constant(m(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let ia = g.matmul(i2, a).unwrap();
        assert_eq!(g.value(ia).data(), g.value(a).data());
        let ones = g.constant(m(&[&[1.0], &[1.0]]));
        let r = g.matmul(a, ones).unwrap();
        assert_eq!(g.value(r).shape(), &[2, 1]);
        assert_eq!(g.value(r).data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
        assert!(matches!(err, Error::Shape { .. }));
    }

    #[test]
    fn matmul_grad_is_ones_times_bt() {
        let mut g = Graph::new();
        let a = g.leaf(m(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]]));
        let b = g.constant(m(&[&[1.0, -1.0], &[0.5, 2.0], &[3.0, 0.0]]));
        let c = g.matmul(a, b).unwrap();
        let s = g.sum(c);
        let grads = g.backward(s).unwrap();
        // ones(2x2) * B^T: each row is the row sums of B
        assert_eq!(grads.wrt(a).unwrap(), &[0.0, 2.5, 3.0, 0.0, 2.5, 3.0]);
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::new();
        let x = g.constant(m(&[&[2.0, 2.0, 2.0, 2.0], &[0.0, 3f64.ln(), 0.0, 0.0]]));
        let x = g.slice_rows(x, 0, 2).unwrap();
        let s = g.softmax_rows(x).unwrap();
        let v = g.value(s).data();
        for &p in &v[..4] {
            assert!((p - 0.25).abs() < 1e-15);
        }
        assert!((v[4] - 1.0 / 6.0).abs() < 1e-12);

        let y = g.constant(Tensor::vector(vec![0.0, 3f64.ln()]));
        let s = g.softmax_rows(y).unwrap();
        let v = g.value(s).data();
        assert!((v[0] - 0.25).abs() < 1e-12 && (v[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn softmax_rejects_non_finite() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![0.0, f64::NAN]));
        assert!(matches!(g.softmax_rows(x), Err(Error::Numeric(_))));
    }

    #[test]
    fn relu_values_and_mask() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![-1.0, 0.0, 2.0]));
        let r = g.relu(x);
        assert_eq!(g.value(r).data(), &[0.0, 0.0, 2.0]);
        let s = g.sum(r);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(x).unwrap(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn gap_examples() {
        let mut g = Graph::new();
        let x = g.constant(m(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let p = g.global_average_pool(x).unwrap();
        assert_eq!(g.value(p).data(), &[2.0, 3.0]);
        let one = g.constant(m(&[&[5.0, -1.0, 7.0]]));
        let p = g.global_average_pool(one).unwrap();
        assert_eq!(g.value(p).data(), &[5.0, -1.0, 7.0]);
        let empty = g.constant(Tensor::zeros(&[0, 3]));
        assert!(matches!(
            g.global_average_pool(empty),
            Err(Error::EmptyInput(_))
        ));
    }

    #[test]
    fn backward_sum_and_square() {
        let mut store = ParamStore::new();
        let id = store.add("p", Tensor::vector(vec![1.0, -2.0, 0.5])).unwrap();

        let mut g = Graph::with_params(&store);
        let p = g.param(id);
        let s = g.sum(p);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.param(id).unwrap(), &[1.0, 1.0, 1.0]);

        let mut g = Graph::with_params(&store);
        let p = g.param(id);
        let sq = g.mul(p, p).unwrap();
        let s = g.sum(sq);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.param(id).unwrap(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn backward_accumulates_across_calls() {
        let mut store = ParamStore::new();
        let id = store.add("p", Tensor::vector(vec![3.0, 4.0])).unwrap();
        for _ in 0..2 {
            let mut g = Graph::with_params(&store);
            let p = g.param(id);
            let s = g.sum(p);
            let grads = g.backward(s).unwrap();
            grads.accumulate_into(&mut store);
        }
        assert_eq!(store.grad(id), &[2.0, 2.0]);
        store.zero_grad();
        assert_eq!(store.grad(id), &[0.0, 0.0]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn norm_rows_zero_row_has_zero_grad() {
        let mut g = Graph::new();
        let x = g.leaf(m(&[&[0.0, 0.0], &[3.0, 4.0]]));
        let n = g.norm_rows(x).unwrap();
        assert_eq!(g.value(n).data(), &[0.0, 5.0]);
        let s = g.sum(n);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(x).unwrap(), &[0.0, 0.0, 0.6, 0.8]);
    }

    #[test]
    fn index_rows_scatter_adds() {
        let mut g = Graph::new();
        let x = g.leaf(m(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let r = g.index_rows(x, &[1, 1, 0]).unwrap();
        assert_eq!(g.value(r).data(), &[3.0, 4.0, 3.0, 4.0, 1.0, 2.0]);
        let s = g.sum(r);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(x).unwrap(), &[1.0, 1.0, 2.0, 2.0]);
    }
}
