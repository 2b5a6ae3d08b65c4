//! Tensor-level reverse-mode differentiation.
//!
//! Operations are recorded into a [`Tape`] as they execute; [`Tape::backward`]
//! walks the record in reverse and accumulates vector-Jacobian products.
//! Nodes whose inputs never require a gradient are skipped on the way back.

use crate::error::{Error, Result};
use crate::numkernel::ops;
use crate::numkernel::tensor::{matmul_kernel, matmul_nt_kernel, matmul_tn_kernel, Tensor};

/// Handle to a node on a [`Tape`]. Only meaningful for the tape that made it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    Column(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    CausalSoftmax(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gelu(Var),
    Ln(Var),
    Sum(Var),
    Mean(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
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

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A trainable input.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A constant input; no gradient is computed for it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        let data = matmul_kernel(self.value(a).data(), self.value(b).data(), m, k, n);
        let out = Tensor::new(vec![m, n], data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (n, k2) = self.dims(b);
        if k != k2 {
            return Err(Error::shape("matmul_nt", self.shape(a), self.shape(b)));
        }
        let data = matmul_nt_kernel(self.value(a).data(), self.value(b).data(), m, k, n);
        let out = Tensor::new(vec![m, n], data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatMulNt(a, b), rg))
    }

    fn zip_same(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(self.shape(a).to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("add", a, b, |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    /// Adds a length-`n` row to every row of an `m x n` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, n) = self.dims(a);
        if self.value(row).len() != n {
            return Err(Error::shape("add_row", self.shape(a), self.shape(row)));
        }
        let r = self.value(row).data().to_vec();
        let mut data = self.value(a).data().to_vec();
        for i in 0..m {
            for (x, y) in data[i * n..(i + 1) * n].iter_mut().zip(&r) {
                *x += y;
            }
        }
        let out = Tensor::new(vec![m, n], data)?;
        let rg = self.rg(&[a, row]);
        Ok(self.push(out, Op::AddRow(a, row), rg))
    }

    /// Scales row `i` of an `m x n` matrix by `col[i]`.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (m, n) = self.dims(a);
        if self.value(col).len() != m {
            return Err(Error::shape("mul_col", self.shape(a), self.shape(col)));
        }
        let c = self.value(col).data().to_vec();
        let mut data = self.value(a).data().to_vec();
        for i in 0..m {
            for x in &mut data[i * n..(i + 1) * n] {
                *x *= c[i];
            }
        }
        let out = Tensor::new(vec![m, n], data)?;
        let rg = self.rg(&[a, col]);
        Ok(self.push(out, Op::MulCol(a, col), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).scale(c);
        let rg = self.rg(&[a]);
        self.push(out, Op::Scale(a, c), rg)
    }

    /// Column `j` of an `m x n` matrix as an `m x 1` matrix.
    pub fn column(&mut self, a: Var, j: usize) -> Result<Var> {
        let (m, n) = self.dims(a);
        if j >= n {
            return Err(Error::InvalidShape {
                op: "column",
                msg: format!("column {j} out of range for {:?}", self.shape(a)),
            });
        }
        let src = self.value(a).data();
        let data = (0..m).map(|i| src[i * n + j]).collect();
        let out = Tensor::new(vec![m, 1], data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Column(a, j), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::invalid("concat_cols of nothing"))?;
        let m = self.dims(first).0;
        let mut total = 0;
        for &p in parts {
            let (pm, pn) = self.dims(p);
            if pm != m {
                return Err(Error::shape("concat_cols", self.shape(first), self.shape(p)));
            }
            total += pn;
        }
        let mut data = vec![0.0; m * total];
        let mut off = 0;
        for &p in parts {
            let (_, pn) = self.dims(p);
            let src = self.value(p).data();
            for i in 0..m {
                data[i * total + off..i * total + off + pn].copy_from_slice(&src[i * pn..(i + 1) * pn]);
            }
            off += pn;
        }
        let out = Tensor::new(vec![m, total], data)?;
        let rg = self.rg(parts);
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::invalid("concat_rows of nothing"))?;
        let n = self.dims(first).1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (pm, pn) = self.dims(p);
            if pn != n {
                return Err(Error::shape("concat_rows", self.shape(first), self.shape(p)));
            }
            data.extend_from_slice(self.value(p).data());
            rows += pm;
        }
        let out = Tensor::new(vec![rows, n], data)?;
        let rg = self.rg(parts);
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Rows `idx[0], idx[1], ...` of `a`; indices may repeat.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (m, n) = self.dims(a);
        if let Some(&bad) = idx.iter().find(|&&i| i >= m) {
            return Err(Error::InvalidShape {
                op: "gather_rows",
                msg: format!("row {bad} out of range for {:?}", self.shape(a)),
            });
        }
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            data.extend_from_slice(&src[i * n..(i + 1) * n]);
        }
        let out = Tensor::new(vec![idx.len(), n], data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::GatherRows(a, idx.to_vec()), rg))
    }

    /// Row-wise softmax restricted to the lower triangle; see [`ops::causal_softmax`].
    pub fn causal_softmax(&mut self, a: Var) -> Result<Var> {
        let out = ops::causal_softmax(self.value(a))?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::CausalSoftmax(a), rg))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let out = ops::softmax_rows(self.value(a))?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::SoftmaxRows(a), rg))
    }

    /// Per-row normalization followed by elementwise gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (m, n) = self.dims(x);
        if self.value(gamma).len() != n || self.value(beta).len() != n {
            return Err(Error::shape("layer_norm", self.shape(x), self.shape(gamma)));
        }
        let src = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; m * n];
        let mut rstd = vec![0.0; m];
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            let row = &src[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[i] = rs;
            for j in 0..n {
                let h = (row[j] - mean) * rs;
                xhat[i * n + j] = h;
                data[i * n + j] = h * g[j] + b[j];
            }
        }
        let out = Tensor::new(self.shape(x).to_vec(), data)?;
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(ops::gelu);
        let rg = self.rg(&[a]);
        self.push(out, Op::Gelu(a), rg)
    }

    /// Natural logarithm; inputs must be positive.
    pub fn ln(&mut self, a: Var) -> Result<Var> {
        if self.value(a).data().iter().any(|&v| v <= 0.0) {
            return Err(Error::invalid("ln of a non-positive value"));
        }
        let out = self.value(a).map(f64::ln);
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Ln(a), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.len().max(1) as f64;
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    /// Reverse sweep from a scalar `loss`. Every node created with
    /// `requires_grad` gets an entry, zero if the loss does not depend on it.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let node = self
            .nodes
            .get(loss.0)
            .ok_or_else(|| Error::invalid("loss is not a node of this tape"))?;
        if node.value.len() != 1 {
            return Err(Error::InvalidShape {
                op: "backward",
                msg: format!("loss must be a scalar, got shape {:?}", node.value.shape()),
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(node.value.shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }

        for (i, node) in self.nodes.iter().enumerate() {
            if node.requires_grad && grads[i].is_none() {
                grads[i] = Some(Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => {
                for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    fn with_shape(&self, v: Var, data: Vec<f64>) -> Tensor {
        Tensor::new(self.shape(v).to_vec(), data).expect("gradient shape matches its node")
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims(*a);
                let n = self.dims(*b).1;
                if self.requires_grad(*a) {
                    let da = matmul_nt_kernel(gd, self.value(*b).data(), m, n, k);
                    self.accumulate(grads, *a, self.with_shape(*a, da));
                }
                if self.requires_grad(*b) {
                    let db = matmul_tn_kernel(self.value(*a).data(), gd, m, k, n);
                    self.accumulate(grads, *b, self.with_shape(*b, db));
                }
            }
            Op::MatMulNt(a, b) => {
                // out = a bᵀ with a: m x k, b: n x k
                let (m, k) = self.dims(*a);
                let n = self.dims(*b).0;
                if self.requires_grad(*a) {
                    let da = matmul_kernel(gd, self.value(*b).data(), m, n, k);
                    self.accumulate(grads, *a, self.with_shape(*a, da));
                }
                if self.requires_grad(*b) {
                    let db = matmul_tn_kernel(gd, self.value(*a).data(), m, n, k);
                    self.accumulate(grads, *b, self.with_shape(*b, db));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                if self.requires_grad(*a) {
                    let d = gd.iter().zip(self.value(*b).data()).map(|(x, y)| x * y).collect();
                    self.accumulate(grads, *a, self.with_shape(*a, d));
                }
                if self.requires_grad(*b) {
                    let d = gd.iter().zip(self.value(*a).data()).map(|(x, y)| x * y).collect();
                    self.accumulate(grads, *b, self.with_shape(*b, d));
                }
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, g.clone());
                if self.requires_grad(*row) {
                    let (m, n) = self.dims(*a);
                    let mut d = vec![0.0; n];
                    for i in 0..m {
                        for (acc, x) in d.iter_mut().zip(&gd[i * n..(i + 1) * n]) {
                            *acc += x;
                        }
                    }
                    self.accumulate(grads, *row, self.with_shape(*row, d));
                }
            }
            Op::MulCol(a, col) => {
                let (m, n) = self.dims(*a);
                let c = self.value(*col).data();
                if self.requires_grad(*a) {
                    let mut d = gd.to_vec();
                    for i in 0..m {
                        for x in &mut d[i * n..(i + 1) * n] {
                            *x *= c[i];
                        }
                    }
                    self.accumulate(grads, *a, self.with_shape(*a, d));
                }
                if self.requires_grad(*col) {
                    let av = self.value(*a).data();
                    let d = (0..m)
                        .map(|i| {
                            gd[i * n..(i + 1) * n]
                                .iter()
                                .zip(&av[i * n..(i + 1) * n])
                                .map(|(x, y)| x * y)
                                .sum()
                        })
                        .collect();
                    self.accumulate(grads, *col, self.with_shape(*col, d));
                }
            }
            Op::Scale(a, c) => self.accumulate(grads, *a, g.scale(*c)),
            Op::Column(a, j) => {
                let (m, n) = self.dims(*a);
                let mut d = vec![0.0; m * n];
                for i in 0..m {
                    d[i * n + j] = gd[i];
                }
                self.accumulate(grads, *a, self.with_shape(*a, d));
            }
            Op::ConcatCols(parts) => {
                let m = self.dims(parts[0]).0;
                let total = g.cols();
                let mut off = 0;
                for &p in parts {
                    let pn = self.dims(p).1;
                    if self.requires_grad(p) {
                        let mut d = Vec::with_capacity(m * pn);
                        for i in 0..m {
                            d.extend_from_slice(&gd[i * total + off..i * total + off + pn]);
                        }
                        self.accumulate(grads, p, self.with_shape(p, d));
                    }
                    off += pn;
                }
            }
            Op::ConcatRows(parts) => {
                let n = g.cols();
                let mut off = 0;
                for &p in parts {
                    let pm = self.dims(p).0;
                    if self.requires_grad(p) {
                        let d = gd[off * n..(off + pm) * n].to_vec();
                        self.accumulate(grads, p, self.with_shape(p, d));
                    }
                    off += pm;
                }
            }
            Op::GatherRows(a, idx) => {
                let (m, n) = self.dims(*a);
                let mut d = vec![0.0; m * n];
                for (r, &i) in idx.iter().enumerate() {
                    for (acc, x) in d[i * n..(i + 1) * n].iter_mut().zip(&gd[r * n..(r + 1) * n]) {
                        *acc += x;
                    }
                }
                self.accumulate(grads, *a, self.with_shape(*a, d));
            }
            Op::CausalSoftmax(a) | Op::SoftmaxRows(a) => {
                let y = node.value.data();
                let (m, n) = (node.value.rows(), node.value.cols());
                let mut d = vec![0.0; m * n];
                for i in 0..m {
                    let yr = &y[i * n..(i + 1) * n];
                    let gr = &gd[i * n..(i + 1) * n];
                    let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for j in 0..n {
                        d[i * n + j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.accumulate(grads, *a, self.with_shape(*a, d));
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let (m, n) = self.dims(*x);
                let gam = self.value(*gamma).data();
                if self.requires_grad(*gamma) || self.requires_grad(*beta) {
                    let mut dg = vec![0.0; n];
                    let mut db = vec![0.0; n];
                    for i in 0..m {
                        for j in 0..n {
                            dg[j] += gd[i * n + j] * xhat[i * n + j];
                            db[j] += gd[i * n + j];
                        }
                    }
                    self.accumulate(grads, *gamma, self.with_shape(*gamma, dg));
                    self.accumulate(grads, *beta, self.with_shape(*beta, db));
                }
                if self.requires_grad(*x) {
                    let nf = n as f64;
                    let mut dx = vec![0.0; m * n];
                    for i in 0..m {
                        let mut sum_dh = 0.0;
                        let mut sum_dh_h = 0.0;
                        for j in 0..n {
                            let dh = gd[i * n + j] * gam[j];
                            sum_dh += dh;
                            sum_dh_h += dh * xhat[i * n + j];
                        }
                        for j in 0..n {
                            let dh = gd[i * n + j] * gam[j];
                            dx[i * n + j] =
                                rstd[i] / nf * (nf * dh - sum_dh - xhat[i * n + j] * sum_dh_h);
                        }
                    }
                    self.accumulate(grads, *x, self.with_shape(*x, dx));
                }
            }
            Op::Gelu(a) => {
                let d = gd
                    .iter()
                    .zip(self.value(*a).data())
                    .map(|(g, &x)| g * ops::gelu_grad(x))
                    .collect();
                self.accumulate(grads, *a, self.with_shape(*a, d));
            }
            Op::Ln(a) => {
                let d = gd.iter().zip(self.value(*a).data()).map(|(g, x)| g / x).collect();
                self.accumulate(grads, *a, self.with_shape(*a, d));
            }
            Op::Sum(a) => {
                let t = Tensor::full(self.shape(*a), gd[0]);
                self.accumulate(grads, *a, t);
            }
            Op::Mean(a) => {
                let len = self.value(*a).len().max(1) as f64;
                let t = Tensor::full(self.shape(*a), gd[0] / len);
                self.accumulate(grads, *a, t);
            }
        }
    }
}
