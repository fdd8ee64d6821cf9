//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] is an append-only list of nodes. Each primitive evaluates its
//! forward value eagerly, stores whatever it needs for the reverse pass, and
//! returns a [`Var`] handle. Because nodes can only reference earlier nodes the
//! record is topologically ordered by construction, so [`Tape::backward`] is a
//! single reverse sweep. Gradients are summed in node order, which keeps every
//! run bit-for-bit reproducible.
//!
//! Nodes whose inputs are all constants are marked as not requiring a
//! gradient; the reverse sweep skips them entirely.

use super::tensor::{matmul_into, Tensor};
use crate::error::{Error, Result};

/// Denominator guard for [`Tape::layer_norm`].
pub const LAYER_NORM_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MulCol(Var, Var),
    MatMul(Var, Var),
    Affine { x: Var, w: Var, b: Var },
    AddRow(Var, Var),
    Transpose(Var),
    Silu(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Sum(Var),
    Mean(Var),
    Mse(Var, Var),
    LogSigmoid(Var),
    Softplus(Var),
    Concat(Vec<Var>),
    Slice { x: Var, start: usize, end: usize },
    Sin(Var),
    Cos(Var),
    Gather { table: Var, ids: Vec<usize> },
    PoolRows { x: Var, group: usize },
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
    backward_done: bool,
}

/// Per-node gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Takes ownership of a gradient, leaving `None` behind.
    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

fn col_sums(g: &Tensor) -> Vec<f64> {
    let (r, c) = (g.rows(), g.cols());
    let mut out = vec![0.0; c];
    for i in 0..r {
        for (o, &v) in out.iter_mut().zip(&g.data()[i * c..(i + 1) * c]) {
            *o += v;
        }
    }
    out
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool, name: &'static str) -> Result<Var> {
        let value = value.check_finite(name)?;
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Differentiable leaf (a parameter or an input we want gradients for).
    pub fn param(&mut self, t: Tensor) -> Result<Var> {
        self.push(t, Op::Leaf, true, "param")
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        self.push(t, Op::Leaf, false, "constant")
    }

    /// Copies `v` into a fresh constant leaf (stop-gradient).
    pub fn detach(&mut self, v: Var) -> Result<Var> {
        let t = self.value(v).clone();
        self.constant(t)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(op, sa, sb));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        let rg = self.rg(&[a, b]);
        self.push(out, Op::Add(a, b), rg, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).sub(self.value(b))?;
        let rg = self.rg(&[a, b]);
        self.push(out, Op::Sub(a, b), rg, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).mul(self.value(b))?;
        let rg = self.rg(&[a, b]);
        self.push(out, Op::Mul(a, b), rg, "mul")
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let out = self.value(a).scale(s);
        let rg = self.rg(&[a]);
        self.push(out, Op::Scale(a, s), rg, "scale")
    }

    /// Scales row `i` of a `[n, m]` tensor by `col[i]`; `col` has `n` elements.
    pub fn mul_col(&mut self, x: Var, col: Var) -> Result<Var> {
        let (xv, cv) = (self.value(x), self.value(col));
        let (n, m) = (xv.rows(), xv.cols());
        if cv.len() != n || xv.rank() != 2 {
            return Err(Error::shape("mul_col", xv.shape(), cv.shape()));
        }
        let mut out = xv.clone();
        for (i, row) in out.data_mut().chunks_mut(m).enumerate() {
            let s = cv.data()[i];
            row.iter_mut().for_each(|v| *v *= s);
        }
        let rg = self.rg(&[x, col]);
        self.push(out, Op::MulCol(x, col), rg, "mul_col")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(&[a, b]);
        self.push(out, Op::MatMul(a, b), rg, "matmul")
    }

    /// `x[n,k] * w[k,m] + b[m]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        if bv.len() != wv.cols() || wv.rank() != 2 {
            return Err(Error::shape("affine", wv.shape(), bv.shape()));
        }
        let mut out = xv.matmul(wv)?;
        let m = bv.len();
        for row in out.data_mut().chunks_mut(m) {
            for (o, &bb) in row.iter_mut().zip(bv.data()) {
                *o += bb;
            }
        }
        let rg = self.rg(&[x, w, b]);
        self.push(out, Op::Affine { x, w, b }, rg, "affine")
    }

    /// Adds a length-`m` vector to every row of `[n, m]`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (av, rv) = (self.value(a), self.value(row));
        let m = av.cols();
        if rv.len() != m {
            return Err(Error::shape("add_row", av.shape(), rv.shape()));
        }
        let mut out = av.clone();
        for r in out.data_mut().chunks_mut(m) {
            for (o, &b) in r.iter_mut().zip(rv.data()) {
                *o += b;
            }
        }
        let rg = self.rg(&[a, row]);
        self.push(out, Op::AddRow(a, row), rg, "add_row")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose()?;
        let rg = self.rg(&[a]);
        self.push(out, Op::Transpose(a), rg, "transpose")
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(silu);
        let rg = self.rg(&[a]);
        self.push(out, Op::Silu(a), rg, "silu")
    }

    /// Per-row normalization with learnable `gain` and `bias` of length `cols`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        let (n, m) = (xv.rows(), xv.cols());
        if gv.len() != m || bv.len() != m {
            return Err(Error::shape("layer_norm", xv.shape(), gv.shape()));
        }
        let mut xhat = vec![0.0; n * m];
        let mut inv_std = vec![0.0; n];
        let mut out = vec![0.0; n * m];
        let (g, b) = (gv.data(), bv.data());
        for (((row, hrow), orow), inv_slot) in xv
            .data()
            .chunks_exact(m)
            .zip(xhat.chunks_exact_mut(m))
            .zip(out.chunks_exact_mut(m))
            .zip(inv_std.iter_mut())
        {
            let mu = row.iter().sum::<f64>() / m as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / m as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            *inv_slot = inv;
            for ((h, o), (&v, (&gj, &bj))) in hrow.iter_mut().zip(orow.iter_mut()).zip(row.iter().zip(g.iter().zip(b))) {
                *h = (v - mu) * inv;
                *o = *h * gj + bj;
            }
        }
        let out = Tensor::new(xv.shape(), out)?;
        let rg = self.rg(&[x, gain, bias]);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
            "layer_norm",
        )
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(&[a]);
        self.push(out, Op::Sum(a), rg, "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        if self.value(a).is_empty() {
            return Err(Error::invalid("mean of empty tensor"));
        }
        let out = Tensor::scalar(self.value(a).mean());
        let rg = self.rg(&[a]);
        self.push(out, Op::Mean(a), rg, "mean")
    }

    /// Mean of squared elementwise differences.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mse", a, b)?;
        let (av, bv) = (self.value(a), self.value(b));
        let n = av.len().max(1) as f64;
        let s: f64 = av.data().iter().zip(bv.data()).map(|(x, y)| (x - y) * (x - y)).sum();
        let rg = self.rg(&[a, b]);
        self.push(Tensor::scalar(s / n), Op::Mse(a, b), rg, "mse")
    }

    pub fn log_sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| -softplus(-x));
        let rg = self.rg(&[a]);
        self.push(out, Op::LogSigmoid(a), rg, "log_sigmoid")
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(softplus);
        let rg = self.rg(&[a]);
        self.push(out, Op::Softplus(a), rg, "softplus")
    }

    /// Concatenates rank-2 tensors with equal row counts along columns.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let n = parts
            .first()
            .map(|&p| self.value(p).rows())
            .ok_or_else(|| Error::invalid("concat of nothing"))?;
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
        for &p in parts {
            if self.value(p).rows() != n || self.value(p).rank() != 2 {
                return Err(Error::shape("concat", &[n], self.value(p).shape()));
            }
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(n * total);
        for i in 0..n {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(i));
            }
        }
        let out = Tensor::new(&[n, total], out)?;
        let rg = self.rg(parts);
        self.push(out, Op::Concat(parts.to_vec()), rg, "concat")
    }

    /// Columns `start..end` of a rank-2 tensor.
    pub fn slice(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let xv = self.value(x);
        let (n, m) = (xv.rows(), xv.cols());
        if start > end || end > m || xv.rank() != 2 {
            return Err(Error::shape("slice", xv.shape(), &[start, end]));
        }
        let mut out = Vec::with_capacity(n * (end - start));
        for i in 0..n {
            out.extend_from_slice(&xv.row(i)[start..end]);
        }
        let out = Tensor::new(&[n, end - start], out)?;
        let rg = self.rg(&[x]);
        self.push(out, Op::Slice { x, start, end }, rg, "slice")
    }

    pub fn sin(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::sin);
        let rg = self.rg(&[a]);
        self.push(out, Op::Sin(a), rg, "sin")
    }

    pub fn cos(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::cos);
        let rg = self.rg(&[a]);
        self.push(out, Op::Cos(a), rg, "cos")
    }

    /// Row lookup into a `[rows, d]` table.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let out = self.value(table).select_rows(ids)?;
        let rg = self.rg(&[table]);
        self.push(
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            rg,
            "gather",
        )
    }

    /// Averages consecutive groups of `group` rows: `[n, m] -> [n / group, m]`.
    pub fn pool_rows(&mut self, x: Var, group: usize) -> Result<Var> {
        let xv = self.value(x);
        let (n, m) = (xv.rows(), xv.cols());
        if group == 0 || n % group != 0 || xv.rank() != 2 {
            return Err(Error::shape("pool_rows", xv.shape(), &[group]));
        }
        let groups = n / group;
        let mut out = vec![0.0; groups * m];
        let inv = 1.0 / group as f64;
        for i in 0..n {
            let o = &mut out[(i / group) * m..(i / group + 1) * m];
            for (a, &v) in o.iter_mut().zip(xv.row(i)) {
                *a += v * inv;
            }
        }
        let out = Tensor::new(&[groups, m], out)?;
        let rg = self.rg(&[x]);
        self.push(out, Op::PoolRows { x, group }, rg, "pool_rows")
    }

    /// Reverse sweep from a scalar root. May run once per tape.
    pub fn backward(&mut self, root: Var) -> Result<Gradients> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        let shape = self.value(root).shape().to_vec();
        if shape.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarRoot(shape));
        }
        self.backward_done = true;

        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::ones(&shape));

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                grads[idx] = Some(g);
                continue;
            }
            self.propagate(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accum(&self, grads: &mut [Option<Tensor>], at: Var, idx: usize, g: Tensor) -> Result<()> {
        assert!(at.0 < idx, "tape is not topologically ordered");
        if !self.nodes[at.0].requires_grad {
            return Ok(());
        }
        debug_assert_eq!(g.len(), self.nodes[at.0].value.len());
        match &mut grads[at.0] {
            Some(existing) => existing.axpy(1.0, &g)?,
            slot @ None => {
                let shape = self.nodes[at.0].value.shape().to_vec();
                *slot = Some(g.reshape(&shape)?);
            }
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accum(grads, *a, idx, g.clone())?;
                self.accum(grads, *b, idx, g.clone())?;
            }
            Op::Sub(a, b) => {
                self.accum(grads, *a, idx, g.clone())?;
                self.accum(grads, *b, idx, g.scale(-1.0))?;
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    self.accum(grads, *a, idx, g.mul(self.value(*b))?)?;
                }
                if self.wants(*b) {
                    self.accum(grads, *b, idx, g.mul(self.value(*a))?)?;
                }
            }
            Op::Scale(a, s) => self.accum(grads, *a, idx, g.scale(*s))?,
            Op::MulCol(x, col) => {
                let (xv, cv) = (self.value(*x), self.value(*col));
                let m = xv.cols();
                if self.wants(*x) {
                    let mut gx = g.clone();
                    for (i, row) in gx.data_mut().chunks_mut(m).enumerate() {
                        let s = cv.data()[i];
                        row.iter_mut().for_each(|v| *v *= s);
                    }
                    self.accum(grads, *x, idx, gx)?;
                }
                if self.wants(*col) {
                    let gc: Vec<f64> = g
                        .data()
                        .chunks(m)
                        .zip(xv.data().chunks(m))
                        .map(|(gr, xr)| gr.iter().zip(xr).map(|(a, b)| a * b).sum())
                        .collect();
                    self.accum(grads, *col, idx, Tensor::new(cv.shape(), gc)?)?;
                }
            }
            Op::MatMul(a, b) => self.matmul_backward(idx, *a, *b, g, grads)?,
            Op::Affine { x, w, b } => {
                self.matmul_backward(idx, *x, *w, g, grads)?;
                if self.wants(*b) {
                    let gb = Tensor::new(self.value(*b).shape(), col_sums(g))?;
                    self.accum(grads, *b, idx, gb)?;
                }
            }
            Op::AddRow(a, row) => {
                self.accum(grads, *a, idx, g.clone())?;
                if self.wants(*row) {
                    let gr = Tensor::new(self.value(*row).shape(), col_sums(g))?;
                    self.accum(grads, *row, idx, gr)?;
                }
            }
            Op::Transpose(a) => self.accum(grads, *a, idx, g.transpose()?)?,
            Op::Silu(a) => {
                let ga = g.zip_map(self.value(*a), "silu_grad", |g, x| g * silu_grad(x))?;
                self.accum(grads, *a, idx, ga)?;
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let (n, m) = (g.rows(), g.cols());
                let gv = self.value(*gain).data();
                if self.wants(*bias) {
                    let gb = Tensor::new(self.value(*bias).shape(), col_sums(g))?;
                    self.accum(grads, *bias, idx, gb)?;
                }
                if self.wants(*gain) {
                    let mut gg = vec![0.0; m];
                    for i in 0..n {
                        for j in 0..m {
                            gg[j] += g.data()[i * m + j] * xhat[i * m + j];
                        }
                    }
                    self.accum(grads, *gain, idx, Tensor::new(self.value(*gain).shape(), gg)?)?;
                }
                if self.wants(*x) {
                    let mut gx = vec![0.0; n * m];
                    for i in 0..n {
                        let gr = &g.data()[i * m..(i + 1) * m];
                        let hr = &xhat[i * m..(i + 1) * m];
                        let mut mean_gh = 0.0;
                        let mut mean_ghh = 0.0;
                        for j in 0..m {
                            let gh = gr[j] * gv[j];
                            mean_gh += gh;
                            mean_ghh += gh * hr[j];
                        }
                        mean_gh /= m as f64;
                        mean_ghh /= m as f64;
                        for j in 0..m {
                            let gh = gr[j] * gv[j];
                            gx[i * m + j] = inv_std[i] * (gh - mean_gh - hr[j] * mean_ghh);
                        }
                    }
                    self.accum(grads, *x, idx, Tensor::new(self.value(*x).shape(), gx)?)?;
                }
            }
            Op::Sum(a) => {
                let s = g.item();
                self.accum(grads, *a, idx, Tensor::full(self.value(*a).shape(), s))?;
            }
            Op::Mean(a) => {
                let av = self.value(*a);
                let s = g.item() / av.len() as f64;
                self.accum(grads, *a, idx, Tensor::full(av.shape(), s))?;
            }
            Op::Mse(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let k = 2.0 * g.item() / av.len().max(1) as f64;
                let d = av.zip_map(bv, "mse_grad", |x, y| k * (x - y))?;
                if self.wants(*b) {
                    self.accum(grads, *b, idx, d.scale(-1.0))?;
                }
                self.accum(grads, *a, idx, d)?;
            }
            Op::LogSigmoid(a) => {
                let ga = g.zip_map(self.value(*a), "log_sigmoid_grad", |g, x| g * sigmoid(-x))?;
                self.accum(grads, *a, idx, ga)?;
            }
            Op::Softplus(a) => {
                let ga = g.zip_map(self.value(*a), "softplus_grad", |g, x| g * sigmoid(x))?;
                self.accum(grads, *a, idx, ga)?;
            }
            Op::Concat(parts) => {
                let (n, total) = (g.rows(), g.cols());
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.wants(p) {
                        let mut gp = Vec::with_capacity(n * w);
                        for i in 0..n {
                            gp.extend_from_slice(&g.data()[i * total + off..i * total + off + w]);
                        }
                        self.accum(grads, p, idx, Tensor::new(&[n, w], gp)?)?;
                    }
                    off += w;
                }
            }
            Op::Slice { x, start, end } => {
                let xv = self.value(*x);
                let (n, m) = (xv.rows(), xv.cols());
                let w = end - start;
                let mut gx = vec![0.0; n * m];
                for i in 0..n {
                    gx[i * m + start..i * m + end].copy_from_slice(&g.data()[i * w..(i + 1) * w]);
                }
                self.accum(grads, *x, idx, Tensor::new(xv.shape(), gx)?)?;
            }
            Op::Sin(a) => {
                let ga = g.zip_map(self.value(*a), "sin_grad", |g, x| g * x.cos())?;
                self.accum(grads, *a, idx, ga)?;
            }
            Op::Cos(a) => {
                let ga = g.zip_map(self.value(*a), "cos_grad", |g, x| -g * x.sin())?;
                self.accum(grads, *a, idx, ga)?;
            }
            Op::Gather { table, ids } => {
                let tv = self.value(*table);
                let m = tv.cols();
                let mut gt = Tensor::zeros(tv.shape());
                for (r, &id) in ids.iter().enumerate() {
                    let dst = &mut gt.data_mut()[id * m..(id + 1) * m];
                    for (d, &s) in dst.iter_mut().zip(&g.data()[r * m..(r + 1) * m]) {
                        *d += s;
                    }
                }
                self.accum(grads, *table, idx, gt)?;
            }
            Op::PoolRows { x, group } => {
                let xv = self.value(*x);
                let (n, m) = (xv.rows(), xv.cols());
                let inv = 1.0 / *group as f64;
                let mut gx = vec![0.0; n * m];
                for i in 0..n {
                    let src = &g.data()[(i / group) * m..(i / group + 1) * m];
                    for (d, &s) in gx[i * m..(i + 1) * m].iter_mut().zip(src) {
                        *d = s * inv;
                    }
                }
                self.accum(grads, *x, idx, Tensor::new(xv.shape(), gx)?)?;
            }
        }
        Ok(())
    }

    fn matmul_backward(&self, idx: usize, a: Var, b: Var, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let (av, bv) = (self.value(a), self.value(b));
        let (n, k, m) = (av.rows(), av.cols(), bv.cols());
        if self.wants(a) {
            // dA = G * B^T, computed as row-axpys against B^T.
            let bt = bv.transpose()?;
            let mut ga = vec![0.0; n * k];
            matmul_into(g.data(), bt.data(), &mut ga, n, m, k);
            self.accum(grads, a, idx, Tensor::new(av.shape(), ga)?)?;
        }
        if self.wants(b) {
            // dB = A^T * G.
            let mut gb = vec![0.0; k * m];
            for i in 0..n {
                let grow = &g.data()[i * m..(i + 1) * m];
                for p in 0..k {
                    let a_ip = av.data()[i * k + p];
                    if a_ip == 0.0 {
                        continue;
                    }
                    for (o, &gv) in gb[p * m..(p + 1) * m].iter_mut().zip(grow) {
                        *o += a_ip * gv;
                    }
                }
            }
            self.accum(grads, b, idx, Tensor::new(bv.shape(), gb)?)?;
        }
        Ok(())
    }
}
