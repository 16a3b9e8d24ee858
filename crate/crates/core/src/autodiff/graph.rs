//! Flat tape of tensor operations with a single reverse sweep.
//!
//! A [`Graph`] is rebuilt for every forward pass. Each op appends one node
//! holding its forward value; [`Graph::backward`] walks the tape once in
//! reverse and returns gradients for the leaves that requested them.

use super::special;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
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
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddScalar(Var),
    MulScalar(Var, f64),
    AddRowBias(Var, Var),
    AddColBias(Var, Var),
    Log(Var),
    Exp(Var),
    Sigmoid(Var),
    Softplus(Var),
    Lgamma(Var),
    Silu(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Sum(Var),
    Mean(Var),
    Gather(Var, Vec<usize>),
    Clamp(Var, f64, f64),
    SliceCols(Var, usize, usize),
    Reshape(Var),
    Transpose(Var),
    Conv3x3(Var, Var),
    AvgPool2(Var),
    Upsample2(Var),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients of a scalar with respect to the leaves of a graph.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of a leaf, or `None` when it does not require grad or the
    /// loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Like [`Gradients::get`], with zeros for disconnected leaves.
    pub fn get_or_zeros(&self, v: Var, len: usize) -> Vec<f64> {
        self.get(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; len])
    }
}

#[derive(Debug, Default, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn dim_err(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    Error::Dimension {
        op,
        left: a.to_vec(),
        right: b.to_vec(),
    }
}

/// `[C, H, W]` of a rank-3 tensor.
fn dims3(t: &Tensor, op: &'static str) -> Result<(usize, usize, usize)> {
    match t.shape() {
        [c, h, w] => Ok((*c, *h, *w)),
        s => Err(dim_err(op, s, &[0, 0, 0])),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.constant(Tensor::scalar(v))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn val(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let out = self.value(a).map(f);
        self.push(out, op, &[a])
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(dim_err(name, ta.shape(), tb.shape()));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(out, op, &[a, b]))
    }

    // ---- linear algebra --------------------------------------------------

    /// `[m×k]·[k×n] → [m×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let ((m, k), (k2, n)) = match (ta.dims2(), tb.dims2()) {
            (Some(x), Some(y)) if x.1 == y.0 => (x, y),
            _ => return Err(dim_err("matmul", ta.shape(), tb.shape())),
        };
        debug_assert_eq!(k, k2);
        let (ad, bd) = (ta.data(), tb.data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let aip = ad[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                for (o, &bv) in orow.iter_mut().zip(&bd[p * n..(p + 1) * n]) {
                    *o += aip * bv;
                }
            }
        }
        let out = Tensor::matrix(m, n, out)?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    // ---- elementwise -----------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        if let Some(i) = self.val(b).iter().position(|&v| v == 0.0) {
            return Err(Error::Domain {
                op: "div",
                detail: format!("zero denominator at element {i}"),
            });
        }
        self.binary("div", a, b, Op::Div(a, b), |x, y| x / y)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::AddScalar(a), |x| x + c)
    }

    pub fn mul_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::MulScalar(a, c), |x| x * c)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.mul_scalar(a, -1.0)
    }

    /// `c − a`.
    pub fn rsub_scalar(&mut self, c: f64, a: Var) -> Var {
        let n = self.neg(a);
        self.add_scalar(n, c)
    }

    /// Adds `bias[r]` to every element of row `r` (first axis; remaining
    /// axes flattened).
    pub fn add_row_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(bias));
        let rows = ta.shape().first().copied().unwrap_or(0);
        if ta.rank() < 2 || tb.shape() != [rows] {
            return Err(dim_err("add_row_bias", ta.shape(), tb.shape()));
        }
        let cols = ta.len() / rows.max(1);
        let mut data = ta.data().to_vec();
        for (r, &b) in tb.data().iter().enumerate() {
            for v in &mut data[r * cols..(r + 1) * cols] {
                *v += b;
            }
        }
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(out, Op::AddRowBias(a, bias), &[a, bias]))
    }

    /// Adds `bias[c]` to column `c` of a rank-2 tensor.
    pub fn add_col_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(bias));
        let (_, cols) = ta
            .dims2()
            .ok_or_else(|| dim_err("add_col_bias", ta.shape(), tb.shape()))?;
        if tb.shape() != [cols] {
            return Err(dim_err("add_col_bias", ta.shape(), tb.shape()));
        }
        let mut data = ta.data().to_vec();
        for row in data.chunks_mut(cols) {
            for (v, &b) in row.iter_mut().zip(tb.data()) {
                *v += b;
            }
        }
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(out, Op::AddColBias(a, bias), &[a, bias]))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(i) = self.val(a).iter().position(|&v| !(v > 0.0)) {
            return Err(Error::Domain {
                op: "log",
                detail: format!("non-positive argument {} at element {i}", self.val(a)[i]),
            });
        }
        Ok(self.unary(a, Op::Log(a), f64::ln))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), special::sigmoid)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Op::Softplus(a), special::softplus)
    }

    /// Elementwise `ln Γ(x)`, gradient `ψ(x)`.
    pub fn lgamma(&mut self, a: Var) -> Result<Var> {
        if let Some(i) = self.val(a).iter().position(|&v| !(v > 0.0)) {
            return Err(Error::Domain {
                op: "lgamma",
                detail: format!("non-positive argument {} at element {i}", self.val(a)[i]),
            });
        }
        Ok(self.unary(a, Op::Lgamma(a), special::ln_gamma))
    }

    /// `x·sigmoid(x)`.
    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Silu(a), |x| x * special::sigmoid(x))
    }

    /// Gradient is zero where the input lies outside the open interval.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, Op::Clamp(a, lo, hi), |x| x.clamp(lo, hi))
    }

    // ---- reductions / normalizers -----------------------------------------

    fn last_axis(&self, a: Var) -> usize {
        self.shape(a).last().copied().unwrap_or(1).max(1)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let cols = self.last_axis(a);
        let mut data = self.val(a).to_vec();
        for row in data.chunks_mut(cols) {
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let out = Tensor::new(self.shape(a).to_vec(), data).expect("same shape");
        self.push(out, Op::Softmax(a), &[a])
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let cols = self.last_axis(a);
        let mut data = self.val(a).to_vec();
        for row in data.chunks_mut(cols) {
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        let out = Tensor::new(self.shape(a).to_vec(), data).expect("same shape");
        self.push(out, Op::LogSoftmax(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.val(a).iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    /// Mean of all elements; the mean of an empty tensor is 0.
    pub fn mean(&mut self, a: Var) -> Var {
        let d = self.val(a);
        let m = if d.is_empty() {
            0.0
        } else {
            d.iter().sum::<f64>() / d.len() as f64
        };
        self.push(Tensor::scalar(m), Op::Mean(a), &[a])
    }

    // ---- indexing / layout -------------------------------------------------

    /// Flat gather: `out[k] = a[indices[k]]`.
    pub fn gather(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let d = self.val(a);
        let mut out = Vec::with_capacity(indices.len());
        for &i in indices {
            out.push(*d.get(i).ok_or(Error::Index {
                what: "gather",
                index: i,
                len: d.len(),
            })?);
        }
        Ok(self.push(Tensor::vector(out), Op::Gather(a, indices.to_vec()), &[a]))
    }

    /// Columns `start..end` of a rank-2 tensor.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(a);
        let (rows, cols) = match t.dims2() {
            Some((r, c)) if start <= end && end <= c => (r, c),
            _ => return Err(dim_err("slice_cols", t.shape(), &[start, end])),
        };
        let w = end - start;
        let mut out = Vec::with_capacity(rows * w);
        for r in 0..rows {
            out.extend_from_slice(&t.data()[r * cols + start..r * cols + end]);
        }
        let out = Tensor::matrix(rows, w, out)?;
        Ok(self.push(out, Op::SliceCols(a, start, end), &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshaped(shape.to_vec())?;
        Ok(self.push(out, Op::Reshape(a), &[a]))
    }

    /// `[r×c] → [c×r]`.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (r, c) = t.dims2().ok_or_else(|| dim_err("transpose", t.shape(), &[]))?;
        let out = Tensor::matrix(c, r, transposed(t.data(), r, c))?;
        Ok(self.push(out, Op::Transpose(a), &[a]))
    }

    // ---- image ops ---------------------------------------------------------

    /// 3×3 convolution, stride 1, zero padding 1.
    /// `input [Cin,H,W]`, `weight [Cout,Cin,3,3]` → `[Cout,H,W]`.
    pub fn conv3x3(&mut self, input: Var, weight: Var) -> Result<Var> {
        let (ci_n, h, w) = dims3(self.value(input), "conv3x3")?;
        let ws = self.shape(weight).to_vec();
        if ws.len() != 4 || ws[1] != ci_n || ws[2] != 3 || ws[3] != 3 {
            return Err(dim_err("conv3x3", self.shape(input), &ws));
        }
        let co_n = ws[0];
        let (x, k) = (self.val(input), self.val(weight));
        let hw = h * w;
        let mut out = vec![0.0; co_n * hw];
        for co in 0..co_n {
            let oplane = &mut out[co * hw..(co + 1) * hw];
            for ci in 0..ci_n {
                let iplane = &x[ci * hw..(ci + 1) * hw];
                for ky in 0..3 {
                    for kx in 0..3 {
                        let wv = k[((co * ci_n + ci) * 3 + ky) * 3 + kx];
                        conv_tap(oplane, iplane, h, w, ky, kx, wv);
                    }
                }
            }
        }
        let out = Tensor::new(vec![co_n, h, w], out)?;
        Ok(self.push(out, Op::Conv3x3(input, weight), &[input, weight]))
    }

    /// 2×2 average pooling of `[C,H,W]` (H, W even).
    pub fn avg_pool2(&mut self, a: Var) -> Result<Var> {
        let (c, h, w) = dims3(self.value(a), "avg_pool2")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(dim_err("avg_pool2", self.shape(a), &[c, h / 2 * 2, w / 2 * 2]));
        }
        let (oh, ow) = (h / 2, w / 2);
        let x = self.val(a);
        let mut out = vec![0.0; c * oh * ow];
        for ch in 0..c {
            for y in 0..oh {
                for xx in 0..ow {
                    let base = ch * h * w + 2 * y * w + 2 * xx;
                    out[(ch * oh + y) * ow + xx] =
                        0.25 * (x[base] + x[base + 1] + x[base + w] + x[base + w + 1]);
                }
            }
        }
        let out = Tensor::new(vec![c, oh, ow], out)?;
        Ok(self.push(out, Op::AvgPool2(a), &[a]))
    }

    /// Nearest-neighbour 2× upsampling of `[C,H,W]`.
    pub fn upsample2(&mut self, a: Var) -> Result<Var> {
        let (c, h, w) = dims3(self.value(a), "upsample2")?;
        let (oh, ow) = (2 * h, 2 * w);
        let x = self.val(a);
        let mut out = vec![0.0; c * oh * ow];
        for ch in 0..c {
            for y in 0..oh {
                for xx in 0..ow {
                    out[(ch * oh + y) * ow + xx] = x[(ch * h + y / 2) * w + xx / 2];
                }
            }
        }
        let out = Tensor::new(vec![c, oh, ow], out)?;
        Ok(self.push(out, Op::Upsample2(a), &[a]))
    }

    // ---- reverse sweep ----------------------------------------------------

    /// Reverse-mode sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(dim_err("backward", self.shape(loss), &[]));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..n).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                grads[id] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2().expect("rank 2");
                let n = self.value(*b).dims2().expect("rank 2").1;
                let (ad, bd) = (self.val(*a), self.val(*b));
                self.acc(grads, *a, |ga| {
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &bd[p * n..(p + 1) * n];
                            ga[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                });
                self.acc(grads, *b, |gb| {
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let aip = ad[i * k + p];
                            for (o, &gv) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *o += aip * gv;
                            }
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, |ga| add_into(ga, g));
                self.acc(grads, *b, |gb| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, |ga| add_into(ga, g));
                self.acc(grads, *b, |gb| gb.iter_mut().zip(g).for_each(|(o, &v)| *o -= v));
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.val(*a), self.val(*b));
                self.acc(grads, *a, |ga| {
                    for i in 0..g.len() {
                        ga[i] += g[i] * bd[i];
                    }
                });
                self.acc(grads, *b, |gb| {
                    for i in 0..g.len() {
                        gb[i] += g[i] * ad[i];
                    }
                });
            }
            Op::Div(a, b) => {
                let bd = self.val(*b);
                self.acc(grads, *a, |ga| {
                    for i in 0..g.len() {
                        ga[i] += g[i] / bd[i];
                    }
                });
                self.acc(grads, *b, |gb| {
                    for i in 0..g.len() {
                        gb[i] -= g[i] * y[i] / bd[i];
                    }
                });
            }
            Op::AddScalar(a) | Op::Reshape(a) => self.acc(grads, *a, |ga| add_into(ga, g)),
            Op::Transpose(a) => {
                let (r, c) = self.value(*a).dims2().expect("rank 2");
                let back = transposed(g, c, r);
                self.acc(grads, *a, |ga| add_into(ga, &back));
            }
            Op::MulScalar(a, c) => self.acc(grads, *a, |ga| {
                ga.iter_mut().zip(g).for_each(|(o, &v)| *o += c * v)
            }),
            Op::AddRowBias(a, bias) => {
                self.acc(grads, *a, |ga| add_into(ga, g));
                let rows = self.value(*bias).len();
                let cols = g.len() / rows.max(1);
                self.acc(grads, *bias, |gb| {
                    for (r, o) in gb.iter_mut().enumerate() {
                        *o += g[r * cols..(r + 1) * cols].iter().sum::<f64>();
                    }
                });
            }
            Op::AddColBias(a, bias) => {
                self.acc(grads, *a, |ga| add_into(ga, g));
                let cols = self.value(*bias).len();
                self.acc(grads, *bias, |gb| {
                    for row in g.chunks(cols) {
                        add_into(gb, row);
                    }
                });
            }
            Op::Log(a) => {
                let x = self.val(*a);
                self.acc(grads, *a, |ga| {
                    for i in 0..g.len() {
                        ga[i] += g[i] / x[i];
                    }
                });
            }
            Op::Exp(a) => self.acc(grads, *a, |ga| {
                for i in 0..g.len() {
                    ga[i] += g[i] * y[i];
                }
            }),
            Op::Sigmoid(a) => self.acc(grads, *a, |ga| {
                for i in 0..g.len() {
                    ga[i] += g[i] * y[i] * (1.0 - y[i]);
                }
            }),
            Op::Softplus(a) => {
                let x = self.val(*a);
                self.acc(grads, *a, |ga| {
                    for i in 0..g.len() {
                        ga[i] += g[i] * special::sigmoid(x[i]);
                    }
                });
            }
            Op::Lgamma(a) => {
                let x = self.val(*a);
                self.acc(grads, *a, |ga| {
                    for i in 0..g.len() {
                        ga[i] += g[i] * special::digamma(x[i]);
                    }
                });
            }
            Op::Silu(a) => {
                let x = self.val(*a);
                self.acc(grads, *a, |ga| {
                    for i in 0..g.len() {
                        let s = special::sigmoid(x[i]);
                        ga[i] += g[i] * s * (1.0 + x[i] * (1.0 - s));
                    }
                });
            }
            Op::Clamp(a, lo, hi) => {
                let x = self.val(*a);
                self.acc(grads, *a, |ga| {
                    for i in 0..g.len() {
                        if x[i] > *lo && x[i] < *hi {
                            ga[i] += g[i];
                        }
                    }
                });
            }
            Op::Softmax(a) => {
                let cols = self.last_axis(*a);
                self.acc(grads, *a, |ga| {
                    for ((gr, yr), out) in g.chunks(cols).zip(y.chunks(cols)).zip(ga.chunks_mut(cols)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for j in 0..cols {
                            out[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::LogSoftmax(a) => {
                let cols = self.last_axis(*a);
                self.acc(grads, *a, |ga| {
                    for ((gr, yr), out) in g.chunks(cols).zip(y.chunks(cols)).zip(ga.chunks_mut(cols)) {
                        let s: f64 = gr.iter().sum();
                        for j in 0..cols {
                            out[j] += gr[j] - yr[j].exp() * s;
                        }
                    }
                });
            }
            Op::Sum(a) => self.acc(grads, *a, |ga| ga.iter_mut().for_each(|o| *o += g[0])),
            Op::Mean(a) => {
                let n = self.value(*a).len().max(1) as f64;
                self.acc(grads, *a, |ga| ga.iter_mut().for_each(|o| *o += g[0] / n));
            }
            Op::Gather(a, idx) => self.acc(grads, *a, |ga| {
                for (k, &i) in idx.iter().enumerate() {
                    ga[i] += g[k];
                }
            }),
            Op::SliceCols(a, start, end) => {
                let cols = self.value(*a).dims2().expect("rank 2").1;
                let w = end - start;
                self.acc(grads, *a, |ga| {
                    for (r, gr) in g.chunks(w).enumerate() {
                        add_into(&mut ga[r * cols + start..r * cols + end], gr);
                    }
                });
            }
            Op::Conv3x3(input, weight) => {
                let (ci_n, h, w) = dims3(self.value(*input), "conv3x3").expect("checked");
                let co_n = self.shape(*weight)[0];
                let hw = h * w;
                let (x, k) = (self.val(*input), self.val(*weight));
                self.acc(grads, *input, |gi| {
                    for co in 0..co_n {
                        let gplane = &g[co * hw..(co + 1) * hw];
                        for ci in 0..ci_n {
                            let iplane = &mut gi[ci * hw..(ci + 1) * hw];
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let wv = k[((co * ci_n + ci) * 3 + ky) * 3 + kx];
                                    conv_tap_transpose(iplane, gplane, h, w, ky, kx, wv);
                                }
                            }
                        }
                    }
                });
                self.acc(grads, *weight, |gw| {
                    for co in 0..co_n {
                        let gplane = &g[co * hw..(co + 1) * hw];
                        for ci in 0..ci_n {
                            let iplane = &x[ci * hw..(ci + 1) * hw];
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    gw[((co * ci_n + ci) * 3 + ky) * 3 + kx] +=
                                        conv_tap_dot(gplane, iplane, h, w, ky, kx);
                                }
                            }
                        }
                    }
                });
            }
            Op::AvgPool2(a) => {
                let (c, h, w) = dims3(self.value(*a), "avg_pool2").expect("checked");
                let (oh, ow) = (h / 2, w / 2);
                self.acc(grads, *a, |ga| {
                    for ch in 0..c {
                        for yy in 0..oh {
                            for xx in 0..ow {
                                let v = 0.25 * g[(ch * oh + yy) * ow + xx];
                                let base = ch * h * w + 2 * yy * w + 2 * xx;
                                ga[base] += v;
                                ga[base + 1] += v;
                                ga[base + w] += v;
                                ga[base + w + 1] += v;
                            }
                        }
                    }
                });
            }
            Op::Upsample2(a) => {
                let (c, h, w) = dims3(self.value(*a), "upsample2").expect("checked");
                let (oh, ow) = (2 * h, 2 * w);
                self.acc(grads, *a, |ga| {
                    for ch in 0..c {
                        for yy in 0..oh {
                            for xx in 0..ow {
                                ga[(ch * h + yy / 2) * w + xx / 2] += g[(ch * oh + yy) * ow + xx];
                            }
                        }
                    }
                });
            }
        }
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let len = self.nodes[v.0].value.len();
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
        f(slot);
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(o, &v)| *o += v);
}

/// Valid output range along one axis for kernel offset `k` (0..3, pad 1).
fn tap_range(k: usize, n: usize) -> (usize, usize) {
    let lo = if k == 0 { 1 } else { 0 };
    let hi = if k == 2 { n - 1 } else { n };
    (lo, hi)
}

/// `out[y,x] += w · in[y+ky-1, x+kx-1]` over the valid region.
fn conv_tap(out: &mut [f64], input: &[f64], h: usize, w: usize, ky: usize, kx: usize, wv: f64) {
    if wv == 0.0 {
        return;
    }
    let (y0, y1) = tap_range(ky, h);
    let (x0, x1) = tap_range(kx, w);
    for y in y0..y1 {
        let sy = y + ky - 1;
        let orow = &mut out[y * w + x0..y * w + x1];
        let irow = &input[sy * w + x0 + kx - 1..sy * w + x1 + kx - 1];
        for (o, &i) in orow.iter_mut().zip(irow) {
            *o += wv * i;
        }
    }
}

/// Adjoint of [`conv_tap`] with respect to the input plane.
fn conv_tap_transpose(
    gin: &mut [f64],
    gout: &[f64],
    h: usize,
    w: usize,
    ky: usize,
    kx: usize,
    wv: f64,
) {
    if wv == 0.0 {
        return;
    }
    let (y0, y1) = tap_range(ky, h);
    let (x0, x1) = tap_range(kx, w);
    for y in y0..y1 {
        let sy = y + ky - 1;
        let grow = &gout[y * w + x0..y * w + x1];
        let irow = &mut gin[sy * w + x0 + kx - 1..sy * w + x1 + kx - 1];
        for (i, &gv) in irow.iter_mut().zip(grow) {
            *i += wv * gv;
        }
    }
}

fn conv_tap_dot(gout: &[f64], input: &[f64], h: usize, w: usize, ky: usize, kx: usize) -> f64 {
    let (y0, y1) = tap_range(ky, h);
    let (x0, x1) = tap_range(kx, w);
    let mut s = 0.0;
    for y in y0..y1 {
        let sy = y + ky - 1;
        let grow = &gout[y * w + x0..y * w + x1];
        let irow = &input[sy * w + x0 + kx - 1..sy * w + x1 + kx - 1];
        s += grow.iter().zip(irow).map(|(a, b)| a * b).sum::<f64>();
    }
    s
}

fn transposed(d: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; d.len()];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = d[i * c + j];
        }
    }
    out
}
