//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation as a node in creation order, so the
//! node list is already a topological order and [`Graph::backward`] simply
//! walks it in reverse. Nodes are addressed by [`Var`] handles.

use alloc::vec;
use alloc::vec::Vec;

use crate::conv::ConvGeom;
use crate::error::{Error, Result};
use crate::norm::{self, BatchStats, BnSaved};
use crate::real::Real;
use crate::tensor::{inner_size, outer_size, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Unary {
    Sigmoid,
    Tanh,
    Relu,
    Exp,
    Log,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Binary {
    Add,
    Sub,
    Mul,
}

#[derive(Debug)]
enum Op<R> {
    Leaf,
    Binary(Binary, Var, Var),
    Scale(Var, R),
    Unary(Unary, Var),
    LogAddExp(Var, Var),
    MatMul(Var, Var),
    BatchMatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Concat(Vec<Var>, usize),
    Slice(Var, usize, usize),
    Gather(Var, Vec<usize>),
    SumAll(Var),
    MeanAxis(Var, usize),
    AddBias(Var, Var),
    Softmax(Var),
    LogSoftmax(Var),
    RowNormalize(Var),
    ScaleToNorm(Var, R),
    Conv2d(Var, Var, ConvGeom),
    BatchNorm(Var, Var, Var, BnSaved<R>),
}

#[derive(Debug)]
struct Node<R> {
    value: Tensor<R>,
    grad: Option<Vec<R>>,
    requires_grad: bool,
    op: Op<R>,
}

/// A computation graph over tensors of element type `R`.
#[derive(Debug, Default)]
pub struct Graph<R> {
    nodes: Vec<Node<R>>,
}

fn shape_err(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    Error::Shape {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

fn bad_shape(op: &'static str, shape: &[usize], reason: &'static str) -> Error {
    Error::BadShape {
        op,
        shape: shape.to_vec(),
        reason,
    }
}

impl<R: Real> Graph<R> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<R>, op: Op<R>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Leaf whose gradient is tracked.
    pub fn variable(&mut self, value: Tensor<R>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor<R>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<R> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Accumulated gradient, populated by [`backward`](Self::backward).
    pub fn grad(&self, v: Var) -> Option<&[R]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Clears every accumulated gradient.
    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    // ---- elementwise ----

    pub fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let name = match kind {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
        };
        let f = |x: R, y: R| match kind {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
        };
        let value = if ta.shape() == tb.shape() {
            let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(ta.shape().to_vec(), data)?
        } else if ta.numel() == 1 {
            let x = ta.data()[0];
            tb.map(|y| f(x, y))
        } else if tb.numel() == 1 {
            let y = tb.data()[0];
            ta.map(|x| f(x, y))
        } else {
            return Err(shape_err(name, ta.shape(), tb.shape()));
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Binary(kind, a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn scale(&mut self, a: Var, factor: R) -> Var {
        let value = self.value(a).map(|x| x * factor);
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, factor), rg)
    }

    pub fn unary(&mut self, kind: Unary, a: Var) -> Result<Var> {
        let x = self.value(a);
        let value = match kind {
            Unary::Sigmoid => x.map(|v| R::one() / (R::one() + (-v).exp())),
            Unary::Tanh => x.map(|v| v.tanh()),
            Unary::Relu => x.map(|v| if v > R::zero() { v } else { R::zero() }),
            Unary::Exp => x.map(|v| v.exp()),
            Unary::Log => {
                if let Some(&bad) = x.data().iter().find(|&&v| !(v > R::zero())) {
                    return Err(Error::Domain {
                        op: "log",
                        value: bad.to_f64_lossy(),
                    });
                }
                x.map(|v| v.ln())
            }
        };
        let rg = self.rg(a);
        Ok(self.push(value, Op::Unary(kind, a), rg))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(Unary::Sigmoid, a).expect("sigmoid is total")
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(Unary::Tanh, a).expect("tanh is total")
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(Unary::Relu, a).expect("relu is total")
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(Unary::Exp, a).expect("exp is total")
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Log, a)
    }

    /// Elementwise `log(exp(a) + exp(b))`.
    pub fn log_add_exp(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err("log_add_exp", ta.shape(), tb.shape()));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| {
                let m = x.max(y);
                m + (-(x - y).abs()).exp().ln_1p()
            })
            .collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::LogAddExp(a, b), rg))
    }

    // ---- linear algebra ----

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![R::zero(); m * n];
        R::gemm(m, k, n, R::one(), self.value(a).data(), false, self.value(b).data(), false, R::zero(), &mut out);
        let value = Tensor::new(vec![m, n], out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    /// `[B, m, k] x [B, k, n] -> [B, m, n]`.
    pub fn batch_matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(shape_err("batch_matmul", sa, sb));
        }
        let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![R::zero(); bs * m * n];
        let (da, db) = (self.value(a).data(), self.value(b).data());
        for i in 0..bs {
            R::gemm(
                m,
                k,
                n,
                R::one(),
                &da[i * m * k..(i + 1) * m * k],
                false,
                &db[i * k * n..(i + 1) * k * n],
                false,
                R::zero(),
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        let value = Tensor::new(vec![bs, m, n], out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::BatchMatMul(a, b), rg))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() < 2 {
            return Err(bad_shape("transpose", s, "needs at least 2 axes"));
        }
        let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
        let mut shape = s.to_vec();
        let nd = shape.len();
        shape.swap(nd - 2, nd - 1);
        let data = transpose_last(self.value(a).data(), r, c);
        let value = Tensor::new(shape, data)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Transpose(a), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a);
        if shape.iter().product::<usize>() != t.numel() {
            return Err(shape_err("reshape", t.shape(), shape));
        }
        let value = Tensor::new(shape.to_vec(), t.data().to_vec())?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    /// General axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let mut seen = vec![false; s.len()];
        if perm.len() != s.len() || perm.iter().any(|&p| p >= s.len() || core::mem::replace(&mut seen[p], true)) {
            return Err(shape_err("permute", &s, perm));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| s[p]).collect();
        let src = permute_index_map(&s, perm);
        let d = self.value(a).data();
        let data = src.iter().map(|&i| d[i]).collect();
        let value = Tensor::new(out_shape, data)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Permute(a, perm.to_vec()), rg))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*parts.first().ok_or(Error::Config("concat of nothing".into()))?)
            .to_vec();
        if axis >= first.len() {
            return Err(bad_shape("concat", &first, "axis out of range"));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == first.len() && s.iter().zip(&first).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(shape_err("concat", &first, s));
            }
            total += s[axis];
        }
        let outer = outer_size(&first, axis);
        let inner = inner_size(&first, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let t = self.value(p);
                let chunk = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let value = Tensor::new(shape, data)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(value, Op::Concat(parts.to_vec(), axis), rg))
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() || start + len > s[axis] || len == 0 {
            return Err(bad_shape("slice", &s, "range outside axis"));
        }
        let outer = outer_size(&s, axis);
        let inner = inner_size(&s, axis);
        let d = self.value(a).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * s[axis] + start) * inner;
            data.extend_from_slice(&d[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let value = Tensor::new(shape, data)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Slice(a, axis, start), rg))
    }

    /// Selects entries of the last axis: `out[.., j] = a[.., index[j]]`.
    pub fn gather(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let last = *s.last().ok_or_else(|| bad_shape("gather", &s, "scalar input"))?;
        if index.is_empty() || index.iter().any(|&i| i >= last) {
            return Err(bad_shape("gather", &s, "index out of range"));
        }
        let d = self.value(a).data();
        let data = d
            .chunks(last)
            .flat_map(|row| index.iter().map(move |&i| row[i]))
            .collect();
        let mut shape = s;
        *shape.last_mut().expect("non-empty") = index.len();
        let value = Tensor::new(shape, data)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Gather(a, index.to_vec()), rg))
    }

    // ---- reductions ----

    pub fn sum(&mut self, a: Var) -> Var {
        let s: R = self.value(a).data().iter().copied().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::SumAll(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = R::of(self.value(a).numel() as f64);
        let s = self.sum(a);
        self.scale(s, R::one() / n)
    }

    /// Mean over `axis`, which is removed from the shape.
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() {
            return Err(bad_shape("mean_axis", &s, "axis out of range"));
        }
        let (outer, n, inner) = (outer_size(&s, axis), s[axis], inner_size(&s, axis));
        let d = self.value(a).data();
        let inv = R::one() / R::of(n as f64);
        let mut data = vec![R::zero(); outer * inner];
        for o in 0..outer {
            for k in 0..n {
                let src = &d[(o * n + k) * inner..(o * n + k + 1) * inner];
                for (acc, &v) in data[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *acc += v;
                }
            }
        }
        data.iter_mut().for_each(|v| *v *= inv);
        let mut shape = s;
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        let value = Tensor::new(shape, data)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::MeanAxis(a, axis), rg))
    }

    /// Adds a `[D]` bias to every row of a `[.., D]` tensor.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(bias));
        if sb.len() != 1 || sa.last() != Some(&sb[0]) {
            return Err(shape_err("add_bias", sa, sb));
        }
        let bd = self.value(bias).data();
        let mut data = self.value(a).data().to_vec();
        for row in data.chunks_mut(bd.len()) {
            for (x, &b) in row.iter_mut().zip(bd) {
                *x += b;
            }
        }
        let value = Tensor::new(sa.to_vec(), data)?;
        let rg = self.rg(a) || self.rg(bias);
        Ok(self.push(value, Op::AddBias(a, bias), rg))
    }

    // ---- normalizers over the last axis ----

    fn check_finite(&self, a: Var, op: &'static str) -> Result<()> {
        if self.value(a).is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(op))
        }
    }

    /// Softmax over the last axis, computed with max subtraction.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.check_finite(a, "softmax")?;
        let t = self.value(a);
        let last = *t.shape().last().expect("tensors have at least one axis");
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(last) {
            softmax_in_place(row);
        }
        let value = Tensor::new(t.shape().to_vec(), data)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Softmax(a), rg))
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        self.check_finite(a, "log_softmax")?;
        let t = self.value(a);
        let last = *t.shape().last().expect("tensors have at least one axis");
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(last) {
            let lse = log_sum_exp(row);
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let value = Tensor::new(t.shape().to_vec(), data)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::LogSoftmax(a), rg))
    }

    /// Divides each last-axis row by its sum. Rows must have non-zero sums.
    pub fn row_normalize(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let last = *t.shape().last().expect("tensors have at least one axis");
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(last) {
            let s: R = row.iter().copied().sum();
            if s == R::zero() {
                return Err(Error::ZeroVector);
            }
            row.iter_mut().for_each(|v| *v /= s);
        }
        let value = Tensor::new(t.shape().to_vec(), data)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::RowNormalize(a), rg))
    }

    /// Rescales each last-axis row to L2 norm `alpha`.
    pub fn scale_to_norm(&mut self, a: Var, alpha: R) -> Result<Var> {
        let t = self.value(a);
        let last = *t.shape().last().expect("tensors have at least one axis");
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(last) {
            let n = row.iter().map(|&v| v * v).sum::<R>().sqrt();
            if n == R::zero() {
                return Err(Error::ZeroVector);
            }
            row.iter_mut().for_each(|v| *v = *v * alpha / n);
        }
        let value = Tensor::new(t.shape().to_vec(), data)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::ScaleToNorm(a, alpha), rg))
    }

    // ---- convolution and normalization ----

    /// Zero same-padded cross-correlation of `[B, C_in, H, W]` with
    /// `[C_out, C_in, kh, kw]`; output is `[B, C_out, ceil(H/s_h), ceil(W/s_w)]`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: (usize, usize), dilation: usize) -> Result<Var> {
        let (si, sk) = (self.shape(input), self.shape(kernel));
        if si.len() != 4 || sk.len() != 4 {
            return Err(shape_err("conv2d", si, sk));
        }
        if si[1] != sk[1] {
            return Err(shape_err("conv2d channels", si, sk));
        }
        if stride.0 == 0 || stride.1 == 0 || dilation == 0 {
            return Err(bad_shape("conv2d", sk, "stride and dilation must be >= 1"));
        }
        let geom = ConvGeom::same(si, sk, stride, dilation);
        let out = geom.forward(self.value(input).data(), self.value(kernel).data());
        let value = Tensor::new(vec![geom.batch, geom.out_channels, geom.out_h, geom.out_w], out)?;
        let rg = self.rg(input) || self.rg(kernel);
        Ok(self.push(value, Op::Conv2d(input, kernel, geom), rg))
    }

    /// Per-channel batch normalization of `[B, C, H, W]`. Only the first
    /// `valid_h[b]` rows of item `b` take part; the rest of the output is zero.
    /// With `running = Some((mean, var))` the given statistics are used and no
    /// batch statistics are returned.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        valid_h: Option<&[usize]>,
        running: Option<(&[R], &[R])>,
    ) -> Result<(Var, Option<BatchStats<R>>)> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || self.shape(gamma) != [s[1]] || self.shape(beta) != [s[1]] {
            return Err(shape_err("batch_norm", &s, self.shape(gamma)));
        }
        let valid = match valid_h {
            Some(v) if v.len() == s[0] && v.iter().all(|&h| h <= s[2]) => v.to_vec(),
            Some(_) => return Err(bad_shape("batch_norm", &s, "valid lengths do not match batch")),
            None => vec![s[2]; s[0]],
        };
        let dims = [s[0], s[1], s[2], s[3]];
        let (out, saved, stats) = norm::forward(
            self.value(x).data(),
            dims,
            valid,
            self.value(gamma).data(),
            self.value(beta).data(),
            running,
        );
        let value = Tensor::new(s, out)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok((self.push(value, Op::BatchNorm(x, gamma, beta, saved), rg), stats))
    }

    // ---- backward ----

    /// Accumulates `d loss / d node` into every node that requires a gradient.
    /// Gradients add onto whatever a previous call left; use
    /// [`zero_grad`](Self::zero_grad) to reset.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.shape(loss);
        if shape.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarLoss(shape.to_vec()));
        }
        let mut grads: Vec<Option<Vec<R>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![R::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].requires_grad {
                self.propagate(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        for (node, g) in self.nodes.iter_mut().zip(grads) {
            let Some(g) = g else { continue };
            if !node.requires_grad {
                continue;
            }
            match &mut node.grad {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
                slot @ None => *slot = Some(g),
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[R], grads: &mut [Option<Vec<R>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| &nodes[v.0].value;
        // Gradient buffer of a parent, created on first use; `None` if the
        // parent does not need a gradient.
        macro_rules! buf {
            ($v:expr) => {{
                let v: Var = $v;
                if nodes[v.0].requires_grad {
                    let n = nodes[v.0].value.numel();
                    Some(grads[v.0].get_or_insert_with(|| vec![R::zero(); n]))
                } else {
                    None
                }
            }};
        }
        // Owned variants for ops that need several parent buffers at once.
        macro_rules! take {
            ($v:expr) => {{
                let v: Var = $v;
                if nodes[v.0].requires_grad {
                    let n = nodes[v.0].value.numel();
                    Some(grads[v.0].take().unwrap_or_else(|| vec![R::zero(); n]))
                } else {
                    None
                }
            }};
        }
        macro_rules! put {
            ($v:expr, $b:expr) => {
                if let Some(b) = $b {
                    grads[$v.0] = Some(b);
                }
            };
        }
        let out = &nodes[i].value;
        match &nodes[i].op {
            Op::Leaf => {}
            &Op::Binary(kind, a, b) => {
                let (ta, tb) = (val(a), val(b));
                let (da, db) = (ta.data(), tb.data());
                // Broadcast index: scalar operands always read element 0.
                let ia = |k: usize| if da.len() == 1 { 0 } else { k };
                let ib = |k: usize| if db.len() == 1 { 0 } else { k };
                if let Some(ga) = buf!(a) {
                    for (k, &gk) in g.iter().enumerate() {
                        ga[ia(k)] += match kind {
                            Binary::Add | Binary::Sub => gk,
                            Binary::Mul => gk * db[ib(k)],
                        };
                    }
                }
                if let Some(gb) = buf!(b) {
                    for (k, &gk) in g.iter().enumerate() {
                        gb[ib(k)] += match kind {
                            Binary::Add => gk,
                            Binary::Sub => -gk,
                            Binary::Mul => gk * da[ia(k)],
                        };
                    }
                }
            }
            &Op::Scale(a, f) => {
                if let Some(ga) = buf!(a) {
                    ga.iter_mut().zip(g).for_each(|(x, &gk)| *x += gk * f);
                }
            }
            &Op::Unary(kind, a) => {
                let x = val(a).data();
                let y = out.data();
                if let Some(ga) = buf!(a) {
                    for k in 0..g.len() {
                        ga[k] += g[k]
                            * match kind {
                                Unary::Sigmoid => y[k] * (R::one() - y[k]),
                                Unary::Tanh => R::one() - y[k] * y[k],
                                Unary::Relu => {
                                    if x[k] > R::zero() {
                                        R::one()
                                    } else {
                                        R::zero()
                                    }
                                }
                                Unary::Exp => y[k],
                                Unary::Log => R::one() / x[k],
                            };
                    }
                }
            }
            &Op::LogAddExp(a, b) => {
                let y = out.data();
                if let Some(ga) = buf!(a) {
                    let x = val(a).data();
                    (0..g.len()).for_each(|k| ga[k] += g[k] * (x[k] - y[k]).exp());
                }
                if let Some(gb) = buf!(b) {
                    let x = val(b).data();
                    (0..g.len()).for_each(|k| gb[k] += g[k] * (x[k] - y[k]).exp());
                }
            }
            &Op::MatMul(a, b) => {
                let (sa, sb) = (val(a).shape(), val(b).shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if let Some(ga) = buf!(a) {
                    R::gemm(m, n, k, R::one(), g, false, val(b).data(), true, R::one(), ga);
                }
                if let Some(gb) = buf!(b) {
                    R::gemm(k, m, n, R::one(), val(a).data(), true, g, false, R::one(), gb);
                }
            }
            &Op::BatchMatMul(a, b) => {
                let (sa, sb) = (val(a).shape(), val(b).shape());
                let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
                let (da, db) = (val(a).data(), val(b).data());
                if let Some(ga) = buf!(a) {
                    for t in 0..bs {
                        R::gemm(
                            m,
                            n,
                            k,
                            R::one(),
                            &g[t * m * n..(t + 1) * m * n],
                            false,
                            &db[t * k * n..(t + 1) * k * n],
                            true,
                            R::one(),
                            &mut ga[t * m * k..(t + 1) * m * k],
                        );
                    }
                }
                if let Some(gb) = buf!(b) {
                    for t in 0..bs {
                        R::gemm(
                            k,
                            m,
                            n,
                            R::one(),
                            &da[t * m * k..(t + 1) * m * k],
                            true,
                            &g[t * m * n..(t + 1) * m * n],
                            false,
                            R::one(),
                            &mut gb[t * k * n..(t + 1) * k * n],
                        );
                    }
                }
            }
            &Op::Transpose(a) => {
                if let Some(ga) = buf!(a) {
                    let s = out.shape();
                    let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
                    let back = transpose_last(g, r, c);
                    ga.iter_mut().zip(back).for_each(|(x, v)| *x += v);
                }
            }
            &Op::Reshape(a) => {
                if let Some(ga) = buf!(a) {
                    ga.iter_mut().zip(g).for_each(|(x, &v)| *x += v);
                }
            }
            Op::Permute(a, perm) => {
                if let Some(ga) = buf!(*a) {
                    let src = permute_index_map(val(*a).shape(), perm);
                    for (k, &s) in src.iter().enumerate() {
                        ga[s] += g[k];
                    }
                }
            }
            Op::Concat(parts, axis) => {
                let axis = *axis;
                let s = out.shape();
                let outer = outer_size(s, axis);
                let inner = inner_size(s, axis);
                let total = s[axis];
                let mut offset = 0;
                for &p in parts {
                    let len = val(p).shape()[axis];
                    if let Some(gp) = buf!(p) {
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + len) * inner];
                            let dst = &mut gp[o * len * inner..(o + 1) * len * inner];
                            dst.iter_mut().zip(src).for_each(|(x, &v)| *x += v);
                        }
                    }
                    offset += len;
                }
            }
            &Op::Slice(a, axis, start) => {
                if let Some(ga) = buf!(a) {
                    let s = val(a).shape();
                    let outer = outer_size(s, axis);
                    let inner = inner_size(s, axis);
                    let len = out.shape()[axis];
                    for o in 0..outer {
                        let base = (o * s[axis] + start) * inner;
                        let dst = &mut ga[base..base + len * inner];
                        let src = &g[o * len * inner..(o + 1) * len * inner];
                        dst.iter_mut().zip(src).for_each(|(x, &v)| *x += v);
                    }
                }
            }
            Op::Gather(a, index) => {
                if let Some(ga) = buf!(*a) {
                    let last = *val(*a).shape().last().expect("non-empty");
                    for (row, grow) in ga.chunks_mut(last).zip(g.chunks(index.len())) {
                        for (&ix, &v) in index.iter().zip(grow) {
                            row[ix] += v;
                        }
                    }
                }
            }
            &Op::SumAll(a) => {
                if let Some(ga) = buf!(a) {
                    ga.iter_mut().for_each(|x| *x += g[0]);
                }
            }
            &Op::MeanAxis(a, axis) => {
                if let Some(ga) = buf!(a) {
                    let s = val(a).shape();
                    let (outer, n, inner) = (outer_size(s, axis), s[axis], inner_size(s, axis));
                    let inv = R::one() / R::of(n as f64);
                    for o in 0..outer {
                        for k in 0..n {
                            let dst = &mut ga[(o * n + k) * inner..(o * n + k + 1) * inner];
                            let src = &g[o * inner..(o + 1) * inner];
                            dst.iter_mut().zip(src).for_each(|(x, &v)| *x += v * inv);
                        }
                    }
                }
            }
            &Op::AddBias(a, bias) => {
                if let Some(ga) = buf!(a) {
                    ga.iter_mut().zip(g).for_each(|(x, &v)| *x += v);
                }
                if let Some(gb) = buf!(bias) {
                    let d = gb.len();
                    for row in g.chunks(d) {
                        gb.iter_mut().zip(row).for_each(|(x, &v)| *x += v);
                    }
                }
            }
            &Op::Softmax(a) => {
                if let Some(ga) = buf!(a) {
                    let last = *out.shape().last().expect("non-empty");
                    for ((dst, y), gr) in ga.chunks_mut(last).zip(out.data().chunks(last)).zip(g.chunks(last)) {
                        let dot: R = y.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                        for k in 0..last {
                            dst[k] += y[k] * (gr[k] - dot);
                        }
                    }
                }
            }
            &Op::LogSoftmax(a) => {
                if let Some(ga) = buf!(a) {
                    let last = *out.shape().last().expect("non-empty");
                    for ((dst, y), gr) in ga.chunks_mut(last).zip(out.data().chunks(last)).zip(g.chunks(last)) {
                        let total: R = gr.iter().copied().sum();
                        for k in 0..last {
                            dst[k] += gr[k] - y[k].exp() * total;
                        }
                    }
                }
            }
            &Op::RowNormalize(a) => {
                if let Some(ga) = buf!(a) {
                    let last = *out.shape().last().expect("non-empty");
                    let x = val(a).data();
                    for (((dst, y), gr), xr) in ga
                        .chunks_mut(last)
                        .zip(out.data().chunks(last))
                        .zip(g.chunks(last))
                        .zip(x.chunks(last))
                    {
                        let s: R = xr.iter().copied().sum();
                        let dot: R = y.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                        for k in 0..last {
                            dst[k] += (gr[k] - dot) / s;
                        }
                    }
                }
            }
            &Op::ScaleToNorm(a, alpha) => {
                if let Some(ga) = buf!(a) {
                    let last = *out.shape().last().expect("non-empty");
                    let x = val(a).data();
                    for ((dst, xr), gr) in ga.chunks_mut(last).zip(x.chunks(last)).zip(g.chunks(last)) {
                        let n = xr.iter().map(|&v| v * v).sum::<R>().sqrt();
                        let dot: R = xr.iter().zip(gr).map(|(&p, &q)| p * q).sum::<R>() / n;
                        for k in 0..last {
                            dst[k] += alpha / n * (gr[k] - xr[k] / n * dot);
                        }
                    }
                }
            }
            &Op::Conv2d(input, kernel, geom) => {
                assert_ne!(input, kernel, "conv2d input and kernel must be distinct nodes");
                let mut gi = take!(input);
                let mut gk = take!(kernel);
                geom.backward(val(input).data(), val(kernel).data(), g, gi.as_deref_mut(), gk.as_deref_mut());
                put!(input, gi);
                put!(kernel, gk);
            }
            Op::BatchNorm(x, gamma, beta, saved) => {
                let (x, gamma, beta) = (*x, *gamma, *beta);
                assert!(x != gamma && x != beta && gamma != beta, "batch_norm operands must be distinct nodes");
                let mut gx = take!(x);
                let mut gg = take!(gamma);
                let mut gb = take!(beta);
                norm::backward(saved, val(gamma).data(), g, gx.as_deref_mut(), gg.as_deref_mut(), gb.as_deref_mut());
                put!(x, gx);
                put!(gamma, gg);
                put!(beta, gb);
            }
        }
    }
}

/// Transposes the last two axes of a buffer whose trailing matrix is `r x c`.
fn transpose_last<R: Copy>(d: &[R], r: usize, c: usize) -> Vec<R> {
    let mut out = Vec::with_capacity(d.len());
    for m in d.chunks(r * c) {
        for j in 0..c {
            for i in 0..r {
                out.push(m[i * c + j]);
            }
        }
    }
    out
}

/// For each output flat index of the permuted tensor, the source flat index.
fn permute_index_map(shape: &[usize], perm: &[usize]) -> Vec<usize> {
    let nd = shape.len();
    let mut in_strides = vec![1; nd];
    for i in (0..nd.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let total: usize = shape.iter().product();
    let mut idx = vec![0usize; nd];
    let mut out = Vec::with_capacity(total);
    for _ in 0..total {
        out.push(idx.iter().zip(&strides).map(|(i, s)| i * s).sum());
        for ax in (0..nd).rev() {
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    out
}

pub(crate) fn log_sum_exp<R: Real>(row: &[R]) -> R {
    let m = row.iter().copied().fold(R::neg_infinity(), R::max);
    m + row.iter().map(|&v| (v - m).exp()).sum::<R>().ln()
}

pub(crate) fn softmax_in_place<R: Real>(row: &mut [R]) {
    let m = row.iter().copied().fold(R::neg_infinity(), R::max);
    let mut s = R::zero();
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    row.iter_mut().for_each(|v| *v /= s);
}
