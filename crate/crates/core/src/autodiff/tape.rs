//! Define-by-run reverse-mode tape.
//!
//! Every operation appends one node holding its forward value and the ids of
//! its inputs. Inputs always precede the node that consumes them, so a single
//! reverse sweep over the node list visits every op once in topological order.

use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Norm floor used by cosine similarity and row normalization.
pub const NORM_EPS: f64 = 1e-8;

/// Handle to a value recorded on a [`Tape`].
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
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Affine(Var, f64),
    Exp(Var),
    Log(Var),
    Tanh(Var),
    Sigmoid(Var),
    Softplus(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Softmax { x: Var, axis: usize },
    LogSoftmax { x: Var, axis: usize },
    LogSumExp { x: Var, axis: usize },
    Sum(Var),
    Mean(Var),
    SumAxis { x: Var, axis: usize },
    Concat { parts: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Cosine(Var, Var),
    NormalizeRows(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    param: Option<ParamId>,
}

/// Gradients produced by one backward sweep, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Splits `shape` around `axis` into (outer, extent, inner) strides.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let n = shape[axis];
    let inner = shape[axis + 1..].iter().product();
    (outer, n, inner)
}

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(Error::contract(format!(
            "{op}: axis {axis} out of range for shape {shape:?}"
        )));
    }
    Ok(())
}

fn check_finite(op: &'static str, t: &Tensor) -> Result<()> {
    if t.data().iter().any(|v| v.is_nan()) {
        return Err(Error::NumericInput { op });
    }
    Ok(())
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Result shape of an elementwise binary op; only exact match or a scalar
/// operand is accepted.
fn broadcast_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<Vec<usize>> {
    if a.shape() == b.shape() || (b.is_scalar() && (!a.is_scalar() || a.rank() >= b.rank())) {
        Ok(a.shape().to_vec())
    } else if a.is_scalar() {
        Ok(b.shape().to_vec())
    } else {
        Err(Error::Shape {
            op,
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        })
    }
}

#[inline]
fn bget(t: &[f64], i: usize) -> f64 {
    if t.len() == 1 {
        t[0]
    } else {
        t[i]
    }
}

fn softmax_along(data: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let (outer, n, inner) = axis_split(shape, axis);
    let mut out = vec![0.0; data.len()];
    for o in 0..outer {
        for j in 0..inner {
            let idx = |i: usize| (o * n + i) * inner + j;
            let max = (0..n)
                .map(|i| data[idx(i)])
                .fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for i in 0..n {
                let e = (data[idx(i)] - max).exp();
                out[idx(i)] = e;
                total += e;
            }
            for i in 0..n {
                out[idx(i)] /= total;
            }
        }
    }
    out
}

fn logsumexp_along(data: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let (outer, n, inner) = axis_split(shape, axis);
    let mut out = vec![0.0; outer * inner];
    for o in 0..outer {
        for j in 0..inner {
            let idx = |i: usize| (o * n + i) * inner + j;
            let max = (0..n)
                .map(|i| data[idx(i)])
                .fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = (0..n).map(|i| (data[idx(i)] - max).exp()).sum();
            out[o * inner + j] = max + s.ln();
        }
    }
    out
}

fn reduced_shape(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    s.remove(axis);
    s
}

/// Row-major `m x k` times `k x n`. Operands are given as (data, row
/// stride, column stride) so transposes need no copy.
fn gemm(
    a: (&[f64], usize, usize),
    b: (&[f64], usize, usize),
    m: usize,
    k: usize,
    n: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    if m == 0 || n == 0 || k == 0 {
        return out;
    }
    // SAFETY: every index the kernel touches lies inside the slices because
    // the strides describe `m x k`, `k x n` and `m x n` row-major layouts
    // (or their transposes) of buffers with exactly those element counts.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.0.as_ptr(),
            a.1 as isize,
            a.2 as isize,
            b.0.as_ptr(),
            b.1 as isize,
            b.2 as isize,
            0.0,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    out
}

fn transpose_raw(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            op,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a derived value; it needs a gradient iff any input does.
    fn derived(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, inputs: &[Var]) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].value.requires_grad());
        let t = Tensor::new(shape, data)
            .expect("op produced inconsistent shape")
            .with_requires_grad(rg);
        self.push(t, op)
    }

    /// Records a value that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t.with_requires_grad(false), Op::Leaf)
    }

    /// Records an input leaf; its gradient is available from [`Gradients`]
    /// when `t.requires_grad()` is set.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let rg = t.requires_grad();
        let mut t = t;
        t.zero_grad();
        self.push(t.with_requires_grad(rg), Op::Leaf)
    }

    /// Records a snapshot of a stored parameter, linked back for
    /// [`Tape::backward_into`].
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let src = store.get(id);
        let t = Tensor::new(src.shape().to_vec(), src.data().to_vec())
            .expect("stored tensor is valid")
            .with_requires_grad(true);
        let v = self.push(t, Op::Leaf);
        self.nodes[v.0].param = Some(id);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    fn binary(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        mk: fn(Var, Var) -> Op,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let shape = broadcast_shape(op, ta, tb)?;
        let n: usize = shape.iter().product();
        let (da, db) = (ta.data(), tb.data());
        let data = (0..n).map(|i| f(bget(da, i), bget(db, i))).collect();
        Ok(self.derived(shape, data, mk(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(b).data().contains(&0.0) {
            return Err(Error::Domain {
                op: "div",
                detail: "zero divisor".into(),
            });
        }
        self.binary("div", a, b, |x, y| x / y, Op::Div)
    }

    /// `scale * x + shift` with constant coefficients.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|v| scale * v + shift).collect();
        self.derived(t.shape().to_vec(), data, Op::Affine(x, scale), &[x])
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.affine(x, c, 0.0)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.affine(x, -1.0, 0.0)
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| f(v)).collect();
        self.derived(t.shape().to_vec(), data, op, &[x])
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        if let Some(bad) = self
            .value(x)
            .data()
            .iter()
            .find(|&&v| v <= 0.0 || v.is_nan())
        {
            return Err(Error::Domain {
                op: "log",
                detail: format!("log of nonpositive value {bad}"),
            });
        }
        Ok(self.unary(x, f64::ln, Op::Log(x)))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, softplus, Op::Softplus(x))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(Error::Shape {
                op: "matmul",
                left: ta.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let data = gemm((ta.data(), k, 1), (tb.data(), n, 1), m, k, n);
        Ok(self.derived(vec![m, n], data, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.rank() != 2 {
            return Err(Error::contract(format!(
                "transpose needs a matrix, got shape {:?}",
                t.shape()
            )));
        }
        let (r, c) = (t.shape()[0], t.shape()[1]);
        let data = transpose_raw(t.data(), r, c);
        Ok(self.derived(vec![c, r], data, Op::Transpose(x), &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let n: usize = shape.iter().product();
        if n != t.numel() || shape.contains(&0) {
            return Err(Error::Shape {
                op: "reshape",
                left: t.shape().to_vec(),
                right: shape.to_vec(),
            });
        }
        let data = t.data().to_vec();
        Ok(self.derived(shape.to_vec(), data, Op::Reshape(x), &[x]))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        check_axis("softmax", t.shape(), axis)?;
        check_finite("softmax", t)?;
        let data = softmax_along(t.data(), t.shape(), axis);
        let shape = t.shape().to_vec();
        Ok(self.derived(shape, data, Op::Softmax { x, axis }, &[x]))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        check_axis("log_softmax", t.shape(), axis)?;
        check_finite("log_softmax", t)?;
        let shape = t.shape().to_vec();
        let lse = logsumexp_along(t.data(), &shape, axis);
        let (outer, n, inner) = axis_split(&shape, axis);
        let mut data = t.data().to_vec();
        for o in 0..outer {
            for i in 0..n {
                for j in 0..inner {
                    data[(o * n + i) * inner + j] -= lse[o * inner + j];
                }
            }
        }
        Ok(self.derived(shape, data, Op::LogSoftmax { x, axis }, &[x]))
    }

    /// `log(sum(exp(x)))` along `axis`, which is removed from the shape.
    pub fn logsumexp(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        check_axis("logsumexp", t.shape(), axis)?;
        check_finite("logsumexp", t)?;
        let data = logsumexp_along(t.data(), t.shape(), axis);
        let shape = reduced_shape(t.shape(), axis);
        Ok(self.derived(shape, data, Op::LogSumExp { x, axis }, &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.derived(Vec::new(), vec![s], Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let m = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.derived(Vec::new(), vec![m], Op::Mean(x), &[x])
    }

    /// Sum along `axis`, removing it from the shape.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        check_axis("sum_axis", t.shape(), axis)?;
        let (outer, n, inner) = axis_split(t.shape(), axis);
        let d = t.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..n {
                for j in 0..inner {
                    out[o * inner + j] += d[(o * n + i) * inner + j];
                }
            }
        }
        let shape = reduced_shape(t.shape(), axis);
        Ok(self.derived(shape, out, Op::SumAxis { x, axis }, &[x]))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::contract("concat of zero tensors"))?;
        let base = self.value(*first).shape().to_vec();
        check_axis("concat", &base, axis)?;
        let mut total = 0;
        for p in parts {
            let s = self.value(*p).shape();
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::Shape {
                    op: "concat",
                    left: base,
                    right: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_split(&shape, axis);
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for p in parts {
                let t = self.value(*p);
                let w = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * w..(o + 1) * w]);
            }
        }
        let op = Op::Concat {
            parts: parts.to_vec(),
            axis,
        };
        Ok(self.derived(shape, out, op, parts))
    }

    /// Elements `start..start + len` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        check_axis("slice", t.shape(), axis)?;
        if len == 0 || start + len > t.shape()[axis] {
            return Err(Error::contract(format!(
                "slice {start}..{} out of range for axis {axis} of {:?}",
                start + len,
                t.shape()
            )));
        }
        let (outer, n, inner) = axis_split(t.shape(), axis);
        let d = t.data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let from = (o * n + start) * inner;
            out.extend_from_slice(&d[from..from + len * inner]);
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = len;
        Ok(self.derived(shape, out, Op::Slice { x, axis, start }, &[x]))
    }

    /// Row `i` of a matrix as a `1 x cols` matrix.
    pub fn row(&mut self, x: Var, i: usize) -> Result<Var> {
        self.slice(x, 0, i, 1)
    }

    /// Cosine of the angle between two equally sized tensors, with
    /// [`NORM_EPS`] added to both norms.
    pub fn cosine_similarity(&mut self, u: Var, v: Var) -> Result<Var> {
        let (tu, tv) = (self.value(u), self.value(v));
        if tu.numel() != tv.numel() {
            return Err(Error::Shape {
                op: "cosine_similarity",
                left: tu.shape().to_vec(),
                right: tv.shape().to_vec(),
            });
        }
        let dot: f64 = tu.data().iter().zip(tv.data()).map(|(a, b)| a * b).sum();
        let c = dot / ((norm(tu.data()) + NORM_EPS) * (norm(tv.data()) + NORM_EPS));
        Ok(self.derived(Vec::new(), vec![c], Op::Cosine(u, v), &[u, v]))
    }

    /// Divides each slice along the last axis by its norm plus [`NORM_EPS`].
    pub fn normalize_rows(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let c = *t.shape().last().unwrap_or(&1);
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(c) {
            let a = norm(row) + NORM_EPS;
            row.iter_mut().for_each(|v| *v /= a);
        }
        self.derived(t.shape().to_vec(), out, Op::NormalizeRows(x), &[x])
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if !lt.is_scalar() {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lt.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.value.requires_grad() {
                self.propagate(node, &g, &mut grads);
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Runs [`Tape::backward`] and adds every parameter leaf's gradient
    /// into `store`. Repeated calls accumulate.
    pub fn backward_into(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        let grads = self.backward(loss)?;
        for (i, node) in self.nodes.iter().enumerate().take(loss.0 + 1) {
            if let (Some(id), Some(g)) = (node.param, grads.grads[i].as_deref()) {
                store.get_mut(id).accumulate_grad(g);
            }
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad()
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = node.value.data();
        let mut acc = |v: Var, contrib: Vec<f64>| {
            if !self.nodes[v.0].value.requires_grad() {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.iter_mut().zip(&contrib).for_each(|(a, b)| *a += b),
                slot @ None => *slot = Some(contrib),
            }
        };
        // Gradient of a broadcast operand: sum when the operand is scalar.
        let reduce = |v: Var, full: Vec<f64>| -> Vec<f64> {
            if self.nodes[v.0].value.numel() == 1 && full.len() != 1 {
                vec![full.iter().sum()]
            } else {
                full
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if self.wants(*a) {
                    acc(*a, reduce(*a, g.to_vec()));
                }
                if self.wants(*b) {
                    acc(*b, reduce(*b, g.to_vec()));
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    acc(*a, reduce(*a, g.to_vec()));
                }
                if self.wants(*b) {
                    acc(*b, reduce(*b, g.iter().map(|v| -v).collect()));
                }
            }
            Op::Mul(a, b) => {
                let (da, db) = (self.value(*a).data(), self.value(*b).data());
                if self.wants(*a) {
                    let c = g
                        .iter()
                        .enumerate()
                        .map(|(i, gi)| gi * bget(db, i))
                        .collect();
                    acc(*a, reduce(*a, c));
                }
                if self.wants(*b) {
                    let c = g
                        .iter()
                        .enumerate()
                        .map(|(i, gi)| gi * bget(da, i))
                        .collect();
                    acc(*b, reduce(*b, c));
                }
            }
            Op::Div(a, b) => {
                let (da, db) = (self.value(*a).data(), self.value(*b).data());
                if self.wants(*a) {
                    let c = g
                        .iter()
                        .enumerate()
                        .map(|(i, gi)| gi / bget(db, i))
                        .collect();
                    acc(*a, reduce(*a, c));
                }
                if self.wants(*b) {
                    let c = g
                        .iter()
                        .enumerate()
                        .map(|(i, gi)| {
                            let y = bget(db, i);
                            -gi * bget(da, i) / (y * y)
                        })
                        .collect();
                    acc(*b, reduce(*b, c));
                }
            }
            Op::Affine(x, s) => acc(*x, g.iter().map(|v| v * s).collect()),
            Op::Exp(x) => acc(*x, g.iter().zip(out).map(|(gi, y)| gi * y).collect()),
            Op::Log(x) => {
                let d = self.value(*x).data();
                acc(*x, g.iter().zip(d).map(|(gi, xi)| gi / xi).collect())
            }
            Op::Tanh(x) => acc(
                *x,
                g.iter()
                    .zip(out)
                    .map(|(gi, y)| gi * (1.0 - y * y))
                    .collect(),
            ),
            Op::Sigmoid(x) => acc(
                *x,
                g.iter()
                    .zip(out)
                    .map(|(gi, y)| gi * y * (1.0 - y))
                    .collect(),
            ),
            Op::Softplus(x) => {
                let d = self.value(*x).data();
                acc(
                    *x,
                    g.iter().zip(d).map(|(gi, xi)| gi * sigmoid(*xi)).collect(),
                )
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if self.wants(*a) {
                    acc(*a, gemm((g, n, 1), (tb.data(), 1, n), m, n, k));
                }
                if self.wants(*b) {
                    acc(*b, gemm((ta.data(), 1, k), (g, n, 1), k, m, n));
                }
            }
            Op::Transpose(x) => {
                let s = node.value.shape();
                acc(*x, transpose_raw(g, s[0], s[1]))
            }
            Op::Reshape(x) => acc(*x, g.to_vec()),
            Op::Softmax { x, axis } => {
                let (outer, n, inner) = axis_split(node.value.shape(), *axis);
                let mut c = vec![0.0; g.len()];
                for o in 0..outer {
                    for j in 0..inner {
                        let idx = |i: usize| (o * n + i) * inner + j;
                        let dot: f64 = (0..n).map(|i| g[idx(i)] * out[idx(i)]).sum();
                        for i in 0..n {
                            c[idx(i)] = out[idx(i)] * (g[idx(i)] - dot);
                        }
                    }
                }
                acc(*x, c)
            }
            Op::LogSoftmax { x, axis } => {
                let (outer, n, inner) = axis_split(node.value.shape(), *axis);
                let mut c = vec![0.0; g.len()];
                for o in 0..outer {
                    for j in 0..inner {
                        let idx = |i: usize| (o * n + i) * inner + j;
                        let gs: f64 = (0..n).map(|i| g[idx(i)]).sum();
                        for i in 0..n {
                            c[idx(i)] = g[idx(i)] - out[idx(i)].exp() * gs;
                        }
                    }
                }
                acc(*x, c)
            }
            Op::LogSumExp { x, axis } => {
                let tx = self.value(*x);
                let (outer, n, inner) = axis_split(tx.shape(), *axis);
                let d = tx.data();
                let mut c = vec![0.0; d.len()];
                for o in 0..outer {
                    for j in 0..inner {
                        let r = o * inner + j;
                        for i in 0..n {
                            let k = (o * n + i) * inner + j;
                            c[k] = g[r] * (d[k] - out[r]).exp();
                        }
                    }
                }
                acc(*x, c)
            }
            Op::Sum(x) => acc(*x, vec![g[0]; self.value(*x).numel()]),
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                acc(*x, vec![g[0] / n as f64; n])
            }
            Op::SumAxis { x, axis } => {
                let tx = self.value(*x);
                let (outer, n, inner) = axis_split(tx.shape(), *axis);
                let mut c = vec![0.0; tx.numel()];
                for o in 0..outer {
                    for i in 0..n {
                        for j in 0..inner {
                            c[(o * n + i) * inner + j] = g[o * inner + j];
                        }
                    }
                }
                acc(*x, c)
            }
            Op::Concat { parts, axis } => {
                let (outer, _, inner) = axis_split(node.value.shape(), *axis);
                let total = node.value.shape()[*axis];
                let mut offset = 0;
                for p in parts {
                    let w = self.value(*p).shape()[*axis];
                    if self.wants(*p) {
                        let mut c = Vec::with_capacity(outer * w * inner);
                        for o in 0..outer {
                            let from = (o * total + offset) * inner;
                            c.extend_from_slice(&g[from..from + w * inner]);
                        }
                        acc(*p, c);
                    }
                    offset += w;
                }
            }
            Op::Slice { x, axis, start } => {
                let tx = self.value(*x);
                let (outer, n, inner) = axis_split(tx.shape(), *axis);
                let len = node.value.shape()[*axis];
                let mut c = vec![0.0; tx.numel()];
                for o in 0..outer {
                    let from = (o * n + start) * inner;
                    c[from..from + len * inner]
                        .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                acc(*x, c)
            }
            Op::Cosine(u, v) => {
                let (du, dv) = (self.value(*u).data(), self.value(*v).data());
                let (nu, nv) = (norm(du), norm(dv));
                let (a, b) = (nu + NORM_EPS, nv + NORM_EPS);
                let dot: f64 = du.iter().zip(dv).map(|(x, y)| x * y).sum();
                let grad_for = |x: &[f64], y: &[f64], nx: f64, ax: f64, ay: f64| -> Vec<f64> {
                    x.iter()
                        .zip(y)
                        .map(|(xi, yi)| {
                            let radial = if nx > 0.0 {
                                dot * xi / (ax * ax * ay * nx)
                            } else {
                                0.0
                            };
                            g[0] * (yi / (ax * ay) - radial)
                        })
                        .collect()
                };
                if self.wants(*u) {
                    acc(*u, grad_for(du, dv, nu, a, b));
                }
                if self.wants(*v) {
                    acc(*v, grad_for(dv, du, nv, b, a));
                }
            }
            Op::NormalizeRows(x) => {
                let d = self.value(*x).data();
                let c = *node.value.shape().last().unwrap_or(&1);
                let mut res = vec![0.0; d.len()];
                for ((xr, gr), rr) in d.chunks(c).zip(g.chunks(c)).zip(res.chunks_mut(c)) {
                    let n = norm(xr);
                    let a = n + NORM_EPS;
                    let gx: f64 = xr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for i in 0..c {
                        let radial = if n > 0.0 {
                            gx * xr[i] / (a * a * n)
                        } else {
                            0.0
                        };
                        rr[i] = gr[i] / a - radial;
                    }
                }
                acc(*x, res)
            }
        }
    }
}
