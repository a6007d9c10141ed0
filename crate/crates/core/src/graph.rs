//! Tape-based reverse-mode differentiation.
//!
//! Every op appends a node holding its output tensor and enough saved state
//! to run its vector-Jacobian product. [`Graph::backward`] walks the tape once
//! in reverse execution order.

use rand::Rng;

use crate::error::{dim_err, usage_err, Error, Result};
use crate::scalar::{clamped_ln, Scalar};
use crate::tensor::{conv_dims, kernels, matmul_dims, pool_dims, ConvDims, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var },
    AddBias { x: Var, bias: Var },
    Conv1d { x: Var, w: Var, bias: Var, dims: ConvDims },
    MaxPool { x: Var, winners: Vec<usize> },
    Relu { x: Var },
    Softmax { x: Var },
    Reshape { x: Var },
    Dropout { x: Var, mask: Vec<T> },
    ConcatCols { a: Var, b: Var },
    PadCols { x: Var },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, by: T },
    Sum { x: Var },
    Mean { x: Var },
    CrossEntropy { probs: Var, labels: Vec<usize> },
    Chernoff { p: Var, q: Var, s: T, sums: Vec<T> },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf; it receives a gradient iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t.with_requires_grad(true))
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t.with_requires_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad()
    }

    fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        let rg = inputs.iter().any(|&v| self.needs_grad(v));
        let value = Tensor::new(shape, data)?.with_requires_grad(rg);
        if !value.is_finite() {
            return Err(Error::Numeric(format!(
                "{} produced a non-finite value",
                op_name(&op)
            )));
        }
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k, n) = matmul_dims(self.value(a).shape(), self.value(b).shape())?;
        let out = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        self.push(vec![m, n], out, Op::MatMul { a, b }, &[a, b])
    }

    /// `x[B, n] + bias[n]` broadcast over rows.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let n = *xs.last().unwrap();
        if self.value(bias).shape() != [n] {
            return Err(dim_err!(
                "bias {:?} does not match trailing extent of {xs:?}",
                self.value(bias).shape()
            ));
        }
        let b = self.value(bias).data();
        let out = self
            .value(x)
            .data()
            .chunks(n)
            .flat_map(|row| row.iter().zip(b).map(|(&v, &bv)| v + bv))
            .collect();
        self.push(xs, out, Op::AddBias { x, bias }, &[x, bias])
    }

    /// Valid-padding stride-1 convolution over `[B, C_in, L]` (or `[C_in, L]`).
    pub fn conv1d(&mut self, x: Var, w: Var, bias: Var) -> Result<Var> {
        let dims = conv_dims(
            self.value(x).shape(),
            self.value(w).shape(),
            self.value(bias).shape(),
        )?;
        let out = kernels::conv1d(
            self.value(x).data(),
            self.value(w).data(),
            self.value(bias).data(),
            &dims,
        );
        let mut shape = vec![dims.c_out, dims.l_out()];
        if self.value(x).ndim() == 3 {
            shape.insert(0, dims.batch);
        }
        self.push(shape, out, Op::Conv1d { x, w, bias, dims }, &[x, w, bias])
    }

    pub fn maxpool1d(&mut self, x: Var) -> Result<Var> {
        let (rows, len) = pool_dims(self.value(x).shape())?;
        let (out, winners) = kernels::maxpool2(self.value(x).data(), rows, len);
        let mut shape = self.value(x).shape().to_vec();
        *shape.last_mut().unwrap() = len / 2;
        self.push(shape, out, Op::MaxPool { x, winners }, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let out = t.data().iter().map(|&v| v.max(T::zero())).collect();
        let shape = t.shape().to_vec();
        self.push(shape, out, Op::Relu { x }, &[x])
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let width = *t.shape().last().unwrap();
        let out = kernels::softmax_rows(t.data(), width);
        let shape = t.shape().to_vec();
        self.push(shape, out, Op::Softmax { x }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let data = self.value(x).data().to_vec();
        self.push(shape, data, Op::Reshape { x }, &[x])
    }

    /// Inverted dropout: kept units are scaled by `1 / (1 - rate)`.
    pub fn dropout<R: Rng>(&mut self, x: Var, rate: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(usage_err!("dropout rate {rate} outside [0, 1)"));
        }
        let keep = T::of(1.0 / (1.0 - rate));
        let t = self.value(x);
        let mask: Vec<T> = (0..t.len())
            .map(|_| {
                if rng.gen::<f64>() >= rate {
                    keep
                } else {
                    T::zero()
                }
            })
            .collect();
        let out = t.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let shape = t.shape().to_vec();
        self.push(shape, out, Op::Dropout { x, mask }, &[x])
    }

    /// Concatenates two `[B, n]` matrices along columns.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[0] != sb[0] {
            return Err(dim_err!("concat_cols expects [B, n] operands, got {sa:?} and {sb:?}"));
        }
        let (rows, na, nb) = (sa[0], sa[1], sb[1]);
        let mut out = Vec::with_capacity(rows * (na + nb));
        for r in 0..rows {
            out.extend_from_slice(self.value(a).row(r));
            out.extend_from_slice(self.value(b).row(r));
        }
        self.push(vec![rows, na + nb], out, Op::ConcatCols { a, b }, &[a, b])
    }

    /// Right-pads each row of a `[B, n]` matrix with zeros up to `width`.
    pub fn pad_cols(&mut self, x: Var, width: usize) -> Result<Var> {
        let s = self.value(x).shape();
        if s.len() != 2 || s[1] > width {
            return Err(dim_err!("cannot pad {s:?} to width {width}"));
        }
        let rows = s[0];
        let mut out = Vec::with_capacity(rows * width);
        for r in 0..rows {
            let row = self.value(x).row(r);
            out.extend_from_slice(row);
            out.resize(out.len() + width - row.len(), T::zero());
        }
        self.push(vec![rows, width], out, Op::PadCols { x }, &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x + y);
        let shape = self.value(a).shape().to_vec();
        self.push(shape, out, Op::Add { a, b }, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x * y);
        let shape = self.value(a).shape().to_vec();
        self.push(shape, out, Op::Mul { a, b }, &[a, b])
    }

    pub fn scale(&mut self, x: Var, by: T) -> Result<Var> {
        let t = self.value(x);
        let out = t.data().iter().map(|&v| v * by).collect();
        let shape = t.shape().to_vec();
        self.push(shape, out, Op::Scale { x, by }, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        self.push(vec![1], vec![s], Op::Sum { x }, &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let m = t.sum() / T::of(t.len() as f64);
        self.push(vec![1], vec![m], Op::Mean { x }, &[x])
    }

    /// Mean over rows of `-ln(max(probs[r, label_r], 1e-12))`.
    pub fn cross_entropy(&mut self, probs: Var, labels: &[usize]) -> Result<Var> {
        let t = self.value(probs);
        let (rows, width) = rows_cols(t.shape());
        if labels.len() != rows {
            return Err(dim_err!("{} labels for {rows} rows", labels.len()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= width) {
            return Err(usage_err!("label {bad} out of range for {width} classes"));
        }
        let total: T = labels
            .iter()
            .enumerate()
            .map(|(r, &l)| -clamped_ln(t.data()[r * width + l]))
            .sum();
        let loss = total / T::of(rows as f64);
        self.push(
            vec![1],
            vec![loss],
            Op::CrossEntropy {
                probs,
                labels: labels.to_vec(),
            },
            &[probs],
        )
    }

    /// Row-wise Chernoff distance `-ln(max(Σ p^s q^(1-s), 1e-12))` between
    /// two `[B, n]` matrices of distributions; returns a `[B]` vector.
    pub fn chernoff(&mut self, p: Var, q: Var, s: T) -> Result<Var> {
        if !(s > T::zero() && s < T::one()) {
            return Err(usage_err!("chernoff exponent {s} outside (0, 1)"));
        }
        self.same_shape(p, q, "chernoff")?;
        let (rows, width) = rows_cols(self.value(p).shape());
        let (pd, qd) = (self.value(p).data(), self.value(q).data());
        let sums: Vec<T> = (0..rows)
            .map(|r| {
                let range = r * width..(r + 1) * width;
                chernoff_sum(&pd[range.clone()], &qd[range], s)
            })
            .collect();
        let out = sums.iter().map(|&v| -clamped_ln(v)).collect();
        self.push(vec![rows], out, Op::Chernoff { p, q, s, sums }, &[p, q])
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(dim_err!("{what}: shapes {sa:?} and {sb:?} differ"));
        }
        Ok(())
    }

    /// Propagates `∂loss/∂·` to every node that requires a gradient and
    /// stores it on that node's tensor.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(usage_err!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            ));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.value.requires_grad() {
                continue;
            }
            let g = match (grads[i].take(), &node.op) {
                (Some(g), _) => g,
                (None, Op::Leaf) => vec![T::zero(); node.value.len()],
                // Not an ancestor of the loss.
                (None, _) => continue,
            };
            self.propagate(i, &g, &mut grads);
            self.nodes[i].value.set_grad(g)?;
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| &nodes[v.0].value;
        let out = &nodes[i].value;
        match &nodes[i].op {
            Op::Leaf => {}
            &Op::MatMul { a, b } => {
                let (m, k) = (val(a).shape()[0], val(a).shape()[1]);
                let n = val(b).shape()[1];
                if let Some(da) = grad_buf(nodes, grads, a) {
                    kernels::matmul_backward(val(a).data(), val(b).data(), g, m, k, n, Some(da), None);
                }
                if let Some(db) = grad_buf(nodes, grads, b) {
                    kernels::matmul_backward(val(a).data(), val(b).data(), g, m, k, n, None, Some(db));
                }
            }
            &Op::AddBias { x, bias } => {
                if let Some(dx) = grad_buf(nodes, grads, x) {
                    accumulate(dx, g);
                }
                if let Some(db) = grad_buf(nodes, grads, bias) {
                    let n = db.len();
                    for row in g.chunks(n) {
                        accumulate(db, row);
                    }
                }
            }
            &Op::Conv1d { x, w, bias, dims } => {
                let (xd, wd) = (val(x).data(), val(w).data());
                if let Some(dx) = grad_buf(nodes, grads, x) {
                    kernels::conv1d_backward(xd, wd, g, &dims, Some(dx), None, None);
                }
                if let Some(dw) = grad_buf(nodes, grads, w) {
                    kernels::conv1d_backward(xd, wd, g, &dims, None, Some(dw), None);
                }
                if let Some(db) = grad_buf(nodes, grads, bias) {
                    kernels::conv1d_backward(xd, wd, g, &dims, None, None, Some(db));
                }
            }
            Op::MaxPool { x, winners } => {
                if let Some(dx) = grad_buf(nodes, grads, *x) {
                    for (&w, &gv) in winners.iter().zip(g) {
                        dx[w] += gv;
                    }
                }
            }
            &Op::Relu { x } => {
                if let Some(dx) = grad_buf(nodes, grads, x) {
                    for ((d, &gv), &xv) in dx.iter_mut().zip(g).zip(val(x).data()) {
                        if xv > T::zero() {
                            *d += gv;
                        }
                    }
                }
            }
            &Op::Softmax { x } => {
                if let Some(dx) = grad_buf(nodes, grads, x) {
                    let width = *out.shape().last().unwrap();
                    kernels::softmax_backward(out.data(), g, width, dx);
                }
            }
            &Op::Reshape { x } => {
                if let Some(dx) = grad_buf(nodes, grads, x) {
                    accumulate(dx, g);
                }
            }
            Op::Dropout { x, mask } => {
                if let Some(dx) = grad_buf(nodes, grads, *x) {
                    for ((d, &gv), &m) in dx.iter_mut().zip(g).zip(mask) {
                        *d += gv * m;
                    }
                }
            }
            &Op::ConcatCols { a, b } => {
                let rows = out.shape()[0];
                let na = val(a).shape()[1];
                let nb = val(b).shape()[1];
                if let Some(da) = grad_buf(nodes, grads, a) {
                    for r in 0..rows {
                        let src = &g[r * (na + nb)..r * (na + nb) + na];
                        accumulate(&mut da[r * na..(r + 1) * na], src);
                    }
                }
                if let Some(db) = grad_buf(nodes, grads, b) {
                    for r in 0..rows {
                        let src = &g[r * (na + nb) + na..(r + 1) * (na + nb)];
                        accumulate(&mut db[r * nb..(r + 1) * nb], src);
                    }
                }
            }
            &Op::PadCols { x } => {
                let width = out.shape()[1];
                let n = val(x).shape()[1];
                if let Some(dx) = grad_buf(nodes, grads, x) {
                    for (r, row) in g.chunks(width).enumerate() {
                        accumulate(&mut dx[r * n..(r + 1) * n], &row[..n]);
                    }
                }
            }
            &Op::Add { a, b } => {
                if let Some(da) = grad_buf(nodes, grads, a) {
                    accumulate(da, g);
                }
                if let Some(db) = grad_buf(nodes, grads, b) {
                    accumulate(db, g);
                }
            }
            &Op::Mul { a, b } => {
                if let Some(da) = grad_buf(nodes, grads, a) {
                    for ((d, &gv), &bv) in da.iter_mut().zip(g).zip(val(b).data()) {
                        *d += gv * bv;
                    }
                }
                if let Some(db) = grad_buf(nodes, grads, b) {
                    for ((d, &gv), &av) in db.iter_mut().zip(g).zip(val(a).data()) {
                        *d += gv * av;
                    }
                }
            }
            &Op::Scale { x, by } => {
                if let Some(dx) = grad_buf(nodes, grads, x) {
                    for (d, &gv) in dx.iter_mut().zip(g) {
                        *d += gv * by;
                    }
                }
            }
            &Op::Sum { x } => {
                if let Some(dx) = grad_buf(nodes, grads, x) {
                    for d in dx.iter_mut() {
                        *d += g[0];
                    }
                }
            }
            &Op::Mean { x } => {
                if let Some(dx) = grad_buf(nodes, grads, x) {
                    let share = g[0] / T::of(dx.len() as f64);
                    for d in dx.iter_mut() {
                        *d += share;
                    }
                }
            }
            Op::CrossEntropy { probs, labels } => {
                let width = *val(*probs).shape().last().unwrap();
                let rows = T::of(labels.len() as f64);
                let pd = val(*probs).data();
                if let Some(dp) = grad_buf(nodes, grads, *probs) {
                    for (r, &l) in labels.iter().enumerate() {
                        let p = pd[r * width + l];
                        if p > T::log_floor() {
                            dp[r * width + l] -= g[0] / (rows * p);
                        }
                    }
                }
            }
            Op::Chernoff { p, q, s, sums } => {
                let (p, q, s) = (*p, *q, *s);
                let width = *val(p).shape().last().unwrap();
                let (pd, qd) = (val(p).data(), val(q).data());
                let floor = T::log_floor();
                // d(-ln S)/dp_i = -s p_i^(s-1) q_i^(1-s) / S, zero where the clamp is active.
                let coef = |r: usize| {
                    if sums[r] > floor {
                        -g[r] / sums[r]
                    } else {
                        T::zero()
                    }
                };
                if let Some(dp) = grad_buf(nodes, grads, p) {
                    for r in 0..g.len() {
                        let c = coef(r);
                        for k in r * width..(r + 1) * width {
                            let term = pd[k].powf(s) * qd[k].powf(T::one() - s);
                            dp[k] += c * s * term / pd[k].max(floor);
                        }
                    }
                }
                if let Some(dq) = grad_buf(nodes, grads, q) {
                    for r in 0..g.len() {
                        let c = coef(r);
                        for k in r * width..(r + 1) * width {
                            let term = pd[k].powf(s) * qd[k].powf(T::one() - s);
                            dq[k] += c * (T::one() - s) * term / qd[k].max(floor);
                        }
                    }
                }
            }
        }
    }
}

/// `Σ_i p_i^s · q_i^(1-s)`.
pub(crate) fn chernoff_sum<T: Scalar>(p: &[T], q: &[T], s: T) -> T {
    let mut acc = T::zero();
    for (&a, &b) in p.iter().zip(q) {
        acc += a.powf(s) * b.powf(T::one() - s);
    }
    acc
}

/// Gradient buffer of `v`, allocated on first touch; `None` if `v` is constant.
fn grad_buf<'a, T: Scalar>(
    nodes: &[Node<T>],
    grads: &'a mut [Option<Vec<T>>],
    v: Var,
) -> Option<&'a mut Vec<T>> {
    let t = &nodes[v.0].value;
    if !t.requires_grad() {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); t.len()]))
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    let width = *shape.last().unwrap();
    (shape.iter().product::<usize>() / width, width)
}

fn zip_map<T: Scalar>(a: &[T], b: &[T], f: impl Fn(T, T) -> T) -> Vec<T> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn accumulate<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn op_name<T>(op: &Op<T>) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::MatMul { .. } => "matmul",
        Op::AddBias { .. } => "add_bias",
        Op::Conv1d { .. } => "conv1d",
        Op::MaxPool { .. } => "maxpool1d",
        Op::Relu { .. } => "relu",
        Op::Softmax { .. } => "softmax",
        Op::Reshape { .. } => "reshape",
        Op::Dropout { .. } => "dropout",
        Op::ConcatCols { .. } => "concat_cols",
        Op::PadCols { .. } => "pad_cols",
        Op::Add { .. } => "add",
        Op::Mul { .. } => "mul",
        Op::Scale { .. } => "scale",
        Op::Sum { .. } => "sum",
        Op::Mean { .. } => "mean",
        Op::CrossEntropy { .. } => "cross_entropy",
        Op::Chernoff { .. } => "chernoff",
    }
}
