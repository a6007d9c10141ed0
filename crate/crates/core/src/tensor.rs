//! Dense row-major tensors and the raw kernels behind every differentiable op.
//!
//! The free functions in [`kernels`] work on flat slices with explicit extents
//! and are shared by the eager tensor methods below and by the recording
//! [`Graph`](crate::graph::Graph). All loops use a fixed iteration order so
//! identical inputs produce bit-identical outputs.

use crate::error::{dim_err, Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    grad: Option<Vec<T>>,
    requires_grad: bool,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(dim_err!("zero extent in shape {shape:?}"));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(dim_err!(
                "shape {shape:?} holds {n} values but {} were given",
                data.len()
            ));
        }
        Ok(Self {
            shape,
            data,
            grad: None,
            requires_grad: false,
        })
    }

    /// 1-D tensor over `data`.
    pub fn from_vec(data: Vec<T>) -> Result<Self> {
        Self::new(vec![data.len()], data)
    }

    pub fn from_f64(shape: Vec<usize>, data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| T::of(v)).collect())
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![T::zero(); n],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn scalar(v: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![v],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn with_requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<T>) -> Result<()> {
        if grad.len() != self.data.len() {
            return Err(dim_err!(
                "gradient length {} does not match tensor length {}",
                grad.len(),
                self.data.len()
            ));
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Single value of a one-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.data.len() != 1 {
            return Err(Error::Usage(format!(
                "item() on tensor of shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.data.clone())
    }

    /// Row `i` of a tensor viewed as `[shape[0], rest]`.
    pub fn row(&self, i: usize) -> &[T] {
        let w = self.data.len() / self.shape[0];
        &self.data[i * w..(i + 1) * w]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn check_finite(&self, what: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::Numeric(format!("{what} produced a non-finite value")))
        }
    }

    pub fn matmul(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        let (m, k, n) = matmul_dims(self.shape(), rhs.shape())?;
        let out = kernels::matmul(&self.data, &rhs.data, m, k, n);
        let t = Tensor::new(vec![m, n], out)?;
        t.check_finite("matmul")?;
        Ok(t)
    }

    /// Valid-padding stride-1 convolution. `self` is `[C_in, L]` or `[B, C_in, L]`.
    pub fn conv1d(&self, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
        let d = conv_dims(self.shape(), weight.shape(), bias.shape())?;
        let out = kernels::conv1d(&self.data, &weight.data, &bias.data, &d);
        let mut shape = vec![d.c_out, d.l_out()];
        if self.ndim() == 3 {
            shape.insert(0, d.batch);
        }
        let t = Tensor::new(shape, out)?;
        t.check_finite("conv1d")?;
        Ok(t)
    }

    /// Non-overlapping max pool of width 2 over the last axis; trailing odd
    /// element dropped.
    pub fn maxpool1d(&self) -> Result<Tensor<T>> {
        let (rows, len) = pool_dims(self.shape())?;
        let (out, _) = kernels::maxpool2(&self.data, rows, len);
        let mut shape = self.shape.clone();
        *shape.last_mut().unwrap() = len / 2;
        Tensor::new(shape, out)
    }

    pub fn relu(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| v.max(T::zero())).collect(),
            grad: None,
            requires_grad: false,
        }
    }

    /// Softmax over the last axis.
    pub fn softmax(&self) -> Result<Tensor<T>> {
        if !self.is_finite() {
            return Err(Error::Numeric("softmax input is not finite".into()));
        }
        let width = *self.shape.last().unwrap();
        let out = kernels::softmax_rows(&self.data, width);
        Tensor::new(self.shape.clone(), out)
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn argmax(&self) -> usize {
        kernels::argmax(&self.data)
    }
}

pub(crate) fn matmul_dims(a: &[usize], b: &[usize]) -> Result<(usize, usize, usize)> {
    if a.len() != 2 || b.len() != 2 {
        return Err(dim_err!("matmul expects 2-D operands, got {a:?} and {b:?}"));
    }
    if a[1] != b[0] {
        return Err(dim_err!("matmul inner extents differ: {a:?} x {b:?}"));
    }
    Ok((a[0], a[1], b[1]))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvDims {
    pub batch: usize,
    pub c_in: usize,
    pub len: usize,
    pub c_out: usize,
    pub kernel: usize,
}

impl ConvDims {
    pub fn l_out(&self) -> usize {
        self.len - self.kernel + 1
    }
}

pub(crate) fn conv_dims(input: &[usize], weight: &[usize], bias: &[usize]) -> Result<ConvDims> {
    let (batch, c_in, len) = match *input {
        [c, l] => (1, c, l),
        [b, c, l] => (b, c, l),
        _ => return Err(dim_err!("conv1d input must be [C, L] or [B, C, L], got {input:?}")),
    };
    let [c_out, wc, kernel] = *weight else {
        return Err(dim_err!("conv1d weight must be [C_out, C_in, K], got {weight:?}"));
    };
    if wc != c_in {
        return Err(dim_err!("conv1d weight expects {wc} input channels, input has {c_in}"));
    }
    if bias != [c_out] {
        return Err(dim_err!("conv1d bias must be [{c_out}], got {bias:?}"));
    }
    if len < kernel {
        return Err(dim_err!("conv1d input length {len} is shorter than kernel {kernel}"));
    }
    Ok(ConvDims {
        batch,
        c_in,
        len,
        c_out,
        kernel,
    })
}

pub(crate) fn pool_dims(shape: &[usize]) -> Result<(usize, usize)> {
    let len = *shape.last().ok_or_else(|| dim_err!("maxpool1d on a 0-d tensor"))?;
    if len < 2 {
        return Err(dim_err!("maxpool1d needs length >= 2, got {len}"));
    }
    Ok((shape.iter().product::<usize>() / len, len))
}

pub(crate) mod kernels {
    use super::ConvDims;
    use crate::scalar::Scalar;

    pub fn matmul<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let av = a[i * k + p];
                if av == T::zero() {
                    continue;
                }
                let brow = &b[p * n..(p + 1) * n];
                for (o, &bv) in row.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
        out
    }

    /// Accumulates `dA += dC · Bᵀ` and `dB += Aᵀ · dC`.
    #[allow(clippy::too_many_arguments)]
    pub fn matmul_backward<T: Scalar>(
        a: &[T],
        b: &[T],
        dc: &[T],
        m: usize,
        k: usize,
        n: usize,
        da: Option<&mut [T]>,
        db: Option<&mut [T]>,
    ) {
        if let Some(da) = da {
            for i in 0..m {
                let dcrow = &dc[i * n..(i + 1) * n];
                for p in 0..k {
                    let brow = &b[p * n..(p + 1) * n];
                    let mut acc = T::zero();
                    for (&x, &y) in dcrow.iter().zip(brow) {
                        acc += x * y;
                    }
                    da[i * k + p] += acc;
                }
            }
        }
        if let Some(db) = db {
            for i in 0..m {
                let dcrow = &dc[i * n..(i + 1) * n];
                for p in 0..k {
                    let av = a[i * k + p];
                    if av == T::zero() {
                        continue;
                    }
                    let drow = &mut db[p * n..(p + 1) * n];
                    for (o, &g) in drow.iter_mut().zip(dcrow) {
                        *o += av * g;
                    }
                }
            }
        }
    }

    pub fn conv1d<T: Scalar>(input: &[T], weight: &[T], bias: &[T], d: &ConvDims) -> Vec<T> {
        let lo = d.l_out();
        let mut out = vec![T::zero(); d.batch * d.c_out * lo];
        for b in 0..d.batch {
            let x = &input[b * d.c_in * d.len..(b + 1) * d.c_in * d.len];
            for o in 0..d.c_out {
                let y = &mut out[(b * d.c_out + o) * lo..(b * d.c_out + o + 1) * lo];
                y.fill(bias[o]);
                for c in 0..d.c_in {
                    let xc = &x[c * d.len..(c + 1) * d.len];
                    for j in 0..d.kernel {
                        let w = weight[(o * d.c_in + c) * d.kernel + j];
                        for (yt, &xv) in y.iter_mut().zip(&xc[j..j + lo]) {
                            *yt += w * xv;
                        }
                    }
                }
            }
        }
        out
    }

    #[allow(clippy::too_many_arguments)]
    pub fn conv1d_backward<T: Scalar>(
        input: &[T],
        weight: &[T],
        dout: &[T],
        d: &ConvDims,
        mut dinput: Option<&mut [T]>,
        mut dweight: Option<&mut [T]>,
        mut dbias: Option<&mut [T]>,
    ) {
        let lo = d.l_out();
        for b in 0..d.batch {
            let x = &input[b * d.c_in * d.len..(b + 1) * d.c_in * d.len];
            for o in 0..d.c_out {
                let g = &dout[(b * d.c_out + o) * lo..(b * d.c_out + o + 1) * lo];
                if let Some(db) = dbias.as_deref_mut() {
                    let mut acc = T::zero();
                    for &v in g {
                        acc += v;
                    }
                    db[o] += acc;
                }
                for c in 0..d.c_in {
                    let xc = &x[c * d.len..(c + 1) * d.len];
                    for j in 0..d.kernel {
                        let widx = (o * d.c_in + c) * d.kernel + j;
                        if let Some(dw) = dweight.as_deref_mut() {
                            let mut acc = T::zero();
                            for (&gv, &xv) in g.iter().zip(&xc[j..j + lo]) {
                                acc += gv * xv;
                            }
                            dw[widx] += acc;
                        }
                        if let Some(dx) = dinput.as_deref_mut() {
                            let w = weight[widx];
                            let base = b * d.c_in * d.len + c * d.len + j;
                            for (dxv, &gv) in dx[base..base + lo].iter_mut().zip(g) {
                                *dxv += w * gv;
                            }
                        }
                    }
                }
            }
        }
    }

    /// Returns pooled values and, per output, the flat input index that won
    /// (first maximal element on ties).
    pub fn maxpool2<T: Scalar>(input: &[T], rows: usize, len: usize) -> (Vec<T>, Vec<usize>) {
        let half = len / 2;
        let mut out = Vec::with_capacity(rows * half);
        let mut idx = Vec::with_capacity(rows * half);
        for r in 0..rows {
            for t in 0..half {
                let i = r * len + 2 * t;
                if input[i + 1] > input[i] {
                    out.push(input[i + 1]);
                    idx.push(i + 1);
                } else {
                    out.push(input[i]);
                    idx.push(i);
                }
            }
        }
        (out, idx)
    }

    pub fn softmax_rows<T: Scalar>(x: &[T], width: usize) -> Vec<T> {
        let mut out = Vec::with_capacity(x.len());
        for row in x.chunks(width) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let start = out.len();
            let mut total = T::zero();
            for &v in row {
                let e = (v - max).exp();
                total += e;
                out.push(e);
            }
            for v in &mut out[start..] {
                *v /= total;
            }
        }
        out
    }

    /// `dx = y ⊙ (g − ⟨g, y⟩)` row-wise.
    pub fn softmax_backward<T: Scalar>(y: &[T], g: &[T], width: usize, dx: &mut [T]) {
        for ((yr, gr), dr) in y
            .chunks(width)
            .zip(g.chunks(width))
            .zip(dx.chunks_mut(width))
        {
            let mut dot = T::zero();
            for (&a, &b) in yr.iter().zip(gr) {
                dot += a * b;
            }
            for ((d, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                *d += yv * (gv - dot);
            }
        }
    }

    pub fn argmax<T: Scalar>(x: &[T]) -> usize {
        let mut best = 0;
        for (i, &v) in x.iter().enumerate() {
            if v > x[best] {
                best = i;
            }
        }
        best
    }
}
