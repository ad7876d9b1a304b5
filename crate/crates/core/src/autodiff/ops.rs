use std::sync::Arc;

use super::kernels::{self, ConvGeom};
use super::tape::{gelu, NodeId, Op, Tape, Var};
use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::{Scalar, Tensor};

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Arc<Tensor<T>> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad(self.id)
    }

    fn unary(self, op: Op<T>, f: impl Fn(T) -> T) -> Var<'t, T> {
        let v = self.value();
        self.tape.push(v.map(f), op)
    }

    fn binary(
        self,
        rhs: Var<'t, T>,
        name: &'static str,
        op: fn(NodeId, NodeId) -> Op<T>,
        f: impl Fn(T, T) -> T,
    ) -> Result<Var<'t, T>> {
        let (ls, rs) = (self.shape(), rhs.shape());
        let (lhs, rhs) = if ls == rs {
            (self, rhs)
        } else {
            let out = kernels::broadcast_shape(&ls, &rs).ok_or_else(|| Error::shape(name, &ls, &rs))?;
            (self.broadcast_to(&out)?, rhs.broadcast_to(&out)?)
        };
        let (a, b) = (lhs.value(), rhs.value());
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(a.shape().to_vec(), data)?;
        Ok(self.tape.push(value, op(lhs.id, rhs.id)))
    }

    /// Elementwise sum with broadcasting.
    pub fn add(self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(rhs, "add", Op::Add, |a, b| a + b)
    }

    pub fn sub(self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(rhs, "sub", Op::Sub, |a, b| a - b)
    }

    pub fn mul(self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(rhs, "mul", Op::Mul, |a, b| a * b)
    }

    pub fn div(self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(rhs, "div", Op::Div, |a, b| a / b)
    }

    pub fn scale(self, c: f64) -> Var<'t, T> {
        let c = T::of(c);
        self.unary(Op::Scale(self.id, c), |v| v * c)
    }

    pub fn neg(self) -> Var<'t, T> {
        self.scale(-1.0)
    }

    pub fn add_scalar(self, c: f64) -> Var<'t, T> {
        let c = T::of(c);
        self.unary(Op::Offset(self.id), |v| v + c)
    }

    pub fn square(self) -> Var<'t, T> {
        self.mul(self).expect("same shape")
    }

    pub fn broadcast_to(self, shape: &[usize]) -> Result<Var<'t, T>> {
        let v = self.value();
        if v.shape() == shape {
            return Ok(self);
        }
        match kernels::broadcast_shape(v.shape(), shape) {
            Some(out) if out == shape => {}
            _ => return Err(Error::shape("broadcast_to", v.shape(), shape)),
        }
        let data = kernels::broadcast_to(v.data(), v.shape(), shape);
        Ok(self.tape.push(Tensor::new(shape.to_vec(), data)?, Op::BroadcastTo(self.id)))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t, T>> {
        let v = self.value();
        let numel: usize = shape.iter().product();
        if numel != v.numel() {
            return Err(Error::shape("reshape", v.shape(), shape));
        }
        Ok(self.tape.push(v.reshaped(shape.to_vec())?, Op::Reshape(self.id)))
    }

    pub fn permute(self, axes: &[usize]) -> Result<Var<'t, T>> {
        let v = self.value();
        let mut seen = vec![false; v.ndim()];
        if axes.len() != v.ndim() || axes.iter().any(|&a| a >= v.ndim() || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::dim("permute", format!("axes {axes:?} invalid for shape {:?}", v.shape())));
        }
        let (data, shape) = kernels::permute(v.data(), v.shape(), axes);
        Ok(self.tape.push(Tensor::new(shape, data)?, Op::Permute(self.id, axes.to_vec())))
    }

    /// Transpose of a 2-D tensor.
    pub fn t(self) -> Result<Var<'t, T>> {
        if self.value().ndim() != 2 {
            return Err(Error::dim("transpose", format!("expected 2-D, got {:?}", self.shape())));
        }
        self.permute(&[1, 0])
    }

    fn matmul_impl(self, rhs: Var<'t, T>, trans_b: bool, name: &'static str) -> Result<Var<'t, T>> {
        let (a, b) = (self.value(), rhs.value());
        let (sa, sb) = (a.shape(), b.shape());
        let ok_rank = (sa.len() == 2 && sb.len() == 2) || (sa.len() == 3 && sb.len() == 3 && sa[0] == sb[0]);
        if !ok_rank {
            return Err(Error::shape(name, sa, sb));
        }
        let r = sa.len();
        let batch = if r == 3 { sa[0] } else { 1 };
        let (m, k) = (sa[r - 2], sa[r - 1]);
        let (kb, n) = if trans_b { (sb[r - 1], sb[r - 2]) } else { (sb[r - 2], sb[r - 1]) };
        if k != kb {
            return Err(Error::shape(name, sa, sb));
        }
        let mut data = vec![T::zero(); batch * m * n];
        for s in 0..batch {
            kernels::gemm(
                m,
                k,
                n,
                &a.data()[s * m * k..(s + 1) * m * k],
                false,
                &b.data()[s * k * n..(s + 1) * k * n],
                trans_b,
                &mut data[s * m * n..(s + 1) * m * n],
                false,
            );
        }
        let shape = if r == 3 { vec![batch, m, n] } else { vec![m, n] };
        let op = Op::MatMul {
            a: self.id,
            b: rhs.id,
            batch,
            m,
            k,
            n,
            trans_b,
        };
        Ok(self.tape.push(Tensor::new(shape, data)?, op))
    }

    /// `[m×k]·[k×n]`, or batched `[b×m×k]·[b×k×n]`.
    pub fn matmul(self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        self.matmul_impl(rhs, false, "matmul")
    }

    /// `self · rhsᵀ` with `rhs` shaped `[n×k]` (or batched `[b×n×k]`).
    pub fn matmul_t(self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        self.matmul_impl(rhs, true, "matmul_t")
    }

    /// Sum over all elements, shape `[1]`.
    pub fn sum(self) -> Var<'t, T> {
        let v = self.value();
        self.tape.push(Tensor::scalar(v.sum()), Op::SumAll(self.id))
    }

    pub fn mean(self) -> Var<'t, T> {
        let n = self.value().numel() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Sum over `axis`, removing it (a 1-D input becomes shape `[1]`).
    pub fn sum_axis(self, axis: usize) -> Result<Var<'t, T>> {
        let v = self.value();
        if axis >= v.ndim() {
            return Err(Error::dim("sum_axis", format!("axis {axis} for shape {:?}", v.shape())));
        }
        let (outer, len, inner) = split_axis(v.shape(), axis);
        let src = v.data();
        let mut data = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let base = (o * len + l) * inner;
                for i in 0..inner {
                    data[o * inner + i] += src[base + i];
                }
            }
        }
        let mut shape: Vec<usize> = v.shape().to_vec();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        let op = Op::SumAxis {
            x: self.id,
            outer,
            len,
            inner,
        };
        Ok(self.tape.push(Tensor::new(shape, data)?, op))
    }

    pub fn mean_axis(self, axis: usize) -> Result<Var<'t, T>> {
        let len = *self.shape().get(axis).unwrap_or(&1) as f64;
        Ok(self.sum_axis(axis)?.scale(1.0 / len))
    }

    /// Numerically stable softmax along `axis` (max-subtracted).
    pub fn softmax(self, axis: usize) -> Result<Var<'t, T>> {
        let v = self.value();
        if axis >= v.ndim() {
            return Err(Error::dim("softmax", format!("axis {axis} for shape {:?}", v.shape())));
        }
        let (outer, len, inner) = split_axis(v.shape(), axis);
        let x = v.data();
        let mut y = vec![T::zero(); x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| (o * len + l) * inner + i;
                let max = (0..len).map(|l| x[at(l)]).fold(T::neg_infinity(), T::max);
                let mut total = T::zero();
                for l in 0..len {
                    let e = (x[at(l)] - max).exp();
                    y[at(l)] = e;
                    total += e;
                }
                for l in 0..len {
                    y[at(l)] /= total;
                }
            }
        }
        let op = Op::Softmax {
            x: self.id,
            outer,
            len,
            inner,
        };
        Ok(self.tape.push(Tensor::new(v.shape().to_vec(), y)?, op))
    }

    /// Exact (erf) GELU.
    pub fn gelu(self) -> Var<'t, T> {
        self.unary(Op::Gelu(self.id), gelu)
    }

    pub fn relu(self) -> Var<'t, T> {
        self.unary(Op::Relu(self.id), |v| v.max(T::zero()))
    }

    pub fn clamp_min(self, floor: f64) -> Var<'t, T> {
        let f = T::of(floor);
        self.unary(Op::ClampMin(self.id, f), move |v| v.max(f))
    }

    /// Normalizes the last axis to zero mean and unit variance (no affine part).
    pub fn layer_norm(self, eps: f64) -> Var<'t, T> {
        let v = self.value();
        let width = *v.shape().last().unwrap();
        let rows = v.numel() / width;
        let inv = T::one() / T::of(width as f64);
        let eps = T::of(eps);
        let mut out = vec![T::zero(); v.numel()];
        let mut rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            let x = &v.data()[r * width..(r + 1) * width];
            let mean = x.iter().copied().sum::<T>() * inv;
            let var = x.iter().map(|&a| (a - mean) * (a - mean)).sum::<T>() * inv;
            let s = T::one() / (var + eps).sqrt();
            for (o, &a) in out[r * width..(r + 1) * width].iter_mut().zip(x) {
                *o = (a - mean) * s;
            }
            rstd.push(s);
        }
        let value = Tensor::new(v.shape().to_vec(), out).expect("same shape");
        self.tape.push(value, Op::LayerNorm { x: self.id, rstd })
    }

    /// Euclidean norm of each last-axis slice; the last axis is kept with size 1.
    pub fn l2_norm(self) -> Var<'t, T> {
        let v = self.value();
        let width = *v.shape().last().unwrap();
        let rows = v.numel() / width;
        let data = (0..rows)
            .map(|r| {
                v.data()[r * width..(r + 1) * width]
                    .iter()
                    .map(|&a| a * a)
                    .sum::<T>()
                    .sqrt()
            })
            .collect();
        let mut shape = v.shape().to_vec();
        *shape.last_mut().unwrap() = 1;
        self.tape.push(Tensor::new(shape, data).expect("row count"), Op::L2Norm(self.id))
    }

    /// Selects rows (first axis) by index; indices may repeat.
    pub fn gather_rows(self, idx: &[usize]) -> Result<Var<'t, T>> {
        let v = self.value();
        let rows = v.shape()[0];
        if idx.is_empty() {
            return Err(Error::Empty("gather_rows index list".into()));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::dim("gather_rows", format!("row {bad} out of {rows}")));
        }
        let width = v.numel() / rows;
        let mut data = Vec::with_capacity(idx.len() * width);
        for &i in idx {
            data.extend_from_slice(&v.data()[i * width..(i + 1) * width]);
        }
        let mut shape = v.shape().to_vec();
        shape[0] = idx.len();
        let op = Op::GatherRows {
            x: self.id,
            idx: idx.to_vec(),
        };
        Ok(self.tape.push(Tensor::new(shape, data)?, op))
    }

    /// Selects flat (row-major) elements, producing a 1-D tensor.
    pub fn gather(self, idx: &[usize]) -> Result<Var<'t, T>> {
        let v = self.value();
        if idx.is_empty() {
            return Err(Error::Empty("gather index list".into()));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= v.numel()) {
            return Err(Error::dim("gather", format!("element {bad} out of {}", v.numel())));
        }
        let data = idx.iter().map(|&i| v.data()[i]).collect();
        let op = Op::Gather {
            x: self.id,
            idx: idx.to_vec(),
        };
        Ok(self.tape.push(Tensor::new([idx.len()], data)?, op))
    }

    /// Stride-1 convolution with same padding.
    ///
    /// `self`: `[B, C_in, H, W]`, `weight`: `[C_out, C_in, kh, kw]` (odd kernel), `bias`: `[C_out]`.
    pub fn conv2d(self, weight: Var<'t, T>, bias: Var<'t, T>) -> Result<Var<'t, T>> {
        let (x, w, b) = (self.value(), weight.value(), bias.value());
        let (xs, ws) = (x.shape(), w.shape());
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] {
            return Err(Error::shape("conv2d", xs, ws));
        }
        if ws[2] % 2 == 0 || ws[3] % 2 == 0 {
            return Err(Error::dim("conv2d", format!("kernel {:?} must be odd", &ws[2..])));
        }
        if b.shape() != [ws[0]] {
            return Err(Error::shape("conv2d bias", b.shape(), &ws[..1]));
        }
        let geom = ConvGeom {
            channels: xs[1],
            height: xs[2],
            width: xs[3],
            kh: ws[2],
            kw: ws[3],
        };
        let (batch, out_channels) = (xs[0], ws[0]);
        let (rows, px) = (geom.col_rows(), geom.pixels());
        let in_len = geom.channels * px;
        let mut cols = vec![T::zero(); rows * px];
        let mut data = vec![T::zero(); batch * out_channels * px];
        for s in 0..batch {
            kernels::im2col(&x.data()[s * in_len..(s + 1) * in_len], geom, &mut cols);
            let out = &mut data[s * out_channels * px..(s + 1) * out_channels * px];
            for (c, &bv) in b.data().iter().enumerate() {
                out[c * px..(c + 1) * px].iter_mut().for_each(|v| *v = bv);
            }
            kernels::gemm(out_channels, rows, px, w.data(), false, &cols, false, out, true);
        }
        let op = Op::Conv2d {
            x: self.id,
            w: weight.id,
            b: bias.id,
            geom,
            batch,
            out_channels,
        };
        Ok(self
            .tape
            .push(Tensor::new(vec![batch, out_channels, geom.height, geom.width], data)?, op))
    }
}

impl<T: Scalar> Tape<T> {
    /// Sums row blocks into a `[rows, ...]` output: part `p` adds its row `j`
    /// onto output row `idx_p[j]`. Rows no part touches stay zero.
    pub fn scatter_rows<'t>(&'t self, parts: &[(Var<'t, T>, Vec<usize>)], rows: usize) -> Result<Var<'t, T>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Empty("scatter_rows needs at least one part".into()))?;
        let row_shape = first.0.shape()[1..].to_vec();
        let width: usize = row_shape.iter().product();
        let mut data = vec![T::zero(); rows * width];
        for (var, idx) in parts {
            let v = var.value();
            if v.shape()[1..] != row_shape[..] || v.shape()[0] != idx.len() {
                return Err(Error::shape("scatter_rows", v.shape(), &row_shape));
            }
            for (j, &dst) in idx.iter().enumerate() {
                if dst >= rows {
                    return Err(Error::dim("scatter_rows", format!("row {dst} out of {rows}")));
                }
                for (o, &s) in data[dst * width..(dst + 1) * width]
                    .iter_mut()
                    .zip(&v.data()[j * width..(j + 1) * width])
                {
                    *o += s;
                }
            }
        }
        let mut shape = vec![rows];
        shape.extend(row_shape);
        let op = Op::ScatterRows {
            parts: parts.iter().map(|(v, idx)| (v.id, idx.clone())).collect(),
        };
        Ok(self.push(Tensor::new(shape, data)?, op))
    }
}

/// Inverted dropout: survivors are scaled by `1/(1-rate)`, so eval mode is the identity.
pub fn dropout<'t, T: Scalar>(x: Var<'t, T>, rate: f64, rng: &mut RngStream, training: bool) -> Result<Var<'t, T>> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::config(format!("dropout rate must be in [0, 1), got {rate}")));
    }
    if !training || rate == 0.0 {
        return Ok(x);
    }
    let keep = T::of(1.0 / (1.0 - rate));
    let shape = x.shape();
    let mask = Tensor::from_fn(shape, |_| if rng.bernoulli(rate) { T::zero() } else { keep });
    x.mul(x.tape().constant(mask))
}
