//! Forward evaluation of every tape operation.

use alloc::vec;
use alloc::vec::Vec;

use super::kernels::{self, ConvGeom, UpsampleMode};
use super::{shape_err, Op, Tape, Var};
use crate::error::Result;
use crate::tensor::{broadcast_shape, broadcast_strides, for_each_broadcast, Real, Tensor};

#[derive(Clone, Copy)]
pub(crate) enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
}

impl BinKind {
    fn name(self) -> &'static str {
        match self {
            BinKind::Add => "add",
            BinKind::Sub => "sub",
            BinKind::Mul => "mul",
            BinKind::Div => "div",
        }
    }

    fn apply<F: Real>(self, a: F, b: F) -> F {
        match self {
            BinKind::Add => a + b,
            BinKind::Sub => a - b,
            BinKind::Mul => a * b,
            BinKind::Div => a / b,
        }
    }
}

pub(crate) fn sigmoid<F: Real>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

pub(crate) fn softplus<F: Real>(x: F) -> F {
    x.max(F::zero()) + (-x.abs()).exp().ln_1p()
}

impl<F: Real> Tape<F> {
    fn binary(&mut self, kind: BinKind, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let value = if va.shape() == vb.shape() {
            let data = va
                .data()
                .iter()
                .zip(vb.data())
                .map(|(&x, &y)| kind.apply(x, y))
                .collect();
            Tensor::new(va.shape(), data)?
        } else {
            let out = broadcast_shape(va.shape(), vb.shape())
                .ok_or_else(|| shape_err(kind.name(), va.shape(), vb.shape()))?;
            let sa = broadcast_strides(va.shape(), &out);
            let sb = broadcast_strides(vb.shape(), &out);
            let (da, db) = (va.data(), vb.data());
            let mut data = vec![F::zero(); crate::tensor::numel(&out)];
            for_each_broadcast(&out, &sa, &sb, |o, ia, ib| {
                data[o] = kind.apply(da[ia], db[ib])
            });
            Tensor::new(&out, data)?
        };
        let op = match kind {
            BinKind::Add => Op::Add(a, b),
            BinKind::Sub => Op::Sub(a, b),
            BinKind::Mul => Op::Mul(a, b),
            BinKind::Div => Op::Div(a, b),
        };
        self.push_op(kind.name(), value, op, &[a, b])
    }

    fn unary(&mut self, name: &'static str, x: Var, f: impl Fn(F) -> F, op: Op<F>) -> Result<Var> {
        let value = self.value(x).map(f);
        self.push_op(name, value, op, &[x])
    }

    /// Elementwise sum with broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Div, a, b)
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.unary("neg", x, |v| -v, Op::Neg(x))
    }

    pub fn add_scalar(&mut self, x: Var, s: F) -> Result<Var> {
        self.unary("add_scalar", x, |v| v + s, Op::AddScalar(x))
    }

    pub fn mul_scalar(&mut self, x: Var, s: F) -> Result<Var> {
        self.unary("mul_scalar", x, |v| v * s, Op::MulScalar(x, s))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary("exp", x, |v| v.exp(), Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary("log", x, |v| v.ln(), Op::Log(x))
    }

    pub fn powf(&mut self, x: Var, p: F) -> Result<Var> {
        self.unary("powf", x, |v| v.powf(p), Op::Powf(x, p))
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary("abs", x, |v| v.abs(), Op::Abs(x))
    }

    /// Clamp to `[lo, hi]`; the gradient passes inside the range and is
    /// zero outside.
    pub fn clamp(&mut self, x: Var, lo: F, hi: F) -> Result<Var> {
        self.unary("clamp", x, |v| v.max(lo).min(hi), Op::Clamp(x, lo, hi))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary("relu", x, |v| v.max(F::zero()), Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary("sigmoid", x, sigmoid, Op::Sigmoid(x))
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        self.unary("silu", x, |v| v * sigmoid(v), Op::Silu(x))
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.unary("softplus", x, softplus, Op::Softplus(x))
    }

    /// `[m, k] @ [k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.ndim() != 2 || vb.ndim() != 2 || va.shape()[1] != vb.shape()[0] {
            return Err(shape_err("matmul", va.shape(), vb.shape()));
        }
        let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
        let mut out = vec![F::zero(); m * n];
        F::gemm(
            m,
            k,
            n,
            F::one(),
            va.data(),
            k as isize,
            1,
            vb.data(),
            n as isize,
            1,
            F::zero(),
            &mut out,
            n as isize,
            1,
        );
        let value = Tensor::new(&[m, n], out)?;
        self.push_op("matmul", value, Op::MatMul(a, b), &[a, b])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).transpose2d()?;
        self.push_op("transpose", value, Op::Transpose(x), &[x])
    }

    /// 2-D cross-correlation of `[b, cin, h, w]` with `[cout, cin, kh, kw]`.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (vx, vw) = (self.value(input), self.value(weight));
        if vx.ndim() != 4 || vw.ndim() != 4 || vx.shape()[1] != vw.shape()[1] {
            return Err(shape_err("conv2d", vw.shape(), vx.shape()));
        }
        let (b, cin, h, w) = (vx.shape()[0], vx.shape()[1], vx.shape()[2], vx.shape()[3]);
        let (cout, kh, kw) = (vw.shape()[0], vw.shape()[2], vw.shape()[3]);
        let g = ConvGeom::new(cin, h, w, kh, kw, stride, padding)
            .ok_or_else(|| shape_err("conv2d", vw.shape(), vx.shape()))?;
        let out = kernels::conv2d_forward(vx.data(), b, vw.data(), cout, &g);
        let value = Tensor::new(&[b, cout, g.hout, g.wout], out)?;
        self.push_op(
            "conv2d",
            value,
            Op::Conv2d {
                input,
                weight,
                stride,
                padding,
            },
            &[input, weight],
        )
    }

    /// Integer-factor upsampling over the last two axes.
    pub fn upsample(&mut self, input: Var, factor: usize, mode: UpsampleMode) -> Result<Var> {
        let v = self.value(input);
        if v.ndim() < 2 || factor == 0 {
            return Err(shape_err("upsample", &[0, 0], v.shape()));
        }
        let nd = v.ndim();
        let (h, w) = (v.shape()[nd - 2], v.shape()[nd - 1]);
        let planes = v.numel() / (h * w).max(1);
        let out = kernels::upsample_forward(v.data(), planes, h, w, factor, mode);
        let mut shape = v.shape().to_vec();
        shape[nd - 2] *= factor;
        shape[nd - 1] *= factor;
        let value = Tensor::new(&shape, out)?;
        self.push_op(
            "upsample",
            value,
            Op::Upsample {
                input,
                factor,
                mode,
            },
            &[input],
        )
    }

    /// Bilinear sampling of a `[c, h, w]` feature map at constant normalized
    /// coordinates `[p, 2]` in `[-1, 1]`; samples outside are zero.
    pub fn grid_sample(&mut self, input: Var, coords: Tensor<F>) -> Result<Var> {
        let v = self.value(input);
        if v.ndim() != 3 || coords.ndim() != 2 || coords.shape()[1] != 2 {
            return Err(shape_err("grid_sample", &[0, 2], coords.shape()));
        }
        let (c, h, w) = (v.shape()[0], v.shape()[1], v.shape()[2]);
        let out = kernels::grid_sample_forward(v.data(), c, h, w, coords.data());
        let value = Tensor::new(&[coords.shape()[0], c], out)?;
        self.push_op(
            "grid_sample",
            value,
            Op::GridSample { input, coords },
            &[input],
        )
    }

    /// Group normalization of `[b, c, ...]` with per-channel scale and shift.
    pub fn group_norm(&mut self, input: Var, gamma: Var, beta: Var, groups: usize) -> Result<Var> {
        let v = self.value(input);
        if v.ndim() < 2 || groups == 0 || v.shape()[1] % groups != 0 {
            return Err(shape_err("group_norm", &[0, groups], v.shape()));
        }
        let (b, c) = (v.shape()[0], v.shape()[1]);
        self.value(gamma).expect_shape("group_norm", &[c])?;
        self.value(beta).expect_shape("group_norm", &[c])?;
        let spatial = v.numel() / (b * c).max(1);
        let (out, mean, rstd) = kernels::group_norm_forward(
            v.data(),
            b,
            c,
            spatial,
            groups,
            self.value(gamma).data(),
            self.value(beta).data(),
            F::lit(1e-5),
        );
        let value = Tensor::new(v.shape(), out)?;
        self.push_op(
            "group_norm",
            value,
            Op::GroupNorm {
                input,
                gamma,
                beta,
                groups,
                mean,
                rstd,
            },
            &[input, gamma, beta],
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(x).sum());
        self.push_op("sum", value, Op::SumAll(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(x).mean());
        self.push_op("mean", value, Op::MeanAll(x), &[x])
    }

    fn reduce_axis(&mut self, x: Var, axis: usize, mean: bool) -> Result<Var> {
        let v = self.value(x);
        if axis >= v.ndim() {
            return Err(shape_err("sum_axis", &[axis], v.shape()));
        }
        let shape = v.shape();
        let outer: usize = shape[..axis].iter().product();
        let n = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out = vec![F::zero(); outer * inner];
        let d = v.data();
        for o in 0..outer {
            for k in 0..n {
                let src = &d[(o * n + k) * inner..(o * n + k + 1) * inner];
                for (acc, &s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *acc += s;
                }
            }
        }
        if mean {
            let inv = F::one() / F::from_usize(n.max(1)).unwrap();
            out.iter_mut().for_each(|v| *v *= inv);
        }
        let mut oshape = shape.to_vec();
        oshape.remove(axis);
        let value = Tensor::new(&oshape, out)?;
        let op = if mean {
            Op::MeanAxis(x, axis)
        } else {
            Op::SumAxis(x, axis)
        };
        self.push_op(if mean { "mean_axis" } else { "sum_axis" }, value, op, &[x])
    }

    /// Sum over one axis, removing it.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(x, axis, false)
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(x, axis, true)
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self.value(xs[0]).shape().to_vec();
        if axis >= first.len() {
            return Err(shape_err("concat", &[axis], &first));
        }
        let mut total = 0;
        for &x in xs {
            let s = self.value(x).shape();
            let mut a = s.to_vec();
            let mut b = first.clone();
            a[axis] = 0;
            b[axis] = 0;
            if a != b {
                return Err(shape_err("concat", &first, s));
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &x in xs {
                let v = self.value(x);
                let n = v.shape()[axis];
                out.extend_from_slice(&v.data()[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let value = Tensor::new(&shape, out)?;
        self.push_op("concat", value, Op::Concat(xs.to_vec(), axis), xs)
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let v = self.value(x);
        if axis >= v.ndim() || start >= end || end > v.shape()[axis] {
            return Err(shape_err("slice", &[start, end], v.shape()));
        }
        let shape = v.shape();
        let outer: usize = shape[..axis].iter().product();
        let n = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let len = end - start;
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&v.data()[(o * n + start) * inner..(o * n + end) * inner]);
        }
        let mut oshape = shape.to_vec();
        oshape[axis] = len;
        let value = Tensor::new(&oshape, out)?;
        self.push_op(
            "slice",
            value,
            Op::Slice {
                input: x,
                axis,
                start,
            },
            &[x],
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        self.push_op("reshape", value, Op::Reshape(x), &[x])
    }

    /// Volume-rendering weights along the last axis of `[rays, samples]`
    /// densities and constant segment lengths.
    pub fn composite_weights(&mut self, density: Var, deltas: Tensor<F>) -> Result<Var> {
        let v = self.value(density);
        if v.ndim() != 2 {
            return Err(shape_err("composite_weights", &[0, 0], v.shape()));
        }
        deltas.expect_shape("composite_weights", v.shape())?;
        let s = v.shape()[1];
        let w = kernels::composite_weights_forward(v.data(), deltas.data(), s);
        let value = Tensor::new(v.shape(), w)?;
        self.push_op(
            "composite_weights",
            value,
            Op::CompositeWeights { density, deltas },
            &[density],
        )
    }

    /// Row-wise softmax of a matrix (max-shifted, shift treated as constant).
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        if v.ndim() != 2 {
            return Err(shape_err("softmax_rows", &[0, 0], v.shape()));
        }
        let (r, c) = (v.shape()[0], v.shape()[1]);
        let maxes: Vec<F> = (0..r)
            .map(|i| {
                v.data()[i * c..(i + 1) * c]
                    .iter()
                    .fold(F::neg_infinity(), |m, &e| m.max(e))
            })
            .collect();
        let shift = self.constant(Tensor::new(&[r, 1], maxes)?);
        let z = self.sub(x, shift)?;
        let e = self.exp(z)?;
        let s = self.sum_axis(e, 1)?;
        let s = self.reshape(s, &[r, 1])?;
        self.div(e, s)
    }
}
