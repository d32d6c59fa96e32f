//! Vector-Jacobian products for every recorded operation.

use alloc::vec;
use alloc::vec::Vec;

use super::kernels::{self, ConvGeom};
use super::ops::sigmoid;
use super::{accumulate, Node, Op, Tape, Var};
use crate::error::Result;
use crate::tensor::{broadcast_strides, for_each_broadcast, numel, reduce_to_shape, Real, Tensor};

fn elementwise<F: Real>(g: &Tensor<F>, x: &Tensor<F>, f: impl Fn(F, F) -> F) -> Tensor<F> {
    let data = g
        .data()
        .iter()
        .zip(x.data())
        .map(|(&g, &x)| f(g, x))
        .collect();
    Tensor::new(g.shape(), data).expect("same shape")
}

pub(crate) fn vjp<F: Real>(
    tape: &Tape<F>,
    node: &Node<F>,
    g: &Tensor<F>,
    grads: &mut [Option<Tensor<F>>],
) -> Result<()> {
    let needs = |v: Var| tape.node(v).requires_grad;
    let val = |v: Var| &tape.node(v).value;
    match &node.op {
        Op::Leaf | Op::Detached => {}
        Op::Add(a, b) | Op::Sub(a, b) => {
            let neg_b = matches!(node.op, Op::Sub(..));
            if needs(*a) {
                accumulate(grads, *a, reduce_to_shape(g, val(*a).shape()));
            }
            if needs(*b) {
                let mut gb = reduce_to_shape(g, val(*b).shape());
                if neg_b {
                    gb = gb.map(|v| -v);
                }
                accumulate(grads, *b, gb);
            }
        }
        Op::Mul(a, b) | Op::Div(a, b) => {
            let div = matches!(node.op, Op::Div(..));
            let (va, vb) = (val(*a), val(*b));
            let out = g.shape().to_vec();
            let sa = broadcast_strides(va.shape(), &out);
            let sb = broadcast_strides(vb.shape(), &out);
            let (da, db, dg) = (va.data(), vb.data(), g.data());
            let mut ga = if needs(*a) {
                vec![F::zero(); va.numel()]
            } else {
                Vec::new()
            };
            let mut gb = if needs(*b) {
                vec![F::zero(); vb.numel()]
            } else {
                Vec::new()
            };
            let (wa, wb) = (!ga.is_empty(), !gb.is_empty());
            for_each_broadcast(&out, &sa, &sb, |o, ia, ib| {
                let (x, y, go) = (da[ia], db[ib], dg[o]);
                if div {
                    if wa {
                        ga[ia] += go / y;
                    }
                    if wb {
                        gb[ib] -= go * x / (y * y);
                    }
                } else {
                    if wa {
                        ga[ia] += go * y;
                    }
                    if wb {
                        gb[ib] += go * x;
                    }
                }
            });
            if wa {
                accumulate(grads, *a, Tensor::new(va.shape(), ga)?);
            }
            if wb {
                accumulate(grads, *b, Tensor::new(vb.shape(), gb)?);
            }
        }
        Op::Neg(x) => accumulate(grads, *x, g.map(|v| -v)),
        Op::AddScalar(x) => accumulate(grads, *x, g.clone()),
        Op::MulScalar(x, s) => {
            let s = *s;
            accumulate(grads, *x, g.map(|v| v * s));
        }
        Op::Exp(x) => accumulate(grads, *x, elementwise(g, &node.value, |g, y| g * y)),
        Op::Log(x) => accumulate(grads, *x, elementwise(g, val(*x), |g, x| g / x)),
        Op::Powf(x, p) => {
            let p = *p;
            accumulate(
                grads,
                *x,
                elementwise(g, val(*x), |g, x| g * p * x.powf(p - F::one())),
            );
        }
        Op::Abs(x) => accumulate(
            grads,
            *x,
            elementwise(g, val(*x), |g, x| {
                if x > F::zero() {
                    g
                } else if x < F::zero() {
                    -g
                } else {
                    F::zero()
                }
            }),
        ),
        Op::Clamp(x, lo, hi) => {
            let (lo, hi) = (*lo, *hi);
            accumulate(
                grads,
                *x,
                elementwise(
                    g,
                    val(*x),
                    |g, x| if x >= lo && x <= hi { g } else { F::zero() },
                ),
            );
        }
        Op::Relu(x) => accumulate(
            grads,
            *x,
            elementwise(g, val(*x), |g, x| if x > F::zero() { g } else { F::zero() }),
        ),
        Op::Sigmoid(x) => accumulate(
            grads,
            *x,
            elementwise(g, &node.value, |g, s| g * s * (F::one() - s)),
        ),
        Op::Silu(x) => accumulate(
            grads,
            *x,
            elementwise(g, val(*x), |g, x| {
                let s = sigmoid(x);
                g * (s + x * s * (F::one() - s))
            }),
        ),
        Op::Softplus(x) => accumulate(grads, *x, elementwise(g, val(*x), |g, x| g * sigmoid(x))),
        Op::MatMul(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
            if needs(*a) {
                // g [m, n] @ b^T [n, k]
                let mut ga = vec![F::zero(); m * k];
                F::gemm(
                    m,
                    n,
                    k,
                    F::one(),
                    g.data(),
                    n as isize,
                    1,
                    vb.data(),
                    1,
                    n as isize,
                    F::zero(),
                    &mut ga,
                    k as isize,
                    1,
                );
                accumulate(grads, *a, Tensor::new(&[m, k], ga)?);
            }
            if needs(*b) {
                // a^T [k, m] @ g [m, n]
                let mut gb = vec![F::zero(); k * n];
                F::gemm(
                    k,
                    m,
                    n,
                    F::one(),
                    va.data(),
                    1,
                    k as isize,
                    g.data(),
                    n as isize,
                    1,
                    F::zero(),
                    &mut gb,
                    n as isize,
                    1,
                );
                accumulate(grads, *b, Tensor::new(&[k, n], gb)?);
            }
        }
        Op::Transpose(x) => accumulate(grads, *x, g.transpose2d()?),
        Op::Conv2d {
            input,
            weight,
            stride,
            padding,
        } => {
            let (vx, vw) = (val(*input), val(*weight));
            let (b, cin, h, w) = (vx.shape()[0], vx.shape()[1], vx.shape()[2], vx.shape()[3]);
            let (cout, kh, kw) = (vw.shape()[0], vw.shape()[2], vw.shape()[3]);
            let geom =
                ConvGeom::new(cin, h, w, kh, kw, *stride, *padding).expect("validated in forward");
            let (gx, gw) = kernels::conv2d_backward(
                vx.data(),
                b,
                vw.data(),
                cout,
                &geom,
                g.data(),
                needs(*input),
                needs(*weight),
            );
            if needs(*input) {
                accumulate(grads, *input, Tensor::new(vx.shape(), gx)?);
            }
            if needs(*weight) {
                accumulate(grads, *weight, Tensor::new(vw.shape(), gw)?);
            }
        }
        Op::Upsample {
            input,
            factor,
            mode,
        } => {
            let v = val(*input);
            let nd = v.ndim();
            let (h, w) = (v.shape()[nd - 2], v.shape()[nd - 1]);
            let planes = v.numel() / (h * w).max(1);
            let gx = kernels::upsample_backward(g.data(), planes, h, w, *factor, *mode);
            accumulate(grads, *input, Tensor::new(v.shape(), gx)?);
        }
        Op::GridSample { input, coords } => {
            let v = val(*input);
            let (c, h, w) = (v.shape()[0], v.shape()[1], v.shape()[2]);
            let gx = kernels::grid_sample_backward(g.data(), c, h, w, coords.data());
            accumulate(grads, *input, Tensor::new(v.shape(), gx)?);
        }
        Op::GroupNorm {
            input,
            gamma,
            beta,
            groups,
            mean,
            rstd,
        } => {
            let v = val(*input);
            let (b, c) = (v.shape()[0], v.shape()[1]);
            let spatial = v.numel() / (b * c).max(1);
            let (gx, ggamma, gbeta) = kernels::group_norm_backward(
                v.data(),
                b,
                c,
                spatial,
                *groups,
                val(*gamma).data(),
                mean,
                rstd,
                g.data(),
            );
            if needs(*input) {
                accumulate(grads, *input, Tensor::new(v.shape(), gx)?);
            }
            if needs(*gamma) {
                accumulate(grads, *gamma, Tensor::new(&[c], ggamma)?);
            }
            if needs(*beta) {
                accumulate(grads, *beta, Tensor::new(&[c], gbeta)?);
            }
        }
        Op::SumAll(x) => accumulate(grads, *x, Tensor::full(val(*x).shape(), g.item())),
        Op::MeanAll(x) => {
            let v = val(*x);
            let s = g.item() / F::from_usize(v.numel().max(1)).unwrap();
            accumulate(grads, *x, Tensor::full(v.shape(), s));
        }
        Op::SumAxis(x, axis) | Op::MeanAxis(x, axis) => {
            let v = val(*x);
            let shape = v.shape();
            let outer: usize = shape[..*axis].iter().product();
            let n = shape[*axis];
            let inner: usize = shape[*axis + 1..].iter().product();
            let scale = if matches!(node.op, Op::MeanAxis(..)) {
                F::one() / F::from_usize(n.max(1)).unwrap()
            } else {
                F::one()
            };
            let mut gx = vec![F::zero(); numel(shape)];
            for o in 0..outer {
                let src = &g.data()[o * inner..(o + 1) * inner];
                for k in 0..n {
                    let dst = &mut gx[(o * n + k) * inner..(o * n + k + 1) * inner];
                    for (d, &s) in dst.iter_mut().zip(src) {
                        *d = s * scale;
                    }
                }
            }
            accumulate(grads, *x, Tensor::new(shape, gx)?);
        }
        Op::Concat(xs, axis) => {
            let shape = g.shape();
            let outer: usize = shape[..*axis].iter().product();
            let inner: usize = shape[*axis + 1..].iter().product();
            let total = shape[*axis];
            let mut offset = 0;
            for &x in xs {
                let v = val(x);
                let n = v.shape()[*axis];
                if needs(x) {
                    let mut gx = Vec::with_capacity(v.numel());
                    for o in 0..outer {
                        gx.extend_from_slice(
                            &g.data()
                                [(o * total + offset) * inner..(o * total + offset + n) * inner],
                        );
                    }
                    accumulate(grads, x, Tensor::new(v.shape(), gx)?);
                }
                offset += n;
            }
        }
        Op::Slice { input, axis, start } => {
            let v = val(*input);
            let shape = v.shape();
            let outer: usize = shape[..*axis].iter().product();
            let n = shape[*axis];
            let inner: usize = shape[*axis + 1..].iter().product();
            let len = g.shape()[*axis];
            let mut gx = vec![F::zero(); v.numel()];
            for o in 0..outer {
                gx[(o * n + start) * inner..(o * n + start + len) * inner]
                    .copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
            }
            accumulate(grads, *input, Tensor::new(shape, gx)?);
        }
        Op::Reshape(x) => accumulate(grads, *x, g.clone().reshape(val(*x).shape())?),
        Op::CompositeWeights { density, deltas } => {
            let v = val(*density);
            let s = v.shape()[1];
            let gd = kernels::composite_weights_backward(
                v.data(),
                deltas.data(),
                node.value.data(),
                s,
                g.data(),
            );
            accumulate(grads, *density, Tensor::new(v.shape(), gd)?);
        }
    }
    Ok(())
}
