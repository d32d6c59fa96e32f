//! Finite-difference checks of every differentiable tape operation on
//! random inputs. Each case builds its inputs from a seed and reduces the
//! op output to a scalar with a random projection.

use alloc::vec;
use alloc::vec::Vec;

use crate::autodiff::{Tape, UpsampleMode, Var};
use crate::error::Result;
use crate::gradcheck::{grad_check, GradCheckReport};
use crate::rng::{normal_tensor, seeded, uniform_tensor, StreamRng};
use crate::tensor::Tensor;

/// Finite-difference step used by the suite.
pub const STEP: f64 = 1e-5;

type Body = fn(&mut Tape<f64>, &[Var]) -> Result<Var>;

/// One operation under test.
#[derive(Debug)]
pub struct OpCase {
    pub name: &'static str,
    inputs: fn(&mut StreamRng) -> Vec<Tensor<f64>>,
    body: Body,
}

impl OpCase {
    /// Runs the check for one seed at tolerance `tol`.
    pub fn check(&self, seed: u64, tol: f64) -> Result<GradCheckReport> {
        let mut rng = seeded(seed);
        let inputs = (self.inputs)(&mut rng);
        let weights = normal_tensor::<f64>(&mut rng, &[4096]);
        let body = self.body;
        grad_check(
            |t, p| {
                let y = body(t, p)?;
                project(t, y, &weights)
            },
            &inputs,
            STEP,
            tol,
        )
    }
}

/// `sum(y * w)` with `w` cycled from a fixed random vector.
fn project(t: &mut Tape<f64>, y: Var, weights: &Tensor<f64>) -> Result<Var> {
    let shape = t.value(y).shape().to_vec();
    let w = weights.data();
    let w = Tensor::from_fn(&shape, |i| w[i % w.len()]);
    let w = t.constant(w);
    let p = t.mul(y, w)?;
    t.sum(p)
}

fn normal(rng: &mut StreamRng, shape: &[usize]) -> Tensor<f64> {
    normal_tensor(rng, shape)
}

/// Values at least `gap` away from every point in `kinks`.
fn away_from(rng: &mut StreamRng, shape: &[usize], kinks: &[f64], gap: f64) -> Tensor<f64> {
    normal(rng, shape).map(|mut v| {
        for &k in kinks {
            if (v - k).abs() < gap {
                v = if v >= k { k + gap } else { k - gap };
            }
        }
        v
    })
}

fn positive(rng: &mut StreamRng, shape: &[usize]) -> Tensor<f64> {
    uniform_tensor(rng, shape, 0.3, 2.0)
}

fn one(shape: &'static [usize]) -> impl Fn(&mut StreamRng) -> Vec<Tensor<f64>> {
    move |r| vec![normal(r, shape)]
}

/// The full list of cases, one per op and mode.
pub fn cases() -> Vec<OpCase> {
    vec![
        OpCase {
            name: "add (broadcast)",
            inputs: |r| vec![normal(r, &[3, 4]), normal(r, &[4])],
            body: |t, p| t.add(p[0], p[1]),
        },
        OpCase {
            name: "sub (broadcast)",
            inputs: |r| vec![normal(r, &[2, 3, 4]), normal(r, &[3, 1])],
            body: |t, p| t.sub(p[0], p[1]),
        },
        OpCase {
            name: "mul (broadcast)",
            inputs: |r| vec![normal(r, &[3, 4]), normal(r, &[3, 1])],
            body: |t, p| t.mul(p[0], p[1]),
        },
        OpCase {
            name: "div (broadcast)",
            inputs: |r| {
                let d = away_from(r, &[4], &[0.0], 0.5);
                vec![normal(r, &[3, 4]), d]
            },
            body: |t, p| t.div(p[0], p[1]),
        },
        OpCase {
            name: "neg",
            inputs: |r| one(&[5])(r),
            body: |t, p| t.neg(p[0]),
        },
        OpCase {
            name: "add_scalar",
            inputs: |r| one(&[5])(r),
            body: |t, p| t.add_scalar(p[0], 0.7),
        },
        OpCase {
            name: "mul_scalar",
            inputs: |r| one(&[5])(r),
            body: |t, p| t.mul_scalar(p[0], -1.3),
        },
        OpCase {
            name: "exp",
            inputs: |r| one(&[6])(r),
            body: |t, p| t.exp(p[0]),
        },
        OpCase {
            name: "log",
            inputs: |r| vec![positive(r, &[6])],
            body: |t, p| t.log(p[0]),
        },
        OpCase {
            name: "powf",
            inputs: |r| vec![positive(r, &[6])],
            body: |t, p| t.powf(p[0], 1.7),
        },
        OpCase {
            name: "abs",
            inputs: |r| vec![away_from(r, &[6], &[0.0], 0.05)],
            body: |t, p| t.abs(p[0]),
        },
        OpCase {
            name: "clamp",
            inputs: |r| vec![away_from(r, &[8], &[-0.5, 0.5], 0.05)],
            body: |t, p| t.clamp(p[0], -0.5, 0.5),
        },
        OpCase {
            name: "relu",
            inputs: |r| vec![away_from(r, &[8], &[0.0], 0.05)],
            body: |t, p| t.relu(p[0]),
        },
        OpCase {
            name: "sigmoid",
            inputs: |r| one(&[6])(r),
            body: |t, p| t.sigmoid(p[0]),
        },
        OpCase {
            name: "silu",
            inputs: |r| one(&[6])(r),
            body: |t, p| t.silu(p[0]),
        },
        OpCase {
            name: "softplus",
            inputs: |r| one(&[6])(r),
            body: |t, p| t.softplus(p[0]),
        },
        OpCase {
            name: "matmul",
            inputs: |r| vec![normal(r, &[3, 4]), normal(r, &[4, 2])],
            body: |t, p| t.matmul(p[0], p[1]),
        },
        OpCase {
            name: "transpose",
            inputs: |r| one(&[3, 4])(r),
            body: |t, p| t.transpose(p[0]),
        },
        OpCase {
            name: "conv2d stride 1 pad 1",
            inputs: |r| vec![normal(r, &[2, 2, 5, 5]), normal(r, &[3, 2, 3, 3])],
            body: |t, p| t.conv2d(p[0], p[1], 1, 1),
        },
        OpCase {
            name: "conv2d stride 2 pad 1",
            inputs: |r| vec![normal(r, &[1, 2, 6, 6]), normal(r, &[2, 2, 3, 3])],
            body: |t, p| t.conv2d(p[0], p[1], 2, 1),
        },
        OpCase {
            name: "conv2d stride 1 pad 0 (1x1)",
            inputs: |r| vec![normal(r, &[1, 3, 4, 4]), normal(r, &[2, 3, 1, 1])],
            body: |t, p| t.conv2d(p[0], p[1], 1, 0),
        },
        OpCase {
            name: "conv2d stride 2 pad 0",
            inputs: |r| vec![normal(r, &[1, 1, 7, 7]), normal(r, &[2, 1, 3, 3])],
            body: |t, p| t.conv2d(p[0], p[1], 2, 0),
        },
        OpCase {
            name: "upsample nearest",
            inputs: |r| one(&[1, 2, 3, 3])(r),
            body: |t, p| t.upsample(p[0], 2, UpsampleMode::Nearest),
        },
        OpCase {
            name: "upsample bilinear",
            inputs: |r| one(&[2, 3, 3])(r),
            body: |t, p| t.upsample(p[0], 2, UpsampleMode::Bilinear),
        },
        OpCase {
            name: "grid_sample",
            inputs: |r| one(&[2, 4, 5])(r),
            body: |t, p| {
                let coords = Tensor::new(
                    &[5, 2],
                    vec![-0.9, -0.2, 0.13, 0.77, 0.5, -0.61, 0.99, 0.98, -0.33, 0.41],
                )?;
                t.grid_sample(p[0], coords)
            },
        },
        OpCase {
            name: "group_norm",
            inputs: |r| vec![normal(r, &[2, 4, 3, 3]), normal(r, &[4]), normal(r, &[4])],
            body: |t, p| t.group_norm(p[0], p[1], p[2], 2),
        },
        OpCase {
            name: "sum",
            inputs: |r| one(&[3, 4])(r),
            body: |t, p| {
                let s = t.sum(p[0])?;
                t.mul(s, s)
            },
        },
        OpCase {
            name: "mean",
            inputs: |r| one(&[3, 4])(r),
            body: |t, p| {
                let s = t.mean(p[0])?;
                t.mul(s, s)
            },
        },
        OpCase {
            name: "sum_axis",
            inputs: |r| one(&[3, 4, 2])(r),
            body: |t, p| t.sum_axis(p[0], 1),
        },
        OpCase {
            name: "mean_axis",
            inputs: |r| one(&[3, 4])(r),
            body: |t, p| t.mean_axis(p[0], 0),
        },
        OpCase {
            name: "concat",
            inputs: |r| vec![normal(r, &[2, 3]), normal(r, &[2, 2])],
            body: |t, p| t.concat(&[p[0], p[1]], 1),
        },
        OpCase {
            name: "slice",
            inputs: |r| one(&[3, 5])(r),
            body: |t, p| t.slice(p[0], 1, 1, 4),
        },
        OpCase {
            name: "reshape",
            inputs: |r| one(&[3, 4])(r),
            body: |t, p| {
                let y = t.reshape(p[0], &[2, 6])?;
                t.mul(y, y)
            },
        },
        OpCase {
            name: "composite_weights",
            inputs: |r| vec![positive(r, &[3, 5])],
            body: |t, p| {
                let deltas = Tensor::from_fn(&[3, 5], |i| 0.1 + 0.05 * (i % 5) as f64);
                t.composite_weights(p[0], deltas)
            },
        },
        OpCase {
            name: "softmax_rows",
            inputs: |r| one(&[3, 4])(r),
            body: |t, p| t.softmax_rows(p[0]),
        },
    ]
}
