//! Reverse-process samplers: generation, reconstruction, inpainting and
//! novel-view rendering of the resulting triplane.
//!
//! Random streams per run seed: 0 for the initial noise and the ancestral
//! noise, 1 for the renderer, 2 for the noise added to known pixels while
//! inpainting.

use alloc::vec::Vec;
use core::cell::RefCell;

use rand::Rng;

use crate::camera::{look_at_pose, Camera, DEFAULT_RADIUS};
use crate::denoiser::{Denoise, Denoised, Denoiser};
use crate::error::{Error, Result};
use crate::render::RenderOutput;
use crate::rng::{self, normal_tensor};
use crate::schedule::NoiseSchedule;
use crate::tensor::{Real, Tensor};
use crate::triplane::Triplane;

/// Canonical reverse-process pose: azimuth 0, elevation 30 degrees.
pub fn canonical_camera(resolution: usize) -> Camera {
    let pose = look_at_pose(0.0, 30f64.to_radians(), DEFAULT_RADIUS, [0.0; 3]).expect("valid pose");
    Camera::new(resolution, pose)
}

/// Outcome of one sampler run.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleRun<F> {
    pub seed: u64,
    pub camera: Camera,
    /// Timestep of every denoiser call, in call order.
    pub calls: Vec<usize>,
    /// `x_t` before each step, when requested.
    pub trace: Vec<Tensor<F>>,
    /// Triplane of the last denoiser call.
    pub triplane: Option<Triplane<F>>,
    /// Final image in `[-1, 1]`.
    pub image: Tensor<F>,
}

/// Binary spatial mask, row-major, `true` where pixels are unknown.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub resolution: usize,
    pub unknown: Vec<bool>,
}

impl Mask {
    pub fn all_known(resolution: usize) -> Self {
        Self {
            resolution,
            unknown: alloc::vec![false; resolution * resolution],
        }
    }

    pub fn all_unknown(resolution: usize) -> Self {
        Self {
            resolution,
            unknown: alloc::vec![true; resolution * resolution],
        }
    }

    /// Square of unknown pixels with top-left `(row, col)`.
    pub fn square(resolution: usize, row: usize, col: usize, side: usize) -> Self {
        let mut m = Self::all_known(resolution);
        for r in row..(row + side).min(resolution) {
            for c in col..(col + side).min(resolution) {
                m.unknown[r * resolution + c] = true;
            }
        }
        m
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InpaintTask<F> {
    /// `[3, M, M]` in `[-1, 1]`.
    pub target: Tensor<F>,
    pub mask: Mask,
    pub camera: Camera,
}

/// Side of the evaluation mask: 40% of the image.
pub fn eval_mask_side(m: usize) -> usize {
    libm::round(0.4 * m as f64) as usize
}

/// Square mask of side `round(0.4 M)` whose center lies in the centered
/// square of side `5 M / 16`.
pub fn mask_for_eval(rng: &mut impl Rng, m: usize) -> Result<Mask> {
    if m < 16 {
        return Err(Error::InvalidConfig("evaluation masks need M >= 16".into()));
    }
    let side = eval_mask_side(m);
    let region = 5.0 * m as f64 / 16.0;
    let lo = libm::ceil(m as f64 / 2.0 - region / 2.0 - side as f64 / 2.0) as usize;
    let hi = libm::floor(m as f64 / 2.0 + region / 2.0 - side as f64 / 2.0) as usize;
    let row = rng.random_range(lo..=hi);
    let col = rng.random_range(lo..=hi);
    Ok(Mask::square(m, row, col, side))
}

fn render_seed(seed: u64, t: usize) -> u64 {
    rng::mix(rng::mix(seed, 1), t as u64)
}

fn clamp_unit<F: Real>(x: &Tensor<F>) -> Tensor<F> {
    let one = F::one();
    x.map(|v| v.max(-one).min(one))
}

fn check_image<F: Real>(model: &dyn Denoise<F>, x: &Tensor<F>) -> Result<()> {
    let m = model.resolution();
    x.expect_shape("sampler", &[3, m, m])
}

/// Runs the reverse chain from `x` at step `start` down to 0. `after_step`
/// may overwrite `x_{t-1}` once per step.
fn reverse_chain<F: Real>(
    model: &dyn Denoise<F>,
    sched: &NoiseSchedule,
    mut x: Tensor<F>,
    start: usize,
    cam: &Camera,
    seed: u64,
    noise_rng: &mut impl Rng,
    keep_trace: bool,
    mut after_step: impl FnMut(&mut Tensor<F>, usize) -> Result<()>,
) -> Result<SampleRun<F>> {
    let mut run = SampleRun {
        seed,
        camera: *cam,
        calls: Vec::with_capacity(start),
        trace: Vec::new(),
        triplane: None,
        image: x.clone(),
    };
    let shape = x.shape().to_vec();
    for t in (1..=start).rev() {
        if keep_trace {
            run.trace.push(x.clone());
        }
        let Denoised { image, triplane } = model.denoise(&x, t, cam, render_seed(seed, t))?;
        run.calls.push(t);
        run.triplane = triplane;
        let x0 = clamp_unit(&image);
        let noise = if t > 1 {
            normal_tensor(noise_rng, &shape)
        } else {
            Tensor::zeros(&shape)
        };
        x = sched.ancestral_step(&x, &x0, t, &noise)?;
        after_step(&mut x, t - 1)?;
    }
    run.image = x;
    Ok(run)
}

/// Ancestral sampling from pure noise, viewed from `cam` throughout.
pub fn generate<F: Real>(
    model: &dyn Denoise<F>,
    sched: &NoiseSchedule,
    cam: &Camera,
    seed: u64,
    keep_trace: bool,
) -> Result<SampleRun<F>> {
    let m = model.resolution();
    let mut r = rng::stream(seed, 0);
    let x = normal_tensor(&mut r, &[3, m, m]);
    reverse_chain(
        model,
        sched,
        x,
        sched.steps(),
        cam,
        seed,
        &mut r,
        keep_trace,
        |_, _| Ok(()),
    )
}

/// Noises `image` for `t_r` steps and denoises it back; `t_r = 0` is a
/// single denoiser pass on the clean image.
pub fn reconstruct<F: Real>(
    model: &dyn Denoise<F>,
    sched: &NoiseSchedule,
    image: &Tensor<F>,
    cam: &Camera,
    t_r: usize,
    seed: u64,
) -> Result<SampleRun<F>> {
    check_image(model, image)?;
    if t_r > sched.steps() {
        return Err(Error::TimestepOutOfRange {
            t: t_r,
            max: sched.steps(),
        });
    }
    if t_r == 0 {
        let d = model.denoise(image, 0, cam, render_seed(seed, 0))?;
        return Ok(SampleRun {
            seed,
            camera: *cam,
            calls: alloc::vec![0],
            trace: Vec::new(),
            triplane: d.triplane,
            image: clamp_unit(&d.image),
        });
    }
    let mut r = rng::stream(seed, 0);
    let eps = normal_tensor(&mut r, image.shape());
    let x = sched.q_sample(image, t_r, &eps)?;
    reverse_chain(
        model,
        sched,
        x,
        t_r,
        cam,
        seed,
        &mut r,
        false,
        |_, _| Ok(()),
    )
}

/// Generation where, after every step, known pixels are reset to the target
/// noised to the new level (the exact target at level 0).
pub fn inpaint<F: Real>(
    model: &dyn Denoise<F>,
    sched: &NoiseSchedule,
    task: &InpaintTask<F>,
    seed: u64,
) -> Result<SampleRun<F>> {
    check_image(model, &task.target)?;
    let m = model.resolution();
    if task.mask.resolution != m || task.mask.unknown.len() != m * m {
        return Err(Error::ShapeMismatch {
            op: "inpaint mask",
            expected: alloc::vec![m, m],
            actual: alloc::vec![
                task.mask.resolution,
                task.mask.unknown.len() / task.mask.resolution.max(1)
            ],
        });
    }
    let mut r = rng::stream(seed, 0);
    let mut known_rng = rng::stream(seed, 2);
    let x = normal_tensor(&mut r, &[3, m, m]);
    let any_known = task.mask.unknown.iter().any(|u| !u);
    let replace = |x: &mut Tensor<F>, t: usize| -> Result<()> {
        if !any_known {
            return Ok(());
        }
        let known = if t == 0 {
            task.target.clone()
        } else {
            let eps = normal_tensor(&mut known_rng, task.target.shape());
            sched.q_sample(&task.target, t, &eps)?
        };
        let data = x.data_mut();
        for c in 0..3 {
            for (p, &u) in task.mask.unknown.iter().enumerate() {
                if !u {
                    data[c * m * m + p] = known.data()[c * m * m + p];
                }
            }
        }
        Ok(())
    };
    reverse_chain(
        model,
        sched,
        x,
        sched.steps(),
        &task.camera,
        seed,
        &mut r,
        false,
        replace,
    )
}

/// Midpoint-sampled render of the run's triplane from `cam`.
pub fn novel_view<F: Real>(
    model: &Denoiser<F>,
    run: &SampleRun<F>,
    cam: &Camera,
) -> Result<RenderOutput<F>> {
    let tri = run.triplane.as_ref().ok_or(Error::Empty("triplane"))?;
    model.render_triplane(tri, cam, &model.config.render.deterministic(), 0)
}

/// Wraps a denoiser and records `(t, input digest)` for every call.
#[derive(Debug)]
pub struct Recorder<'a, F: Real> {
    pub inner: &'a dyn Denoise<F>,
    pub log: RefCell<Vec<(usize, u64)>>,
}

impl<F: Real> core::fmt::Debug for dyn Denoise<F> + '_ {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str("Denoise")
    }
}

impl<'a, F: Real> Recorder<'a, F> {
    pub fn new(inner: &'a dyn Denoise<F>) -> Self {
        Self {
            inner,
            log: RefCell::new(Vec::new()),
        }
    }

    pub fn calls(&self) -> usize {
        self.log.borrow().len()
    }
}

/// Order-sensitive digest of a tensor's bits.
pub fn digest<F: Real>(x: &Tensor<F>) -> u64 {
    x.data().iter().fold(0x243F_6A88_85A3_08D3, |h, v| {
        rng::mix(h, v.as_f64().to_bits())
    })
}

impl<F: Real> Denoise<F> for Recorder<'_, F> {
    fn resolution(&self) -> usize {
        self.inner.resolution()
    }

    fn denoise(&self, x_t: &Tensor<F>, t: usize, cam: &Camera, seed: u64) -> Result<Denoised<F>> {
        self.log.borrow_mut().push((t, digest(x_t)));
        self.inner.denoise(x_t, t, cam, seed)
    }
}

/// Test hook that always answers with the same image.
#[derive(Clone, Debug, PartialEq)]
pub struct FixedDenoiser<F> {
    pub image: Tensor<F>,
}

impl<F: Real> Denoise<F> for FixedDenoiser<F> {
    fn resolution(&self) -> usize {
        self.image.shape()[1]
    }

    fn denoise(&self, _: &Tensor<F>, _: usize, _: &Camera, _: u64) -> Result<Denoised<F>> {
        Ok(Denoised {
            image: self.image.clone(),
            triplane: None,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::DenoiserConfig;
    use crate::rng::{seeded, uniform_tensor};

    fn fixed(m: usize) -> FixedDenoiser<f64> {
        FixedDenoiser {
            image: uniform_tensor(&mut seeded(1), &[3, m, m], -0.9, 0.9),
        }
    }

    #[test]
    fn oracle_chain_converges() {
        let sched = NoiseSchedule::cosine(100, 0.008).unwrap();
        let d = fixed(8);
        let run = generate(&d, &sched, &canonical_camera(8), 3, false).unwrap();
        assert_eq!(run.calls.len(), 100);
        assert!(run.image.zip_map(&d.image, |a, b| a - b).unwrap().max_abs() < 0.02);
    }

    #[test]
    fn call_counts() {
        let sched = NoiseSchedule::cosine(10, 0.008).unwrap();
        let d = fixed(8);
        let img = d.image.clone();
        let cam = canonical_camera(8);
        for k in 0..=10 {
            let rec = Recorder::new(&d);
            reconstruct(&rec, &sched, &img, &cam, k, 5).unwrap();
            assert_eq!(rec.calls(), k.max(1));
        }
        assert!(reconstruct(&d, &sched, &img, &cam, 11, 5).is_err());
        let rec = Recorder::new(&d);
        reconstruct(&rec, &sched, &img, &cam, 0, 5).unwrap();
        assert_eq!(rec.log.borrow()[0].0, 0);
    }

    #[test]
    fn full_reconstruction_mirrors_generation() {
        let sched = NoiseSchedule::cosine(10, 0.008).unwrap();
        let d = fixed(8);
        let cam = canonical_camera(8);
        let a = reconstruct(&d, &sched, &d.image, &cam, 10, 4).unwrap();
        let b = generate(&d, &sched, &cam, 4, false).unwrap();
        assert_eq!(a.calls, b.calls);
        assert!(a.image.zip_map(&b.image, |x, y| x - y).unwrap().max_abs() < 0.1);
    }

    #[test]
    fn inpaint_reductions() {
        let sched = NoiseSchedule::cosine(12, 0.008).unwrap();
        let model = Denoiser::<f64>::new(DenoiserConfig::tiny(), 2).unwrap();
        let target = uniform_tensor(&mut seeded(8), &[3, 8, 8], -1.0, 1.0);
        let cam = canonical_camera(8);
        let task = InpaintTask {
            target: target.clone(),
            mask: Mask::all_known(8),
            camera: cam,
        };
        assert_eq!(inpaint(&model, &sched, &task, 1).unwrap().image, target);

        let task = InpaintTask {
            mask: Mask::all_unknown(8),
            ..task
        };
        let ra = Recorder::new(&model);
        let a = inpaint(&ra, &sched, &task, 1).unwrap();
        let rb = Recorder::new(&model);
        let b = generate(&rb, &sched, &cam, 1, false).unwrap();
        assert_eq!(*ra.log.borrow(), *rb.log.borrow());
        assert_eq!(a.image, b.image);
    }

    #[test]
    fn known_pixels_are_exact() {
        let sched = NoiseSchedule::cosine(8, 0.008).unwrap();
        let d = fixed(16);
        let target = uniform_tensor(&mut seeded(9), &[3, 16, 16], -1.0, 1.0);
        let mut r = seeded(4);
        for seed in 0..5 {
            let mask = mask_for_eval(&mut r, 16).unwrap();
            let task = InpaintTask {
                target: target.clone(),
                mask: mask.clone(),
                camera: canonical_camera(16),
            };
            let out = inpaint(&d, &sched, &task, seed).unwrap();
            for c in 0..3 {
                for (p, &u) in mask.unknown.iter().enumerate() {
                    if !u {
                        assert_eq!(out.image.data()[c * 256 + p], target.data()[c * 256 + p]);
                    }
                }
            }
        }
    }

    #[test]
    fn eval_mask_geometry() {
        assert_eq!(eval_mask_side(64), 26);
        assert_eq!(eval_mask_side(32), 13);
        let mut r = seeded(1);
        for m in [16, 32, 64] {
            let side = eval_mask_side(m);
            for _ in 0..10_000 {
                let mask = mask_for_eval(&mut r, m).unwrap();
                assert_eq!(mask.unknown.iter().filter(|&&u| u).count(), side * side);
                let first = mask.unknown.iter().position(|&u| u).unwrap();
                let (row, col) = (first / m, first % m);
                let region = 5.0 * m as f64 / 16.0;
                for v in [row, col] {
                    let c = v as f64 + side as f64 / 2.0;
                    assert!((c - m as f64 / 2.0).abs() <= region / 2.0 + 1e-12);
                }
                // covers the central pixel block
                assert!(
                    mask.unknown[(m / 2) * m + m / 2] || mask.unknown[(m / 2 - 1) * m + m / 2 - 1]
                );
            }
        }
        assert!(mask_for_eval(&mut r, 8).is_err());
    }

    #[test]
    fn runs_are_deterministic() {
        let sched = NoiseSchedule::cosine(5, 0.008).unwrap();
        let model = Denoiser::<f64>::new(DenoiserConfig::tiny(), 2).unwrap();
        let cam = canonical_camera(8);
        let a = generate(&model, &sched, &cam, 7, true).unwrap();
        let b = generate(&model, &sched, &cam, 7, true).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.trace.len(), 5);
        let v1 = novel_view(&model, &a, &cam).unwrap();
        let v2 = novel_view(&model, &a, &cam).unwrap();
        assert_eq!(v1, v2);
    }
}
