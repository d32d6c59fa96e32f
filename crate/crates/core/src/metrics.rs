//! PSNR and SSIM on `[C, H, W]` images in `[0, 1]`, and the reconstruction
//! evaluation protocol.

use alloc::vec;
use alloc::vec::Vec;

use crate::camera::Camera;
use crate::denoiser::Denoiser;
use crate::error::{Error, Result};
use crate::samplers::{novel_view, reconstruct};
use crate::schedule::NoiseSchedule;
use crate::tensor::{Real, Tensor};

pub const PSNR_CAP: f64 = 99.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn same_shape(a: &Tensor<f64>, b: &Tensor<f64>, op: &'static str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op,
            expected: a.shape().to_vec(),
            actual: b.shape().to_vec(),
        });
    }
    Ok(())
}

/// `10 log10(1 / mse)`, capped at 99 dB.
pub fn psnr(a: &Tensor<f64>, b: &Tensor<f64>) -> Result<f64> {
    same_shape(a, b, "psnr")?;
    if a.numel() == 0 {
        return Err(Error::Empty("image"));
    }
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.numel() as f64;
    if mse < 1e-10 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * libm::log10(1.0 / mse)).min(PSNR_CAP))
}

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = libm::exp(-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA));
    }
    let s: f64 = k.iter().sum();
    k.map(|v| v / s)
}

/// Separable valid-mode filter of an `h x w` plane.
fn filter(x: &[f64], h: usize, w: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h + 1 - SSIM_WINDOW, w + 1 - SSIM_WINDOW);
    let mut rows = vec![0.0; h * ow];
    for r in 0..h {
        for c in 0..ow {
            rows[r * ow + c] = (0..SSIM_WINDOW).map(|i| k[i] * x[r * w + c + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for r in 0..oh {
        for c in 0..ow {
            out[r * ow + c] = (0..SSIM_WINDOW)
                .map(|i| k[i] * rows[(r + i) * ow + c])
                .sum();
        }
    }
    out
}

/// Mean structural similarity, 11x11 Gaussian window, channels averaged.
pub fn ssim(a: &Tensor<f64>, b: &Tensor<f64>) -> Result<f64> {
    same_shape(a, b, "ssim")?;
    if a.ndim() != 3 {
        return Err(Error::ShapeMismatch {
            op: "ssim",
            expected: vec![3, SSIM_WINDOW, SSIM_WINDOW],
            actual: a.shape().to_vec(),
        });
    }
    let (ch, h, w) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    if h < SSIM_WINDOW || w < SSIM_WINDOW || ch == 0 {
        return Err(Error::ShapeMismatch {
            op: "ssim",
            expected: vec![ch, SSIM_WINDOW, SSIM_WINDOW],
            actual: a.shape().to_vec(),
        });
    }
    let k = gaussian_kernel();
    let (c1, c2) = (
        (SSIM_K1 * 1.0) * (SSIM_K1 * 1.0),
        (SSIM_K2 * 1.0) * (SSIM_K2 * 1.0),
    );
    let mut total = 0.0;
    for c in 0..ch {
        let x = &a.data()[c * h * w..(c + 1) * h * w];
        let y = &b.data()[c * h * w..(c + 1) * h * w];
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(y).map(|(p, q)| p * q).collect();
        let (mx, my) = (filter(x, h, w, &k), filter(y, h, w, &k));
        let (sxx, syy, sxy) = (
            filter(&xx, h, w, &k),
            filter(&yy, h, w, &k),
            filter(&xy, h, w, &k),
        );
        let mut acc = 0.0;
        for i in 0..mx.len() {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cov = sxy[i] - ux * uy;
            acc += ((2.0 * ux * uy + c1) * (2.0 * cov + c2))
                / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
        }
        total += acc / mx.len() as f64;
    }
    Ok(total / ch as f64)
}

/// Maps a `[-1, 1]` image to `[0, 1]` in `f64`.
pub fn to_unit<F: Real>(x: &Tensor<F>) -> Tensor<f64> {
    x.cast::<f64>().map(|v| ((v + 1.0) * 0.5).clamp(0.0, 1.0))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageScore {
    pub scene: usize,
    pub view: usize,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneScore {
    pub scene: usize,
    pub psnr: f64,
    pub ssim: f64,
    pub images: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub images: Vec<ImageScore>,
    pub scenes: Vec<SceneScore>,
    pub psnr: f64,
    pub ssim: f64,
    /// Scores of the reconstructed input views, one per scene.
    pub inputs: Vec<ImageScore>,
    /// Mean PSNR over `inputs`, `None` when there are none.
    pub input_psnr: Option<f64>,
}

impl MetricReport {
    /// Aggregates per-image scores; an empty list is an error.
    pub fn from_images(images: Vec<ImageScore>) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::Empty("evaluation images"));
        }
        let mut scenes: Vec<SceneScore> = Vec::new();
        for s in &images {
            match scenes.iter_mut().find(|x| x.scene == s.scene) {
                Some(x) => {
                    x.psnr += s.psnr;
                    x.ssim += s.ssim;
                    x.images += 1;
                }
                None => scenes.push(SceneScore {
                    scene: s.scene,
                    psnr: s.psnr,
                    ssim: s.ssim,
                    images: 1,
                }),
            }
        }
        for s in &mut scenes {
            s.psnr /= s.images as f64;
            s.ssim /= s.images as f64;
        }
        let n = images.len() as f64;
        let psnr = images.iter().map(|s| s.psnr).sum::<f64>() / n;
        let ssim = images.iter().map(|s| s.ssim).sum::<f64>() / n;
        Ok(Self {
            images,
            scenes,
            psnr,
            ssim,
            inputs: Vec::new(),
            input_psnr: None,
        })
    }

    pub fn with_inputs(mut self, inputs: Vec<ImageScore>) -> Self {
        self.input_psnr = (!inputs.is_empty())
            .then(|| inputs.iter().map(|s| s.psnr).sum::<f64>() / inputs.len() as f64);
        self.inputs = inputs;
        self
    }
}

/// A ground-truth view: `[3, M, M]` image in `[0, 1]` and its camera.
#[derive(Clone, Debug, PartialEq)]
pub struct View {
    pub index: usize,
    pub image: Tensor<f64>,
    pub camera: Camera,
}

/// Reconstruction input and held-out views of one scene.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalScene {
    pub scene: usize,
    pub input: View,
    pub held_out: Vec<View>,
}

/// Reconstructs every scene from its input view and scores midpoint renders
/// of the resulting triplane at the held-out cameras.
pub fn evaluate_reconstruction<F: Real>(
    model: &Denoiser<F>,
    sched: &NoiseSchedule,
    scenes: &[EvalScene],
    t_r: usize,
    seed: u64,
) -> Result<MetricReport> {
    let mut images = Vec::new();
    let mut inputs = Vec::new();
    for s in scenes {
        let input = s.input.image.map(|v| 2.0 * v - 1.0).cast::<F>();
        let run = reconstruct(
            model,
            sched,
            &input,
            &s.input.camera,
            t_r,
            crate::rng::mix(seed, s.scene as u64),
        )?;
        let rec = to_unit(&run.image);
        inputs.push(ImageScore {
            scene: s.scene,
            view: s.input.index,
            psnr: psnr(&rec, &s.input.image)?,
            ssim: ssim(&rec, &s.input.image)?,
        });
        for v in &s.held_out {
            let out = novel_view(model, &run, &v.camera)?;
            let img = out.rgb.cast::<f64>();
            images.push(ImageScore {
                scene: s.scene,
                view: v.index,
                psnr: psnr(&img, &v.image)?,
                ssim: ssim(&img, &v.image)?,
            });
        }
    }
    Ok(MetricReport::from_images(images)?.with_inputs(inputs))
}
