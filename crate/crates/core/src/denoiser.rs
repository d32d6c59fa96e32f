//! The 3D-aware denoiser: encoder to triplane, then a render from the input
//! camera. Images are channel-first `[3, M, M]` in `[-1, 1]`.

use alloc::vec;
use alloc::vec::Vec;

use crate::autodiff::{Tape, Var};
use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::params::{Bound, ParamStore};
use crate::render::{
    image_to_pixels, pixels_to_image, plan_samples, render, render_image, render_with_plan,
    RenderConfig, RenderOutput, RenderVars, SamplePlan, TriplaneField,
};
use crate::rng;
use crate::tensor::{Real, Tensor};
use crate::triplane::{init_decoder, DecoderVars, FieldConfig, Triplane};
use crate::unet::{encoder_forward, init_encoder, EncoderConfig};

const ENC: &str = "enc";
const DEC: &str = "dec";

#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserConfig {
    /// Image resolution `M`.
    pub resolution: usize,
    pub field: FieldConfig,
    pub widths: Vec<usize>,
    pub res_blocks: usize,
    pub groups: usize,
    pub time_dim: usize,
    pub attention: bool,
    pub render: RenderConfig,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            resolution: 32,
            field: FieldConfig::default(),
            widths: vec![32, 64, 128],
            res_blocks: 2,
            groups: 8,
            time_dim: 64,
            attention: false,
            render: RenderConfig::default(),
        }
    }
}

impl DenoiserConfig {
    /// Smallest useful model, used by gradient checks.
    pub fn tiny() -> Self {
        Self {
            resolution: 8,
            field: FieldConfig {
                n_f: 4,
                resolution: 8,
                n_freq: 2,
                hidden: 8,
                extent: 1.5,
            },
            widths: vec![8],
            res_blocks: 1,
            groups: 4,
            time_dim: 8,
            attention: false,
            render: RenderConfig {
                n_coarse: 4,
                n_fine: 4,
                ..RenderConfig::default()
            },
        }
    }

    pub fn encoder(&self) -> EncoderConfig {
        EncoderConfig {
            in_res: self.resolution,
            out_res: self.field.resolution,
            in_channels: 3,
            out_channels: 3 * self.field.n_f,
            widths: self.widths.clone(),
            res_blocks: self.res_blocks,
            groups: self.groups,
            time_dim: self.time_dim,
            attention: self.attention,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.field.validate()?;
        self.render.validate()?;
        self.encoder().validate()
    }
}

/// Encoder and decoder weights with their configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct Denoiser<F> {
    pub config: DenoiserConfig,
    pub params: ParamStore<F>,
}

/// Tape handles of one differentiable denoiser call.
#[derive(Clone, Debug)]
pub struct DenoiseVars {
    /// `[3, n_f, N, N]`.
    pub planes: Var,
    /// Estimate of the clean image as `[M*M, 3]` pixel-major in `[-1, 1]`.
    pub pixels: Var,
    pub render: RenderVars,
}

/// Result of an inference call.
#[derive(Clone, Debug, PartialEq)]
pub struct Denoised<F> {
    /// `[3, M, M]` in `[-1, 1]`.
    pub image: Tensor<F>,
    pub triplane: Option<Triplane<F>>,
}

/// Anything that maps a noisy image to an estimate of the clean one.
pub trait Denoise<F: Real> {
    fn resolution(&self) -> usize;
    fn denoise(&self, x_t: &Tensor<F>, t: usize, cam: &Camera, seed: u64) -> Result<Denoised<F>>;
}

impl<F: Real> Denoiser<F> {
    pub fn new(config: DenoiserConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::stream(seed, 0x1417);
        let mut params = ParamStore::new();
        init_encoder(&mut params, &mut rng, ENC, &config.encoder())?;
        init_decoder(&mut params, &mut rng, DEC, &config.field);
        Ok(Self { config, params })
    }

    pub fn from_parts(config: DenoiserConfig, params: ParamStore<F>) -> Result<Self> {
        config.validate()?;
        let reference = Denoiser::<F>::new(config.clone(), 0)?;
        for (name, t) in reference.params.iter() {
            match params.get(name) {
                Some(p) if p.shape() == t.shape() => {}
                Some(p) => {
                    return Err(Error::ShapeMismatch {
                        op: "load",
                        expected: t.shape().to_vec(),
                        actual: p.shape().to_vec(),
                    })
                }
                None => {
                    return Err(Error::InvalidConfig(alloc::format!(
                        "missing parameter {name}"
                    )))
                }
            }
        }
        if params.len() != reference.params.len() {
            return Err(Error::InvalidConfig("unexpected extra parameters".into()));
        }
        Ok(Self { config, params })
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    fn check_image(&self, x: &Tensor<F>) -> Result<()> {
        let m = self.config.resolution;
        x.expect_shape("denoise", &[3, m, m])
    }

    /// Encoder output for `[3, M, M]` input as `[3, n_f, N, N]`.
    pub fn encode_var(
        &self,
        tape: &mut Tape<F>,
        bound: &Bound<'_>,
        x_t: Var,
        t: usize,
    ) -> Result<Var> {
        let m = self.config.resolution;
        let x = tape.reshape(x_t, &[1, 3, m, m])?;
        let y = encoder_forward(tape, bound, ENC, &self.config.encoder(), x, t)?;
        let n = self.config.field.resolution;
        tape.reshape(y, &[3, self.config.field.n_f, n, n])
    }

    pub fn field(&self, bound: &Bound<'_>, planes: Var) -> TriplaneField {
        TriplaneField {
            planes,
            n_f: self.config.field.n_f,
            extent: self.config.field.extent,
            n_freq: self.config.field.n_freq,
            decoder: DecoderVars::from_bound(bound, DEC),
        }
    }

    /// Differentiable forward pass.
    pub fn forward(
        &self,
        tape: &mut Tape<F>,
        bound: &Bound<'_>,
        x_t: &Tensor<F>,
        t: usize,
        cam: &Camera,
        seed: u64,
    ) -> Result<DenoiseVars> {
        self.check_image(x_t)?;
        let x = tape.constant(x_t.clone());
        let planes = self.encode_var(tape, bound, x, t)?;
        let field = self.field(bound, planes);
        let cam = cam.with_resolution(self.config.resolution);
        let r = render(&field, tape, &cam, &self.config.render, seed)?;
        let p = tape.mul_scalar(r.rgb, F::lit(2.0))?;
        let pixels = tape.add_scalar(p, F::lit(-1.0))?;
        Ok(DenoiseVars {
            planes,
            pixels,
            render: r,
        })
    }

    /// Sample depths the forward pass would use for these inputs.
    pub fn plan(&self, x_t: &Tensor<F>, t: usize, cam: &Camera, seed: u64) -> Result<SamplePlan> {
        self.check_image(x_t)?;
        let mut tape = Tape::inference();
        let bound = self.params.bind_constant(&mut tape);
        let x = tape.constant(x_t.clone());
        let planes = self.encode_var(&mut tape, &bound, x, t)?;
        let field = self.field(&bound, planes);
        let cam = cam.with_resolution(self.config.resolution);
        plan_samples(&field, &mut tape, &cam, &self.config.render, seed)
    }

    /// Forward pass over fixed sample depths.
    pub fn forward_planned(
        &self,
        tape: &mut Tape<F>,
        bound: &Bound<'_>,
        x_t: &Tensor<F>,
        t: usize,
        plan: &SamplePlan,
    ) -> Result<DenoiseVars> {
        self.check_image(x_t)?;
        let x = tape.constant(x_t.clone());
        let planes = self.encode_var(tape, bound, x, t)?;
        let field = self.field(bound, planes);
        let r = render_with_plan(&field, tape, plan, &self.config.render)?;
        let p = tape.mul_scalar(r.rgb, F::lit(2.0))?;
        let pixels = tape.add_scalar(p, F::lit(-1.0))?;
        Ok(DenoiseVars {
            planes,
            pixels,
            render: r,
        })
    }

    /// Triplane for `x_t` without recording gradients.
    pub fn encode(&self, x_t: &Tensor<F>, t: usize) -> Result<Triplane<F>> {
        self.check_image(x_t)?;
        let mut tape = Tape::inference();
        let bound = self.params.bind_constant(&mut tape);
        let x = tape.constant(x_t.clone());
        let planes = self.encode_var(&mut tape, &bound, x, t)?;
        Triplane::new(tape.value(planes).clone(), self.config.field.extent)
    }

    /// Renders a stored triplane in `[0, 1]`.
    pub fn render_triplane(
        &self,
        triplane: &Triplane<F>,
        cam: &Camera,
        cfg: &RenderConfig,
        seed: u64,
    ) -> Result<RenderOutput<F>> {
        let mut tape = Tape::inference();
        let bound = self.params.bind_constant(&mut tape);
        let planes = tape.constant(triplane.planes.clone());
        let field = self.field(&bound, planes);
        render_image(&field, &mut tape, cam, cfg, seed)
    }
}

impl<F: Real> Denoise<F> for Denoiser<F> {
    fn resolution(&self) -> usize {
        self.config.resolution
    }

    fn denoise(&self, x_t: &Tensor<F>, t: usize, cam: &Camera, seed: u64) -> Result<Denoised<F>> {
        let triplane = self.encode(x_t, t)?;
        let cam = cam.with_resolution(self.config.resolution);
        let out = self.render_triplane(&triplane, &cam, &self.config.render, seed)?;
        let image = out.rgb.map(|v| v + v - F::one());
        Ok(Denoised {
            image,
            triplane: Some(triplane),
        })
    }
}

/// Mean absolute error between `[M*M, 3]` pixels and a `[3, M, M]` target.
pub fn l1_to_image<F: Real>(tape: &mut Tape<F>, pixels: Var, target: &Tensor<F>) -> Result<Var> {
    let tgt = tape.constant(image_to_pixels(target));
    let d = tape.sub(pixels, tgt)?;
    let d = tape.abs(d)?;
    tape.mean(d)
}

/// `[M*M, 3]` tape value as a `[3, M, M]` image.
pub fn pixels_value<F: Real>(tape: &Tape<F>, pixels: Var) -> Tensor<F> {
    let m = libm::sqrt(tape.shape(pixels)[0] as f64) as usize;
    pixels_to_image(tape.value(pixels), m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::look_at_pose;
    use crate::gradcheck::grad_check_elements;
    use crate::rng::{normal_tensor, seeded};

    fn cam(az: f64) -> Camera {
        Camera::new(8, look_at_pose(az, 0.5, 2.5, [0.0; 3]).unwrap())
    }

    #[test]
    fn output_in_range_and_shaped() {
        let d = Denoiser::<f64>::new(DenoiserConfig::tiny(), 3).unwrap();
        let x = normal_tensor(&mut seeded(1), &[3, 8, 8]);
        let out = d.denoise(&x, 5, &cam(0.2), 9).unwrap();
        assert_eq!(out.image.shape(), &[3, 8, 8]);
        assert!(out
            .image
            .data()
            .iter()
            .all(|v| v.is_finite() && (-1.0..=1.0).contains(v)));
        assert_eq!(out.triplane.unwrap().planes.shape(), &[3, 4, 8, 8]);
    }

    #[test]
    fn camera_does_not_reach_encoder() {
        let d = Denoiser::<f64>::new(DenoiserConfig::tiny(), 3).unwrap();
        let x = normal_tensor(&mut seeded(1), &[3, 8, 8]);
        let a = d.denoise(&x, 5, &cam(0.2), 9).unwrap();
        let b = d.denoise(&x, 5, &cam(2.0), 9).unwrap();
        assert_eq!(a.triplane, b.triplane);
        assert_ne!(a.image, b.image);
    }

    #[test]
    fn default_triplane_shape() {
        let d = Denoiser::<f32>::new(DenoiserConfig::default(), 1).unwrap();
        let tri = d.encode(&Tensor::zeros(&[3, 32, 32]), 10).unwrap();
        assert_eq!(tri.planes.shape(), &[3, 32, 32, 32]);
        assert!(d.param_count() > 0);
    }

    #[test]
    fn wrong_resolution_is_an_error() {
        let d = Denoiser::<f64>::new(DenoiserConfig::tiny(), 3).unwrap();
        assert!(d
            .denoise(&Tensor::zeros(&[3, 16, 16]), 1, &cam(0.0), 0)
            .is_err());
    }

    #[test]
    fn end_to_end_gradient_matches_differences() {
        let d = Denoiser::<f64>::new(DenoiserConfig::tiny(), 4).unwrap();
        let x = normal_tensor(&mut seeded(5), &[3, 8, 8]);
        let target = normal_tensor::<f64>(&mut seeded(6), &[3, 8, 8]).map(|v| v.tanh());
        let plan = d.plan(&x, 7, &cam(0.7), 11).unwrap();
        let picks = ["enc.conv_in.w", "dec.w1"];
        let idx: Vec<usize> = picks
            .iter()
            .map(|n| d.params.names().iter().position(|m| m == n).unwrap())
            .collect();
        let params: Vec<Tensor<f64>> = idx.iter().map(|&i| d.params.tensors()[i].clone()).collect();
        let report = grad_check_elements(
            |tape, vars| {
                let mut all: Vec<Var> = d
                    .params
                    .tensors()
                    .iter()
                    .map(|t| tape.constant(t.clone()))
                    .collect();
                for (&i, &v) in idx.iter().zip(vars) {
                    all[i] = v;
                }
                let bound = d.params.bind_vars(all);
                let out = d.forward_planned(tape, &bound, &x, 7, &plan)?;
                l1_to_image(tape, out.pixels, &target)
            },
            &params,
            1e-3,
            1e-3,
            |_, i| i % 5 == 0,
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
        assert!(report.params.iter().all(|p| p.checked > 0));
    }
}
