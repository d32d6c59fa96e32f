//! Training objective and optimizer.
//!
//! Every random draw of step `k` comes from streams keyed by `(seed, k)`, so
//! a run resumed from a checkpoint at step `k` continues exactly like an
//! uninterrupted one. Batch elements get their own tapes and their gradients
//! are summed in index order, which keeps results independent of how the
//! elements are scheduled.

use alloc::vec::Vec;

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::camera::Camera;
use crate::denoiser::{l1_to_image, Denoise, Denoiser};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::render::{render, RenderConfig};
use crate::rng::{self, normal_tensor};
use crate::schedule::NoiseSchedule;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch: usize,
    pub steps: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Weight of the score-distillation term.
    pub lambda_sd: f64,
    /// Per-step probability of adding the score-distillation term.
    pub rho_sd: f64,
    pub sd_enabled: bool,
    pub seed: u64,
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch: 4,
            steps: 2000,
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
            weight_decay: 0.0,
            lambda_sd: 0.1,
            rho_sd: 0.5,
            sd_enabled: false,
            seed: 0,
            checkpoint_every: 500,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if self.batch == 0 {
            return bad("batch must be at least 1");
        }
        if !(self.lr > 0.0)
            || !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
            || !(self.eps > 0.0)
        {
            return bad("optimizer needs lr > 0, betas in [0, 1) and eps > 0");
        }
        if !(self.lambda_sd >= 0.0)
            || !(0.0..=1.0).contains(&self.rho_sd)
            || !(self.weight_decay >= 0.0)
        {
            return bad("need lambda_sd >= 0, 0 <= rho_sd <= 1 and weight_decay >= 0");
        }
        Ok(())
    }
}

/// Adam moments and step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<F> {
    pub m: ParamStore<F>,
    pub v: ParamStore<F>,
    pub step: u64,
}

impl<F: Real> Adam<F> {
    pub fn new(params: &ParamStore<F>) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }

    pub fn update(
        &mut self,
        params: &mut ParamStore<F>,
        grads: &ParamStore<F>,
        cfg: &TrainConfig,
    ) -> Result<()> {
        if params.names() != grads.names() || params.names() != self.m.names() {
            return Err(Error::InvalidConfig(
                "optimizer state does not match the parameters".into(),
            ));
        }
        self.step += 1;
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        let c1 = 1.0 - libm::pow(b1, self.step as f64);
        let c2 = 1.0 - libm::pow(b2, self.step as f64);
        let (b1f, b2f) = (F::lit(b1), F::lit(b2));
        let (ib1, ib2) = (F::lit(1.0 - b1), F::lit(1.0 - b2));
        let (ic1, ic2) = (F::lit(1.0 / c1), F::lit(1.0 / c2));
        let (lr, eps, wd) = (F::lit(cfg.lr), F::lit(cfg.eps), F::lit(cfg.weight_decay));
        let tensors = params.tensors_mut();
        for (((p, g), m), v) in tensors
            .iter_mut()
            .zip(grads.tensors())
            .zip(self.m.tensors_mut())
            .zip(self.v.tensors_mut())
        {
            for (((p, &g), m), v) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *m = b1f * *m + ib1 * g;
                *v = b2f * *v + ib2 * g * g;
                let mh = *m * ic1;
                let vh = *v * ic2;
                *p -= lr * (mh / (vh.sqrt() + eps) + wd * *p);
            }
        }
        Ok(())
    }
}

/// `ema = decay * ema + (1 - decay) * params`.
pub fn ema_update<F: Real>(ema: &mut ParamStore<F>, params: &ParamStore<F>, decay: f64) -> Result<()> {
    if ema.names() != params.names() {
        return Err(Error::InvalidConfig("EMA state does not match the parameters".into()));
    }
    let (d, e) = (F::lit(decay), F::lit(1.0 - decay));
    for (a, p) in ema.tensors_mut().iter_mut().zip(params.tensors()) {
        for (a, &p) in a.data_mut().iter_mut().zip(p.data()) {
            *a = d * *a + e * p;
        }
    }
    Ok(())
}

/// A training image in `[-1, 1]` with its camera.
#[derive(Clone, Debug, PartialEq)]
pub struct Example<F> {
    pub image: Tensor<F>,
    pub camera: Camera,
}

/// `||denoise(q_sample(x0, t, eps), t, v) - x0||_1`, averaged over pixels.
#[allow(clippy::too_many_arguments)]
pub fn denoise_loss<F: Real>(
    model: &Denoiser<F>,
    tape: &mut Tape<F>,
    bound: &crate::params::Bound<'_>,
    x0: &Tensor<F>,
    cam: &Camera,
    t: usize,
    eps: &Tensor<F>,
    sched: &NoiseSchedule,
    seed: u64,
) -> Result<(Var, Var)> {
    let xt = sched.q_sample(x0, t, eps)?;
    let out = model.forward(tape, bound, &xt, t, cam, seed)?;
    Ok((l1_to_image(tape, out.pixels, x0)?, out.planes))
}

/// Renders `planes` from `v_r`, noises the render to level `t` and compares
/// it with `inner`'s estimate. The inner call is a constant, so gradient only
/// reaches the planes and decoder through the render.
#[allow(clippy::too_many_arguments)]
pub fn score_distillation_loss<F: Real>(
    model: &Denoiser<F>,
    inner: &dyn Denoise<F>,
    tape: &mut Tape<F>,
    bound: &crate::params::Bound<'_>,
    planes: Var,
    v_r: &Camera,
    t: usize,
    eps: &Tensor<F>,
    sched: &NoiseSchedule,
    render_cfg: &RenderConfig,
    seed: u64,
) -> Result<Var> {
    let m = model.config.resolution;
    let cam = v_r.with_resolution(m);
    let field = model.field(bound, planes);
    let r = render(&field, tape, &cam, render_cfg, seed)?;
    let p = tape.mul_scalar(r.rgb, F::lit(2.0))?;
    let pixels = tape.add_scalar(p, F::lit(-1.0))?;
    let rendered = crate::denoiser::pixels_value(tape, pixels);
    let noisy = sched.q_sample(&rendered, t, eps)?;
    let target = inner.denoise(&noisy, t, &cam, rng::mix(seed, 0x5d))?.image;
    l1_to_image(tape, pixels, &target)
}

/// Random choices for one batch element.
#[derive(Clone, Debug, PartialEq)]
pub struct ElementDraw<F> {
    pub index: usize,
    pub t: usize,
    pub eps: Tensor<F>,
    pub render_seed: u64,
    /// Random pose and noise for the regularizer, when active this step.
    pub sd: Option<(Camera, Tensor<F>)>,
}

/// Draws for step `step`: batch indices, timesteps (uniform in `0..=T`),
/// noise and the regularizer decision, all from `(seed, step)`.
pub fn draw_step<F: Real>(
    cfg: &TrainConfig,
    sched: &NoiseSchedule,
    step: u64,
    data: &[Example<F>],
) -> Result<Vec<ElementDraw<F>>> {
    if data.is_empty() {
        return Err(Error::Empty("training set"));
    }
    let key = rng::mix(cfg.seed, step);
    let mut r = rng::stream(key, 0);
    let use_sd = cfg.sd_enabled && cfg.lambda_sd > 0.0 && r.random::<f64>() < cfg.rho_sd;
    let shape = data[0].image.shape().to_vec();
    (0..cfg.batch)
        .map(|b| {
            let mut e = rng::stream(key, 1 + b as u64);
            let index = e.random_range(0..data.len());
            let t = e.random_range(0..=sched.steps());
            let eps = normal_tensor(&mut e, &shape);
            let render_seed = e.random();
            let sd = use_sd.then(|| {
                let cam = data[e.random_range(0..data.len())].camera;
                (cam, normal_tensor(&mut e, &shape))
            });
            Ok(ElementDraw {
                index,
                t,
                eps,
                render_seed,
                sd,
            })
        })
        .collect()
}

/// Loss values of one element or one step.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossTerms {
    pub denoise: f64,
    pub sd: f64,
}

/// Gradient of one element's loss.
pub fn element_gradients<F: Real>(
    model: &Denoiser<F>,
    cfg: &TrainConfig,
    sched: &NoiseSchedule,
    data: &[Example<F>],
    draw: &ElementDraw<F>,
) -> Result<(ParamStore<F>, LossTerms)> {
    let ex = &data[draw.index];
    let mut tape = Tape::new();
    let bound = model.params.bind(&mut tape);
    let (l, planes) = denoise_loss(
        model,
        &mut tape,
        &bound,
        &ex.image,
        &ex.camera,
        draw.t,
        &draw.eps,
        sched,
        draw.render_seed,
    )?;
    let mut terms = LossTerms {
        denoise: tape.value(l).item().as_f64(),
        sd: 0.0,
    };
    let mut total = l;
    if let Some((cam, eps)) = &draw.sd {
        let s = score_distillation_loss(
            model,
            model,
            &mut tape,
            &bound,
            planes,
            cam,
            draw.t,
            eps,
            sched,
            &model.config.render,
            rng::mix(draw.render_seed, 1),
        )?;
        terms.sd = tape.value(s).item().as_f64();
        let s = tape.mul_scalar(s, F::lit(cfg.lambda_sd))?;
        total = tape.add(total, s)?;
    }
    if !terms.denoise.is_finite() || !terms.sd.is_finite() {
        return Err(Error::NonFinite {
            op: "loss",
            index: draw.index,
        });
    }
    let grads = tape.backward(total)?;
    Ok((model.params.collect_grads(&bound, &grads), terms))
}

/// Mean of per-element gradients and losses, summed in element order.
pub fn reduce_elements<F: Real>(
    parts: Vec<(ParamStore<F>, LossTerms)>,
) -> Result<(ParamStore<F>, LossTerms)> {
    let n = parts.len();
    let mut it = parts.into_iter();
    let (mut acc, mut terms) = it.next().ok_or(Error::Empty("batch"))?;
    for (g, l) in it {
        acc.add_assign(&g)?;
        terms.denoise += l.denoise;
        terms.sd += l.sd;
    }
    acc.scale(F::lit(1.0 / n as f64));
    terms.denoise /= n as f64;
    terms.sd /= n as f64;
    Ok((acc, terms))
}

/// One optimizer step over a batch, serially. Returns the step's losses.
pub fn train_step<F: Real>(
    model: &mut Denoiser<F>,
    adam: &mut Adam<F>,
    cfg: &TrainConfig,
    sched: &NoiseSchedule,
    data: &[Example<F>],
) -> Result<LossTerms> {
    let draws = draw_step(cfg, sched, adam.step, data)?;
    let parts = draws
        .iter()
        .map(|d| element_gradients(model, cfg, sched, data, d))
        .collect::<Result<Vec<_>>>()?;
    let (grads, terms) = reduce_elements(parts)?;
    adam.update(&mut model.params, &grads, cfg)?;
    Ok(terms)
}
