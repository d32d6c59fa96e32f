//! Cosine noise schedule and the closed-form diffusion quantities.
//!
//! Indices run `0..=T`; index 0 is the clean image (`alpha_bar[0] = 1`,
//! `beta[0] = 0`).

use alloc::vec::Vec;
use core::f64::consts::FRAC_PI_2;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const DEFAULT_OFFSET: f64 = 0.008;
pub const BETA_CLIP: f64 = 0.999;

/// Precomputed per-step coefficients, stored in `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    steps: usize,
    offset: f64,
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    posterior_var: Vec<f64>,
}

fn cosine_f(t: f64, steps: f64, s: f64) -> f64 {
    let c = libm::cos(((t / steps + s) / (1.0 + s)) * FRAC_PI_2);
    c * c
}

impl NoiseSchedule {
    /// Cosine schedule with `steps` steps and offset `s`.
    pub fn cosine(steps: usize, s: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidConfig(
                "schedule needs at least one step".into(),
            ));
        }
        if !(s > 0.0 && s < 1.0) {
            return Err(Error::InvalidConfig(
                "cosine offset must lie in (0, 1)".into(),
            ));
        }
        let n = steps as f64;
        let f0 = cosine_f(0.0, n, s);
        let mut beta = Vec::with_capacity(steps + 1);
        let mut alpha = Vec::with_capacity(steps + 1);
        let mut alpha_bar = Vec::with_capacity(steps + 1);
        let mut posterior_var = Vec::with_capacity(steps + 1);
        beta.push(0.0);
        alpha.push(1.0);
        alpha_bar.push(1.0);
        posterior_var.push(0.0);
        let mut prev_closed = 1.0;
        for t in 1..=steps {
            let closed = cosine_f(t as f64, n, s) / f0;
            let b = (1.0 - closed / prev_closed).min(BETA_CLIP);
            prev_closed = closed;
            let a = 1.0 - b;
            let ab = alpha_bar[t - 1] * a;
            posterior_var.push((1.0 - alpha_bar[t - 1]) / (1.0 - ab) * b);
            beta.push(b);
            alpha.push(a);
            alpha_bar.push(ab);
        }
        Ok(Self {
            steps,
            offset: s,
            beta,
            alpha,
            alpha_bar,
            posterior_var,
        })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn offset(&self) -> f64 {
        self.offset
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn posterior_var(&self, t: usize) -> f64 {
        self.posterior_var[t]
    }

    fn check(&self, t: usize, min: usize) -> Result<()> {
        if t < min || t > self.steps {
            return Err(Error::TimestepOutOfRange { t, max: self.steps });
        }
        Ok(())
    }

    /// `sqrt(ab_t) x0 + sqrt(1 - ab_t) eps`.
    pub fn q_sample<F: Real>(
        &self,
        x0: &Tensor<F>,
        t: usize,
        eps: &Tensor<F>,
    ) -> Result<Tensor<F>> {
        self.check(t, 0)?;
        if t == 0 {
            return Ok(x0.clone());
        }
        let a = F::lit(libm::sqrt(self.alpha_bar[t]));
        let b = F::lit(libm::sqrt(1.0 - self.alpha_bar[t]));
        x0.zip_map(eps, |x, e| a * x + b * e)
    }

    /// Coefficients `(c0, ct)` with `mu_t = c0 x0 + ct xt`.
    pub fn posterior_coefficients(&self, t: usize) -> Result<(f64, f64)> {
        self.check(t, 1)?;
        let (ab, ab_prev) = (self.alpha_bar[t], self.alpha_bar[t - 1]);
        let c0 = libm::sqrt(ab_prev) * self.beta[t] / (1.0 - ab);
        let ct = libm::sqrt(self.alpha[t]) * (1.0 - ab_prev) / (1.0 - ab);
        Ok((c0, ct))
    }

    /// Mean and variance of `q(x_{t-1} | x_t, x_0)`.
    pub fn posterior_mean_var<F: Real>(
        &self,
        x0: &Tensor<F>,
        xt: &Tensor<F>,
        t: usize,
    ) -> Result<(Tensor<F>, f64)> {
        let (c0, ct) = self.posterior_coefficients(t)?;
        let (c0, ct) = (F::lit(c0), F::lit(ct));
        Ok((
            x0.zip_map(xt, |a, b| c0 * a + ct * b)?,
            self.posterior_var[t],
        ))
    }

    /// Posterior mean written in terms of the denoiser's estimate of `x0`:
    /// `(x_t - (1 - a_t)/(1 - ab_t) (x_t - sqrt(ab_t) x0hat)) / sqrt(a_t)`.
    pub fn mu_from_x0hat<F: Real>(
        &self,
        xt: &Tensor<F>,
        x0hat: &Tensor<F>,
        t: usize,
    ) -> Result<Tensor<F>> {
        self.check(t, 1)?;
        let k = (1.0 - self.alpha[t]) / (1.0 - self.alpha_bar[t]);
        let sab = libm::sqrt(self.alpha_bar[t]);
        let inv = 1.0 / libm::sqrt(self.alpha[t]);
        let (k, sab, inv) = (F::lit(k), F::lit(sab), F::lit(inv));
        xt.zip_map(x0hat, |x, h| (x - k * (x - sab * h)) * inv)
    }

    /// One reverse step: `mu_t + sigma_t * noise`, no noise at `t = 1`.
    pub fn ancestral_step<F: Real>(
        &self,
        xt: &Tensor<F>,
        x0hat: &Tensor<F>,
        t: usize,
        noise: &Tensor<F>,
    ) -> Result<Tensor<F>> {
        let mu = self.mu_from_x0hat(xt, x0hat, t)?;
        if t == 1 {
            return Ok(mu);
        }
        let sigma = F::lit(libm::sqrt(self.posterior_var[t]));
        mu.zip_map(noise, |m, n| m + sigma * n)
    }

    /// Stable digest of the schedule parameters.
    pub fn fingerprint(&self) -> u64 {
        let mut h = crate::rng::mix(self.steps as u64, 0x5EED);
        h = crate::rng::mix(h, self.offset.to_bits());
        for b in &self.beta {
            h = crate::rng::mix(h, b.to_bits());
        }
        h
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal_tensor, seeded};

    fn closed_form(t: usize, steps: usize, s: f64) -> f64 {
        // independent evaluation straight from the definition
        let f = |x: f64| {
            let c = ((x / steps as f64 + s) / (1.0 + s) * core::f64::consts::PI / 2.0).cos();
            c * c
        };
        f(t as f64) / f(0.0)
    }

    #[test]
    fn alpha_bar_zero_is_one() {
        for steps in [1, 7, 100] {
            assert_eq!(
                NoiseSchedule::cosine(steps, 0.008).unwrap().alpha_bar(0),
                1.0
            );
        }
    }

    #[test]
    fn midpoint_value() {
        let s = NoiseSchedule::cosine(1000, 0.008).unwrap();
        assert!((s.alpha_bar(500) - 0.49).abs() < 0.01);
        assert!((s.alpha_bar(500) - closed_form(500, 1000, 0.008)).abs() < 1e-10);
    }

    #[test]
    fn strictly_decreasing_with_valid_betas() {
        let s = NoiseSchedule::cosine(100, 0.008).unwrap();
        for t in 1..=100 {
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
            assert!(s.beta(t) > 0.0 && s.beta(t) < 1.0);
            assert!(s.posterior_var(t) >= 0.0);
            if t >= 2 {
                assert!(s.posterior_var(t) > 0.0);
            }
        }
        assert_eq!(s.posterior_var(1), 0.0);
        assert!(s.alpha_bar(100) <= 1.0 - BETA_CLIP);
    }

    #[test]
    fn zero_steps_rejected() {
        assert!(NoiseSchedule::cosine(0, 0.008).is_err());
    }

    #[test]
    fn q_sample_edge_cases() {
        let s = NoiseSchedule::cosine(10, 0.008).unwrap();
        let mut rng = seeded(2);
        let x0 = normal_tensor::<f64>(&mut rng, &[3, 4]);
        let eps = normal_tensor::<f64>(&mut rng, &[3, 4]);
        assert_eq!(s.q_sample(&x0, 0, &eps).unwrap(), x0);
        let zero = Tensor::zeros(&[3, 4]);
        let out = s.q_sample(&x0, 4, &zero).unwrap();
        for (o, x) in out.data().iter().zip(x0.data()) {
            assert!((o - s.alpha_bar(4).sqrt() * x).abs() < 1e-15);
        }
        assert!(matches!(
            s.q_sample(&x0, 11, &eps),
            Err(Error::TimestepOutOfRange { t: 11, max: 10 })
        ));
    }

    #[test]
    fn first_posterior_step_returns_x0() {
        let s = NoiseSchedule::cosine(50, 0.008).unwrap();
        let mut rng = seeded(4);
        let x0 = normal_tensor::<f64>(&mut rng, &[5]);
        let xt = normal_tensor::<f64>(&mut rng, &[5]);
        let (mu, var) = s.posterior_mean_var(&x0, &xt, 1).unwrap();
        for (m, x) in mu.data().iter().zip(x0.data()) {
            assert!((m - x).abs() < 1e-12);
        }
        assert_eq!(var, 0.0);
        assert!(s.posterior_mean_var(&x0, &xt, 0).is_err());
    }

    #[test]
    fn mean_forms_agree() {
        let s = NoiseSchedule::cosine(100, 0.008).unwrap();
        let mut rng = seeded(11);
        for i in 0..100 {
            let t = 1 + (i * 37) % 100;
            let x0 = normal_tensor::<f64>(&mut rng, &[8]);
            let xt = normal_tensor::<f64>(&mut rng, &[8]);
            let (mu, _) = s.posterior_mean_var(&x0, &xt, t).unwrap();
            let mu2 = s.mu_from_x0hat(&xt, &x0, t).unwrap();
            for (a, b) in mu.data().iter().zip(mu2.data()) {
                assert!((a - b).abs() < 1e-10, "t={t}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn last_step_zero_prediction() {
        let s = NoiseSchedule::cosine(100, 0.008).unwrap();
        let xt = Tensor::<f64>::full(&[2], 0.7);
        let mu = s.mu_from_x0hat(&xt, &Tensor::zeros(&[2]), 100).unwrap();
        let (a, ab) = (s.alpha(100), s.alpha_bar(100));
        let expect = 0.7 * (1.0 - (1.0 - a) / (1.0 - ab)) / a.sqrt();
        assert!((mu.data()[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn step_at_one_is_deterministic() {
        let s = NoiseSchedule::cosine(20, 0.008).unwrap();
        let mut rng = seeded(6);
        let xt = normal_tensor::<f64>(&mut rng, &[4]);
        let x0 = normal_tensor::<f64>(&mut rng, &[4]);
        let n1 = normal_tensor::<f64>(&mut rng, &[4]);
        let n2 = normal_tensor::<f64>(&mut rng, &[4]);
        assert_eq!(
            s.ancestral_step(&xt, &x0, 1, &n1).unwrap(),
            s.ancestral_step(&xt, &x0, 1, &n2).unwrap()
        );
        assert_eq!(
            s.ancestral_step(&xt, &x0, 1, &n1).unwrap(),
            s.mu_from_x0hat(&xt, &x0, 1).unwrap()
        );
    }
}
