//! Two-pass volume rendering of a radiance field.
//!
//! Each ray first gets `n_coarse` stratified samples; their compositing
//! weights (computed without gradient) define a piecewise-constant density
//! over the stratification bins from which `n_fine` more depths are drawn by
//! inverse-CDF. Both sets are merged and rendered differentiably.
//!
//! Every sample stands for the interval between the midpoints to its
//! neighbours; the first interval starts at `near` and the last ends at
//! `far`, so the intervals tile `[near, far]` exactly.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::camera::{Camera, Ray, Vec3};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{Real, Tensor};
use crate::triplane::{embedding_tensor, sample_triplane_var, DecoderVars, FieldSample};

/// Opacity below which a pixel reports `far` as its depth.
pub const EMPTY_OPACITY: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RenderConfig {
    pub n_coarse: usize,
    pub n_fine: usize,
    pub background: [f64; 3],
    /// Random depths when true; bin midpoints and evenly spaced CDF
    /// quantiles when false.
    pub stochastic: bool,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            n_coarse: 32,
            n_fine: 32,
            background: [1.0; 3],
            stochastic: true,
        }
    }
}

impl RenderConfig {
    pub fn deterministic(self) -> Self {
        Self {
            stochastic: false,
            ..self
        }
    }

    pub fn samples_per_ray(&self) -> usize {
        self.n_coarse + self.n_fine
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_coarse == 0 {
            return Err(Error::InvalidConfig("n_coarse must be at least 1".into()));
        }
        Ok(())
    }
}

/// Something that yields density and color at world points.
pub trait Field<F: Real> {
    /// Returns density `[P]` and color `[P, 3]`.
    fn query(&self, tape: &mut Tape<F>, points: &[Vec3]) -> Result<(Var, Var)>;
}

/// Triplane lookup followed by the point decoder.
#[derive(Clone, Copy, Debug)]
pub struct TriplaneField {
    /// `[3, n_f, N, N]` or `[3 n_f, N, N]` planes on the tape.
    pub planes: Var,
    pub n_f: usize,
    pub extent: f64,
    pub n_freq: usize,
    pub decoder: DecoderVars,
}

impl<F: Real> Field<F> for TriplaneField {
    fn query(&self, tape: &mut Tape<F>, points: &[Vec3]) -> Result<(Var, Var)> {
        let feat = sample_triplane_var(tape, self.planes, self.n_f, points, self.extent)?;
        let emb = tape.constant(embedding_tensor(points, self.n_freq));
        self.decoder.decode(tape, feat, emb)
    }
}

/// Closed-form field, used for analytic checks.
pub struct FnField<G>(pub G);

impl<G> core::fmt::Debug for FnField<G> {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str("FnField")
    }
}

impl<F: Real, G: Fn(Vec3) -> FieldSample> Field<F> for FnField<G> {
    fn query(&self, tape: &mut Tape<F>, points: &[Vec3]) -> Result<(Var, Var)> {
        let mut d = Vec::with_capacity(points.len());
        let mut c = Vec::with_capacity(points.len() * 3);
        for p in points {
            let s = (self.0)(*p);
            d.push(F::lit(s.gamma));
            c.extend(s.color.iter().map(|&v| F::lit(v)));
        }
        let d = tape.constant(Tensor::new(&[points.len()], d)?);
        let c = tape.constant(Tensor::new(&[points.len(), 3], c)?);
        Ok((d, c))
    }
}

/// One depth per equal-width bin of `[near, far]`: uniform within the bin
/// when `rng` is given, at the bin center otherwise.
pub fn stratified_samples<R: Rng>(near: f64, far: f64, n: usize, rng: Option<&mut R>) -> Vec<f64> {
    let step = (far - near) / n as f64;
    match rng {
        Some(r) => (0..n)
            .map(|i| near + (i as f64 + r.random::<f64>()) * step)
            .collect(),
        None => (0..n).map(|i| near + (i as f64 + 0.5) * step).collect(),
    }
}

/// Inverse-CDF draws from the piecewise-constant density with mass
/// `weights[i]` on `[edges[i], edges[i+1]]`. Falls back to stratified
/// sampling when no weight is positive. Output is sorted.
pub fn importance_samples<R: Rng>(
    edges: &[f64],
    weights: &[f64],
    n: usize,
    rng: Option<&mut R>,
) -> Vec<f64> {
    assert_eq!(edges.len(), weights.len() + 1);
    let (near, far) = (edges[0], edges[edges.len() - 1]);
    let total: f64 = weights.iter().map(|w| w.max(0.0)).sum();
    if !(total > 1e-12) || !total.is_finite() {
        return stratified_samples(near, far, n, rng);
    }
    let mut cdf = Vec::with_capacity(weights.len() + 1);
    cdf.push(0.0);
    let mut acc = 0.0;
    for w in weights {
        acc += w.max(0.0) / total;
        cdf.push(acc);
    }
    let us: Vec<f64> = match rng {
        Some(r) => (0..n)
            .map(|j| (j as f64 + r.random::<f64>()) / n as f64)
            .collect(),
        None => (0..n).map(|j| (j as f64 + 0.5) / n as f64).collect(),
    };
    let mut out = Vec::with_capacity(n);
    let mut k = 0;
    for u in us {
        let u = u.min(acc * (1.0 - 1e-12));
        while k + 1 < weights.len() && cdf[k + 1] <= u {
            k += 1;
        }
        // skip empty bins
        while weights[k] <= 0.0 && k + 1 < weights.len() {
            k += 1;
        }
        let mass = cdf[k + 1] - cdf[k];
        let frac = if mass > 0.0 {
            ((u - cdf[k]) / mass).clamp(0.0, 1.0)
        } else {
            0.5
        };
        out.push(edges[k] + frac * (edges[k + 1] - edges[k]));
    }
    out
}

/// Merges two depth lists and forces strict increase.
pub fn merge_depths(a: &[f64], b: &[f64], near: f64, far: f64) -> Vec<f64> {
    let mut all: Vec<f64> = a.iter().chain(b).copied().collect();
    all.sort_by(|x, y| x.partial_cmp(y).expect("finite depths"));
    let eps = (far - near) * 1e-9;
    for i in 1..all.len() {
        if all[i] <= all[i - 1] {
            all[i] = all[i - 1] + eps;
        }
    }
    all
}

/// Interval lengths for sorted depths inside `[near, far]`.
pub fn segment_lengths(depths: &[f64], near: f64, far: f64) -> Vec<f64> {
    let n = depths.len();
    (0..n)
        .map(|i| {
            let lo = if i == 0 {
                near
            } else {
                0.5 * (depths[i - 1] + depths[i])
            };
            let hi = if i + 1 == n {
                far
            } else {
                0.5 * (depths[i] + depths[i + 1])
            };
            hi - lo
        })
        .collect()
}

/// Samples along one ray with their field values.
#[derive(Clone, Debug, PartialEq)]
pub struct RaySamples {
    depths: Vec<f64>,
    deltas: Vec<f64>,
    values: Vec<FieldSample>,
}

impl RaySamples {
    /// Rejects unsorted depths, non-positive intervals and length mismatches.
    pub fn new(depths: Vec<f64>, deltas: Vec<f64>, values: Vec<FieldSample>) -> Result<Self> {
        if depths.is_empty() || depths.len() != deltas.len() || depths.len() != values.len() {
            return Err(Error::InvalidSamples(
                "depths, deltas and values must have equal non-zero length".into(),
            ));
        }
        if depths.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidSamples(
                "depths must be strictly increasing".into(),
            ));
        }
        if deltas.iter().any(|&d| !(d > 0.0)) {
            return Err(Error::InvalidSamples(
                "segment lengths must be positive".into(),
            ));
        }
        Ok(Self {
            depths,
            deltas,
            values,
        })
    }

    /// Samples with interval lengths derived from `[near, far]`.
    pub fn along(depths: Vec<f64>, near: f64, far: f64, values: Vec<FieldSample>) -> Result<Self> {
        let deltas = segment_lengths(&depths, near, far);
        Self::new(depths, deltas, values)
    }

    pub fn depths(&self) -> &[f64] {
        &self.depths
    }

    pub fn deltas(&self) -> &[f64] {
        &self.deltas
    }
}

/// Composited pixel.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Composite {
    pub rgb: [f64; 3],
    pub depth: f64,
    pub opacity: f64,
}

/// Alpha compositing of one ray in `f64`. `ray` is only used in errors.
pub fn composite(
    samples: &RaySamples,
    background: [f64; 3],
    far: f64,
    ray: usize,
) -> Result<(Composite, Vec<f64>)> {
    let mut trans = 1.0;
    let mut weights = Vec::with_capacity(samples.depths.len());
    let mut rgb = [0.0; 3];
    let mut depth = 0.0;
    for ((s, &d), &t) in samples
        .values
        .iter()
        .zip(&samples.deltas)
        .zip(&samples.depths)
    {
        if !s.gamma.is_finite() {
            return Err(Error::NonFiniteDensity { ray });
        }
        let alpha = 1.0 - libm::exp(-s.gamma * d);
        let w = trans * alpha;
        trans *= 1.0 - alpha;
        for (c, v) in rgb.iter_mut().zip(s.color) {
            *c += w * v;
        }
        depth += w * t;
        weights.push(w);
    }
    let opacity = 1.0 - trans;
    for (c, b) in rgb.iter_mut().zip(background) {
        *c += (1.0 - opacity) * b;
    }
    let depth = if opacity < EMPTY_OPACITY {
        far
    } else {
        depth / opacity.max(1e-10)
    };
    Ok((
        Composite {
            rgb,
            depth,
            opacity,
        },
        weights,
    ))
}

/// Depths chosen for every ray of a camera, `[rays, samples]` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplePlan {
    pub rays: Vec<Ray>,
    pub depths: Vec<f64>,
    pub samples: usize,
}

impl SamplePlan {
    pub fn points(&self) -> Vec<Vec3> {
        let mut pts = Vec::with_capacity(self.depths.len());
        for (r, ray) in self.rays.iter().enumerate() {
            for &t in &self.depths[r * self.samples..(r + 1) * self.samples] {
                pts.push(ray.at(t));
            }
        }
        pts
    }

    pub fn deltas<F: Real>(&self) -> Tensor<F> {
        let mut d = Vec::with_capacity(self.depths.len());
        for (r, ray) in self.rays.iter().enumerate() {
            let seg = segment_lengths(
                &self.depths[r * self.samples..(r + 1) * self.samples],
                ray.near,
                ray.far,
            );
            d.extend(seg.into_iter().map(F::lit));
        }
        Tensor::new(&[self.rays.len(), self.samples], d).expect("sized")
    }
}

fn check_density<F: Real>(tape: &Tape<F>, density: Var, samples: usize, res: usize) -> Result<()> {
    if let Some(i) = tape
        .value(density)
        .data()
        .iter()
        .position(|v| !v.is_finite())
    {
        let ray = i / samples;
        let _ = res;
        return Err(Error::NonFiniteDensity { ray });
    }
    Ok(())
}

/// Coarse pass: chooses all sample depths without recording gradients.
pub fn plan_samples<F: Real>(
    field: &dyn Field<F>,
    tape: &mut Tape<F>,
    cam: &Camera,
    cfg: &RenderConfig,
    seed: u64,
) -> Result<SamplePlan> {
    cfg.validate()?;
    let rays = cam.rays();
    let nc = cfg.n_coarse;
    let mut rngs: Vec<_> = (0..rays.len())
        .map(|i| rng::stream(seed, i as u64))
        .collect();
    let mut coarse = Vec::with_capacity(rays.len() * nc);
    for (ray, r) in rays.iter().zip(rngs.iter_mut()) {
        coarse.extend(stratified_samples(
            ray.near,
            ray.far,
            nc,
            cfg.stochastic.then_some(r),
        ));
    }
    if cfg.n_fine == 0 {
        return Ok(SamplePlan {
            rays,
            depths: coarse,
            samples: nc,
        });
    }
    let coarse_plan = SamplePlan {
        rays,
        depths: coarse,
        samples: nc,
    };
    let mark = tape.len();
    let weights: Vec<f64> = tape.no_grad(|t| -> Result<Vec<f64>> {
        let (density, _) = field.query(t, &coarse_plan.points())?;
        check_density(t, density, nc, cam.resolution)?;
        let density = t.reshape(density, &[coarse_plan.rays.len(), nc])?;
        let w = t.composite_weights(density, coarse_plan.deltas())?;
        Ok(t.value(w).data().iter().map(|v| v.as_f64()).collect())
    })?;
    tape.truncate(mark);
    let s = cfg.samples_per_ray();
    let mut depths = Vec::with_capacity(coarse_plan.rays.len() * s);
    for (i, (ray, r)) in coarse_plan.rays.iter().zip(rngs.iter_mut()).enumerate() {
        let step = (ray.far - ray.near) / nc as f64;
        let edges: Vec<f64> = (0..=nc).map(|k| ray.near + k as f64 * step).collect();
        let fine = importance_samples(
            &edges,
            &weights[i * nc..(i + 1) * nc],
            cfg.n_fine,
            cfg.stochastic.then_some(r),
        );
        depths.extend(merge_depths(
            &coarse_plan.depths[i * nc..(i + 1) * nc],
            &fine,
            ray.near,
            ray.far,
        ));
    }
    Ok(SamplePlan {
        rays: coarse_plan.rays,
        depths,
        samples: s,
    })
}

/// Differentiable render result. `rgb` is `[rays, 3]` in `[0, 1]`.
#[derive(Clone, Debug)]
pub struct RenderVars {
    pub rgb: Var,
    pub weights: Var,
    pub depth: Vec<f64>,
    pub opacity: Vec<f64>,
}

/// Fine pass over fixed depths.
pub fn render_with_plan<F: Real>(
    field: &dyn Field<F>,
    tape: &mut Tape<F>,
    plan: &SamplePlan,
    cfg: &RenderConfig,
) -> Result<RenderVars> {
    let (r, s) = (plan.rays.len(), plan.samples);
    let (density, color) = field.query(tape, &plan.points())?;
    check_density(tape, density, s, 0)?;
    let density = tape.reshape(density, &[r, s])?;
    let color = tape.reshape(color, &[r, s, 3])?;
    let w = tape.composite_weights(density, plan.deltas())?;
    let w3 = tape.reshape(w, &[r, s, 1])?;
    let wc = tape.mul(w3, color)?;
    let rgb = tape.sum_axis(wc, 1)?;
    let wsum = tape.sum_axis(w, 1)?;
    let rest = tape.neg(wsum)?;
    let rest = tape.add_scalar(rest, F::one())?;
    let rest = tape.reshape(rest, &[r, 1])?;
    let bg = tape.constant(Tensor::new(
        &[3],
        cfg.background.iter().map(|&v| F::lit(v)).collect(),
    )?);
    let bgc = tape.mul(rest, bg)?;
    let rgb = tape.add(rgb, bgc)?;

    let wv = tape.value(w).data();
    let mut depth = Vec::with_capacity(r);
    let mut opacity = Vec::with_capacity(r);
    for (i, ray) in plan.rays.iter().enumerate() {
        let ws = &wv[i * s..(i + 1) * s];
        let ts = &plan.depths[i * s..(i + 1) * s];
        let op = ws.iter().map(|v| v.as_f64()).sum::<f64>().min(1.0);
        let d: f64 = ws.iter().zip(ts).map(|(w, t)| w.as_f64() * t).sum();
        opacity.push(op);
        depth.push(if op < EMPTY_OPACITY {
            ray.far
        } else {
            d / op.max(1e-10)
        });
    }
    Ok(RenderVars {
        rgb,
        weights: w,
        depth,
        opacity,
    })
}

/// Coarse plus fine pass for every pixel of `cam`. Ray `k` draws from random
/// stream `k` of `seed`.
pub fn render<F: Real>(
    field: &dyn Field<F>,
    tape: &mut Tape<F>,
    cam: &Camera,
    cfg: &RenderConfig,
    seed: u64,
) -> Result<RenderVars> {
    let plan = plan_samples(field, tape, cam, cfg, seed)?;
    render_with_plan(field, tape, &plan, cfg)
}

/// Rendered images. `rgb` is channel-first `[3, M, M]` in `[0, 1]`; depth and
/// opacity are `[M, M]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderOutput<F> {
    pub rgb: Tensor<F>,
    pub depth: Tensor<f64>,
    pub opacity: Tensor<f64>,
}

/// `[M*M, 3]` pixel-major colors to a `[3, M, M]` image.
pub fn pixels_to_image<F: Real>(pixels: &Tensor<F>, res: usize) -> Tensor<F> {
    let p = pixels.data();
    let mut out = vec![F::zero(); 3 * res * res];
    for i in 0..res * res {
        for c in 0..3 {
            out[c * res * res + i] = p[i * 3 + c];
        }
    }
    Tensor::new(&[3, res, res], out).expect("sized")
}

/// `[3, M, M]` image to `[M*M, 3]` pixel-major colors.
pub fn image_to_pixels<F: Real>(img: &Tensor<F>) -> Tensor<F> {
    let res = img.shape()[1];
    let d = img.data();
    let mut out = vec![F::zero(); 3 * res * res];
    for i in 0..res * res {
        for c in 0..3 {
            out[i * 3 + c] = d[c * res * res + i];
        }
    }
    Tensor::new(&[res * res, 3], out).expect("sized")
}

impl<F: Real> RenderOutput<F> {
    pub fn from_vars(tape: &Tape<F>, vars: &RenderVars, res: usize) -> Self {
        Self {
            rgb: pixels_to_image(tape.value(vars.rgb), res),
            depth: Tensor::new(&[res, res], vars.depth.clone()).expect("sized"),
            opacity: Tensor::new(&[res, res], vars.opacity.clone()).expect("sized"),
        }
    }
}

/// Renders without recording gradients.
pub fn render_image<F: Real>(
    field: &dyn Field<F>,
    tape: &mut Tape<F>,
    cam: &Camera,
    cfg: &RenderConfig,
    seed: u64,
) -> Result<RenderOutput<F>> {
    let mark = tape.len();
    let out = tape.no_grad(|t| -> Result<RenderOutput<F>> {
        let v = render(field, t, cam, cfg, seed)?;
        Ok(RenderOutput::from_vars(t, &v, cam.resolution))
    })?;
    tape.truncate(mark);
    Ok(out)
}
