//! Triplane features, positional embedding and the point decoder.
//!
//! The three planes are stored stacked as one `[3, n_f, N, N]` tensor in the
//! order XY, XZ, YZ. A world point `p` is looked up on plane XY at `(x, y)`,
//! on XZ at `(x, z)` and on YZ at `(y, z)`, each divided by the extent so the
//! plane covers `[-extent, extent]^2`. The first coordinate runs along the
//! plane's width, the second along its height.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::camera::Vec3;
use crate::error::{Error, Result};
use crate::params::{Bound, ParamStore};
use crate::tensor::{Real, Tensor};

pub const PLANE_AXES: [(usize, usize); 3] = [(0, 1), (0, 2), (1, 2)];

/// Decoder and lookup hyper-parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FieldConfig {
    /// Channels per plane (and of the summed feature).
    pub n_f: usize,
    /// Triplane resolution `N`.
    pub resolution: usize,
    pub n_freq: usize,
    pub hidden: usize,
    /// World half-width covered by the planes.
    pub extent: f64,
}

impl Default for FieldConfig {
    fn default() -> Self {
        Self {
            n_f: 32,
            resolution: 32,
            n_freq: 6,
            hidden: 64,
            extent: 1.5,
        }
    }
}

impl FieldConfig {
    pub fn embedding_dim(&self) -> usize {
        embedding_dim(self.n_freq)
    }

    pub fn decoder_input(&self) -> usize {
        self.n_f + self.embedding_dim()
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_f == 0 || self.resolution == 0 || self.hidden == 0 || !(self.extent > 0.0) {
            return Err(Error::InvalidConfig(
                "field needs n_f, N, hidden > 0 and extent > 0".into(),
            ));
        }
        Ok(())
    }
}

/// Three feature planes plus the world extent they cover.
#[derive(Clone, Debug, PartialEq)]
pub struct Triplane<F> {
    /// `[3, n_f, N, N]`.
    pub planes: Tensor<F>,
    pub extent: f64,
}

impl<F: Real> Triplane<F> {
    pub fn new(planes: Tensor<F>, extent: f64) -> Result<Self> {
        let s = planes.shape();
        if s.len() != 4 || s[0] != 3 || s[2] != s[3] || !(extent > 0.0) {
            return Err(Error::ShapeMismatch {
                op: "triplane",
                expected: alloc::vec![3, 0, 0, 0],
                actual: s.to_vec(),
            });
        }
        Ok(Self { planes, extent })
    }

    pub fn n_f(&self) -> usize {
        self.planes.shape()[1]
    }

    pub fn resolution(&self) -> usize {
        self.planes.shape()[2]
    }

    /// Summed bilinear features at `p` (length `n_f`).
    pub fn sample(&self, p: Vec3) -> Vec<F> {
        let (c, n) = (self.n_f(), self.resolution());
        let mut out = alloc::vec![F::zero(); c];
        let one = F::one();
        for (k, &(a, b)) in PLANE_AXES.iter().enumerate() {
            let u = F::lit(p[a] / self.extent);
            let v = F::lit(p[b] / self.extent);
            let Some(t) = crate::autodiff::kernels::grid_tap(u, v, n, n) else {
                continue;
            };
            let plane = &self.planes.data()[k * c * n * n..(k + 1) * c * n * n];
            for (ch, o) in out.iter_mut().enumerate() {
                let m = &plane[ch * n * n..(ch + 1) * n * n];
                *o += m[t.y0 * n + t.x0] * (one - t.fy) * (one - t.fx)
                    + m[t.y0 * n + t.x1] * (one - t.fy) * t.fx
                    + m[t.y1 * n + t.x0] * t.fy * (one - t.fx)
                    + m[t.y1 * n + t.x1] * t.fy * t.fx;
            }
        }
        out
    }
}

/// Normalized per-plane lookup coordinates, one `[P, 2]` tensor per plane.
pub fn plane_coords<F: Real>(points: &[Vec3], extent: f64) -> [Tensor<F>; 3] {
    let make = |(a, b): (usize, usize)| {
        let mut d = Vec::with_capacity(points.len() * 2);
        for p in points {
            d.push(F::lit(p[a] / extent));
            d.push(F::lit(p[b] / extent));
        }
        Tensor::new(&[points.len(), 2], d).expect("sized")
    };
    [
        make(PLANE_AXES[0]),
        make(PLANE_AXES[1]),
        make(PLANE_AXES[2]),
    ]
}

/// Differentiable lookup: `planes` is a `[3, n_f, N, N]` (or `[3 n_f, N, N]`)
/// tape value; returns `[P, n_f]`.
pub fn sample_triplane_var<F: Real>(
    tape: &mut Tape<F>,
    planes: Var,
    n_f: usize,
    points: &[Vec3],
    extent: f64,
) -> Result<Var> {
    let s = tape.shape(planes).to_vec();
    let n = s[s.len() - 1];
    let flat = tape.reshape(planes, &[3 * n_f, n, n])?;
    let coords = plane_coords::<F>(points, extent);
    let mut acc: Option<Var> = None;
    for (k, c) in coords.into_iter().enumerate() {
        let plane = tape.slice(flat, 0, k * n_f, (k + 1) * n_f)?;
        let f = tape.grid_sample(plane, c)?;
        acc = Some(match acc {
            None => f,
            Some(a) => tape.add(a, f)?,
        });
    }
    Ok(acc.expect("three planes"))
}

pub fn embedding_dim(n_freq: usize) -> usize {
    6 * n_freq + 3
}

/// `[x, y, z, sin(f0 x), sin(f0 y), sin(f0 z), cos(f0 x), cos(f0 y), cos(f0 z), ...]`
/// with octave frequencies `f_k = 2^k`.
pub fn positional_embedding(p: Vec3, n_freq: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(embedding_dim(n_freq));
    out.extend_from_slice(&p);
    for k in 0..n_freq {
        let f = (1u64 << k) as f64;
        for &c in &p {
            out.push(libm::sin(f * c));
        }
        for &c in &p {
            out.push(libm::cos(f * c));
        }
    }
    out
}

pub fn embedding_tensor<F: Real>(points: &[Vec3], n_freq: usize) -> Tensor<F> {
    let e = embedding_dim(n_freq);
    let mut d = Vec::with_capacity(points.len() * e);
    for p in points {
        d.extend(positional_embedding(*p, n_freq).into_iter().map(F::lit));
    }
    Tensor::new(&[points.len(), e], d).expect("sized")
}

/// Density (per world unit) and color at a point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FieldSample {
    pub gamma: f64,
    pub color: [f64; 3],
}

/// Inserts the decoder weights under `prefix`.
pub fn init_decoder<F: Real>(
    store: &mut ParamStore<F>,
    rng: &mut impl Rng,
    prefix: &str,
    cfg: &FieldConfig,
) {
    let input = cfg.decoder_input();
    store.insert_uniform(rng, &format!("{prefix}.w1"), &[input, cfg.hidden], input);
    store.insert(&format!("{prefix}.b1"), Tensor::zeros(&[cfg.hidden]));
    store.insert_uniform(rng, &format!("{prefix}.w2"), &[cfg.hidden, 4], cfg.hidden);
    store.insert(&format!("{prefix}.b2"), Tensor::zeros(&[4]));
}

/// Decoder weights bound to a tape.
#[derive(Clone, Copy, Debug)]
pub struct DecoderVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl DecoderVars {
    pub fn from_bound(bound: &Bound<'_>, prefix: &str) -> Self {
        Self {
            w1: bound.var(&format!("{prefix}.w1")),
            b1: bound.var(&format!("{prefix}.b1")),
            w2: bound.var(&format!("{prefix}.w2")),
            b2: bound.var(&format!("{prefix}.b2")),
        }
    }

    /// Two-layer MLP on `[features | embedding]`; returns density `[P]`
    /// (softplus) and color `[P, 3]` (sigmoid).
    pub fn decode<F: Real>(
        &self,
        tape: &mut Tape<F>,
        features: Var,
        embedding: Var,
    ) -> Result<(Var, Var)> {
        let expect = tape.shape(self.w1)[0];
        let h = tape.concat(&[features, embedding], 1)?;
        if tape.shape(h)[1] != expect {
            return Err(Error::ShapeMismatch {
                op: "decode",
                expected: alloc::vec![expect],
                actual: alloc::vec![tape.shape(h)[1]],
            });
        }
        let p = tape.shape(h)[0];
        let h = tape.matmul(h, self.w1)?;
        let h = tape.add(h, self.b1)?;
        let h = tape.silu(h)?;
        let o = tape.matmul(h, self.w2)?;
        let o = tape.add(o, self.b2)?;
        let d = tape.slice(o, 1, 0, 1)?;
        let d = tape.reshape(d, &[p])?;
        let density = tape.softplus(d)?;
        let c = tape.slice(o, 1, 1, 4)?;
        let color = tape.sigmoid(c)?;
        Ok((density, color))
    }
}

/// Decodes a single point outside of any training graph.
pub fn decode_point<F: Real>(
    store: &ParamStore<F>,
    prefix: &str,
    n_freq: usize,
    p: Vec3,
    feat: &[F],
) -> Result<FieldSample> {
    let mut tape = Tape::inference();
    let bound = store.bind_constant(&mut tape);
    let dec = DecoderVars::from_bound(&bound, prefix);
    let f = tape.constant(Tensor::new(&[1, feat.len()], feat.to_vec())?);
    let e = tape.constant(embedding_tensor(&[p], n_freq));
    let (d, c) = dec.decode(&mut tape, f, e)?;
    let cv = tape.value(c).data();
    Ok(FieldSample {
        gamma: tape.value(d).item().as_f64(),
        color: [cv[0].as_f64(), cv[1].as_f64(), cv[2].as_f64()],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;
    use crate::rng::{normal_tensor, seeded};

    fn random_planes(seed: u64, c: usize, n: usize, scale: f64) -> Triplane<f64> {
        let mut rng = seeded(seed);
        Triplane::new(normal_tensor(&mut rng, &[3, c, n, n]).scale(scale), 1.0).unwrap()
    }

    #[test]
    fn grid_node_sums_stored_features() {
        let tp = random_planes(1, 4, 5, 1.0);
        // grid nodes are at -1, -0.5, 0, 0.5, 1
        let p = [0.5, -0.5, 1.0];
        let f = tp.sample(p);
        let idx = |v: f64| ((v + 1.0) * 2.0).round() as usize;
        let node = |k: usize, ch: usize, u: f64, v: f64| {
            tp.planes.data()[((k * 4 + ch) * 5 + idx(v)) * 5 + idx(u)]
        };
        for (ch, &fv) in f.iter().enumerate() {
            let expect =
                node(0, ch, p[0], p[1]) + node(1, ch, p[0], p[2]) + node(2, ch, p[1], p[2]);
            assert!((fv - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn far_points_have_zero_features() {
        let tp = random_planes(2, 3, 4, 1.0);
        assert!(tp.sample([5.0, -7.0, 9.0]).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn tape_lookup_matches_direct_lookup() {
        let tp = random_planes(3, 3, 6, 1.0);
        let mut rng = seeded(30);
        let pts: Vec<Vec3> = (0..20)
            .map(|_| {
                [
                    rng.random_range(-1.2..1.2),
                    rng.random_range(-1.2..1.2),
                    rng.random_range(-1.2..1.2),
                ]
            })
            .collect();
        let mut tape = Tape::new();
        let pv = tape.constant(tp.planes.clone());
        let f = sample_triplane_var(&mut tape, pv, 3, &pts, 1.0).unwrap();
        for (i, p) in pts.iter().enumerate() {
            let direct = tp.sample(*p);
            for ch in 0..3 {
                assert!((tape.value(f).data()[i * 3 + ch] - direct[ch]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn lookup_gradient_matches_finite_differences() {
        let tp = random_planes(4, 2, 4, 1.0);
        let mut rng = seeded(40);
        let pts: Vec<Vec3> = (0..12)
            .map(|_| {
                [
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                ]
            })
            .collect();
        let report = grad_check(
            |t, p| {
                let f = sample_triplane_var(t, p[0], 2, &pts, 1.0)?;
                let f = t.mul(f, f)?;
                t.sum(f)
            },
            &[tp.planes.clone()],
            1e-3,
            1e-4,
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn lookup_is_continuous_and_linear() {
        let a = random_planes(5, 3, 8, 10.0);
        let b = random_planes(6, 3, 8, 10.0);
        let mut rng = seeded(50);
        for _ in 0..200 {
            let p = [
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            ];
            let q = [p[0] + 1e-6, p[1] - 1e-6, p[2] + 1e-6];
            let (fa, fq) = (a.sample(p), a.sample(q));
            for (x, y) in fa.iter().zip(&fq) {
                assert!((x - y).abs() < 1e-3);
            }
            let sum =
                Triplane::new(a.planes.zip_map(&b.planes, |x, y| x + y).unwrap(), 1.0).unwrap();
            let fb = b.sample(p);
            for ((s, x), y) in sum.sample(p).iter().zip(&fa).zip(&fb) {
                assert!((s - (x + y)).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn embedding_layout() {
        let e = positional_embedding([0.0; 3], 4);
        assert_eq!(e.len(), 27);
        assert_eq!(&e[..3], &[0.0; 3]);
        for k in 0..4 {
            assert_eq!(&e[3 + 6 * k..6 + 6 * k], &[0.0; 3]);
            assert_eq!(&e[6 + 6 * k..9 + 6 * k], &[1.0; 3]);
        }
        assert_eq!(embedding_dim(6), 39);
    }

    #[test]
    fn embedding_periodicity() {
        let p = [0.3, -0.7, 1.1];
        for k in 0..5 {
            let f = (1u64 << k) as f64;
            let period = 2.0 * core::f64::consts::PI / f;
            for axis in 0..3 {
                let mut q = p;
                q[axis] += period;
                let (a, b) = (positional_embedding(p, 5), positional_embedding(q, 5));
                let idx = 3 + 6 * k + axis;
                assert!((a[idx] - b[idx]).abs() < 1e-9);
            }
        }
    }

    fn zero_decoder(cfg: &FieldConfig) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        init_decoder(&mut s, &mut seeded(0), "dec", cfg);
        for t in s.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        s
    }

    #[test]
    fn zero_decoder_output() {
        let cfg = FieldConfig {
            n_f: 4,
            hidden: 8,
            ..FieldConfig::default()
        };
        let s = zero_decoder(&cfg);
        let out = decode_point(&s, "dec", cfg.n_freq, [0.1, 0.2, 0.3], &[0.5; 4]).unwrap();
        assert!((out.gamma - core::f64::consts::LN_2).abs() < 1e-12);
        assert_eq!(out.color, [0.5; 3]);
    }

    #[test]
    fn decoder_rejects_wrong_feature_width() {
        let cfg = FieldConfig {
            n_f: 4,
            hidden: 8,
            ..FieldConfig::default()
        };
        let s = zero_decoder(&cfg);
        assert!(matches!(
            decode_point(&s, "dec", cfg.n_freq, [0.0; 3], &[0.5; 3]),
            Err(Error::ShapeMismatch { op: "decode", .. })
        ));
    }

    #[test]
    fn decoder_is_pure_and_bounded() {
        let cfg = FieldConfig {
            n_f: 4,
            hidden: 8,
            n_freq: 2,
            ..FieldConfig::default()
        };
        let mut s = ParamStore::<f64>::new();
        let mut rng = seeded(70);
        init_decoder(&mut s, &mut rng, "dec", &cfg);
        for t in s.tensors_mut() {
            for v in t.data_mut() {
                *v = rng.random_range(-30.0..30.0);
            }
        }
        for _ in 0..100 {
            let p = [
                rng.random_range(-5.0..5.0),
                rng.random_range(-5.0..5.0),
                rng.random_range(-5.0..5.0),
            ];
            let feat: Vec<f64> = (0..4).map(|_| rng.random_range(-20.0..20.0)).collect();
            let a = decode_point(&s, "dec", 2, p, &feat).unwrap();
            let b = decode_point(&s, "dec", 2, p, &feat).unwrap();
            assert_eq!(a, b);
            assert!(a.gamma >= 0.0);
            assert!(a.color.iter().all(|c| (0.0..=1.0).contains(c)));
        }
    }

    #[test]
    fn density_gradient_wrt_decoder_weights() {
        let cfg = FieldConfig {
            n_f: 3,
            hidden: 5,
            n_freq: 1,
            ..FieldConfig::default()
        };
        let mut s = ParamStore::<f64>::new();
        let mut rng = seeded(80);
        init_decoder(&mut s, &mut rng, "dec", &cfg);
        let feats = normal_tensor::<f64>(&mut rng, &[4, 3]);
        let pts = [
            [0.1, 0.2, 0.3],
            [-0.5, 0.4, 0.0],
            [0.9, -0.9, 0.2],
            [0.0, 0.0, -0.3],
        ];
        let emb = embedding_tensor::<f64>(&pts, 1);
        let report = grad_check(
            |t, p| {
                let dec = DecoderVars {
                    w1: p[0],
                    b1: p[1],
                    w2: p[2],
                    b2: p[3],
                };
                let f = t.constant(feats.clone());
                let e = t.constant(emb.clone());
                let (d, _) = dec.decode(t, f, e)?;
                t.sum(d)
            },
            s.tensors(),
            1e-3,
            1e-4,
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }
}
