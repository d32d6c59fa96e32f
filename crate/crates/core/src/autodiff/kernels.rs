//! Forward and adjoint kernels for the structured operations.

use alloc::vec;
use alloc::vec::Vec;

use crate::tensor::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UpsampleMode {
    Nearest,
    /// Half-pixel centers, edge-clamped.
    Bilinear,
}

#[derive(Clone, Copy, Debug)]
pub struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub hout: usize,
    pub wout: usize,
}

impl ConvGeom {
    pub fn new(
        cin: usize,
        h: usize,
        w: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        padding: usize,
    ) -> Option<Self> {
        if stride == 0 || h + 2 * padding < kh || w + 2 * padding < kw {
            return None;
        }
        Some(Self {
            cin,
            h,
            w,
            kh,
            kw,
            stride,
            padding,
            hout: (h + 2 * padding - kh) / stride + 1,
            wout: (w + 2 * padding - kw) / stride + 1,
        })
    }

    pub fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    pub fn hw_out(&self) -> usize {
        self.hout * self.wout
    }
}

/// Unfolds one image `[cin, h, w]` into `[cin*kh*kw, hout*wout]`.
pub fn im2col<F: Real>(x: &[F], g: &ConvGeom, cols: &mut [F]) {
    let hw = g.hw_out();
    for c in 0..g.cin {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                for oi in 0..g.hout {
                    let ii = (oi * g.stride + ki) as isize - g.padding as isize;
                    let line = &mut dst[oi * g.wout..(oi + 1) * g.wout];
                    if ii < 0 || ii >= g.h as isize {
                        line.fill(F::zero());
                        continue;
                    }
                    let src = &x[(c * g.h + ii as usize) * g.w..(c * g.h + ii as usize + 1) * g.w];
                    for (oj, v) in line.iter_mut().enumerate() {
                        let jj = (oj * g.stride + kj) as isize - g.padding as isize;
                        *v = if jj < 0 || jj >= g.w as isize {
                            F::zero()
                        } else {
                            src[jj as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates columns back into an image.
pub fn col2im<F: Real>(cols: &[F], g: &ConvGeom, x: &mut [F]) {
    let hw = g.hw_out();
    for c in 0..g.cin {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * hw..(row + 1) * hw];
                for oi in 0..g.hout {
                    let ii = (oi * g.stride + ki) as isize - g.padding as isize;
                    if ii < 0 || ii >= g.h as isize {
                        continue;
                    }
                    let base = (c * g.h + ii as usize) * g.w;
                    for oj in 0..g.wout {
                        let jj = (oj * g.stride + kj) as isize - g.padding as isize;
                        if jj >= 0 && (jj as usize) < g.w {
                            x[base + jj as usize] += src[oi * g.wout + oj];
                        }
                    }
                }
            }
        }
    }
}

/// `out[b] = weight @ im2col(x[b])` for a batch of images.
pub fn conv2d_forward<F: Real>(
    x: &[F],
    batch: usize,
    weight: &[F],
    cout: usize,
    g: &ConvGeom,
) -> Vec<F> {
    let (k, hw) = (g.k(), g.hw_out());
    let in_sz = g.cin * g.h * g.w;
    let mut out = vec![F::zero(); batch * cout * hw];
    let mut cols = vec![F::zero(); k * hw];
    for b in 0..batch {
        im2col(&x[b * in_sz..(b + 1) * in_sz], g, &mut cols);
        F::gemm(
            cout,
            k,
            hw,
            F::one(),
            weight,
            k as isize,
            1,
            &cols,
            hw as isize,
            1,
            F::zero(),
            &mut out[b * cout * hw..(b + 1) * cout * hw],
            hw as isize,
            1,
        );
    }
    out
}

/// Returns (grad_input, grad_weight).
pub fn conv2d_backward<F: Real>(
    x: &[F],
    batch: usize,
    weight: &[F],
    cout: usize,
    g: &ConvGeom,
    gout: &[F],
    need_input: bool,
    need_weight: bool,
) -> (Vec<F>, Vec<F>) {
    let (k, hw) = (g.k(), g.hw_out());
    let in_sz = g.cin * g.h * g.w;
    let mut gx = if need_input {
        vec![F::zero(); batch * in_sz]
    } else {
        Vec::new()
    };
    let mut gw = if need_weight {
        vec![F::zero(); cout * k]
    } else {
        Vec::new()
    };
    let mut cols = vec![F::zero(); k * hw];
    for b in 0..batch {
        let gb = &gout[b * cout * hw..(b + 1) * cout * hw];
        if need_weight {
            im2col(&x[b * in_sz..(b + 1) * in_sz], g, &mut cols);
            // gw += gb [cout, hw] @ cols^T [hw, k]
            F::gemm(
                cout,
                hw,
                k,
                F::one(),
                gb,
                hw as isize,
                1,
                &cols,
                1,
                hw as isize,
                F::one(),
                &mut gw,
                k as isize,
                1,
            );
        }
        if need_input {
            // gcols = weight^T [k, cout] @ gb [cout, hw]
            F::gemm(
                k,
                cout,
                hw,
                F::one(),
                weight,
                1,
                k as isize,
                gb,
                hw as isize,
                1,
                F::zero(),
                &mut cols,
                hw as isize,
                1,
            );
            col2im(&cols, g, &mut gx[b * in_sz..(b + 1) * in_sz]);
        }
    }
    (gx, gw)
}

fn bilinear_taps(n_in: usize, factor: usize) -> Vec<(usize, usize, f64)> {
    (0..n_in * factor)
        .map(|o| {
            let src = ((o as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
            let i0 = (libm::floor(src) as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Integer-factor upsampling of `[planes, h, w]`.
pub fn upsample_forward<F: Real>(
    x: &[F],
    planes: usize,
    h: usize,
    w: usize,
    factor: usize,
    mode: UpsampleMode,
) -> Vec<F> {
    let (ho, wo) = (h * factor, w * factor);
    let mut out = vec![F::zero(); planes * ho * wo];
    match mode {
        UpsampleMode::Nearest => {
            for p in 0..planes {
                for i in 0..ho {
                    for j in 0..wo {
                        out[(p * ho + i) * wo + j] = x[(p * h + i / factor) * w + j / factor];
                    }
                }
            }
        }
        UpsampleMode::Bilinear => {
            let ty = bilinear_taps(h, factor);
            let tx = bilinear_taps(w, factor);
            for p in 0..planes {
                let src = &x[p * h * w..(p + 1) * h * w];
                for (i, &(y0, y1, fy)) in ty.iter().enumerate() {
                    let fy = F::lit(fy);
                    for (j, &(x0, x1, fx)) in tx.iter().enumerate() {
                        let fx = F::lit(fx);
                        let top = src[y0 * w + x0] * (F::one() - fx) + src[y0 * w + x1] * fx;
                        let bot = src[y1 * w + x0] * (F::one() - fx) + src[y1 * w + x1] * fx;
                        out[(p * ho + i) * wo + j] = top * (F::one() - fy) + bot * fy;
                    }
                }
            }
        }
    }
    out
}

pub fn upsample_backward<F: Real>(
    gout: &[F],
    planes: usize,
    h: usize,
    w: usize,
    factor: usize,
    mode: UpsampleMode,
) -> Vec<F> {
    let (ho, wo) = (h * factor, w * factor);
    let mut gx = vec![F::zero(); planes * h * w];
    match mode {
        UpsampleMode::Nearest => {
            for p in 0..planes {
                for i in 0..ho {
                    for j in 0..wo {
                        gx[(p * h + i / factor) * w + j / factor] += gout[(p * ho + i) * wo + j];
                    }
                }
            }
        }
        UpsampleMode::Bilinear => {
            let ty = bilinear_taps(h, factor);
            let tx = bilinear_taps(w, factor);
            for p in 0..planes {
                let dst = &mut gx[p * h * w..(p + 1) * h * w];
                for (i, &(y0, y1, fy)) in ty.iter().enumerate() {
                    let fy = F::lit(fy);
                    for (j, &(x0, x1, fx)) in tx.iter().enumerate() {
                        let fx = F::lit(fx);
                        let g = gout[(p * ho + i) * wo + j];
                        dst[y0 * w + x0] += g * (F::one() - fy) * (F::one() - fx);
                        dst[y0 * w + x1] += g * (F::one() - fy) * fx;
                        dst[y1 * w + x0] += g * fy * (F::one() - fx);
                        dst[y1 * w + x1] += g * fy * fx;
                    }
                }
            }
        }
    }
    gx
}

/// Bilinear tap for one normalized coordinate pair with corner-aligned
/// sampling: `-1` maps to the first texel center, `+1` to the last. Returns
/// `None` outside `[-1, 1]^2`.
#[derive(Clone, Copy, Debug)]
pub struct GridTap<F> {
    pub x0: usize,
    pub x1: usize,
    pub y0: usize,
    pub y1: usize,
    pub fx: F,
    pub fy: F,
}

pub fn grid_tap<F: Real>(u: F, v: F, h: usize, w: usize) -> Option<GridTap<F>> {
    let one = F::one();
    if !(u >= -one && u <= one && v >= -one && v <= one) {
        return None;
    }
    let half = F::lit(0.5);
    let axis = |c: F, n: usize| -> (usize, usize, F) {
        if n == 1 {
            return (0, 0, F::zero());
        }
        let pos = (c + one) * half * F::from_usize(n - 1).unwrap();
        let i0 = pos.floor().to_usize().unwrap_or(0).min(n - 2);
        (i0, i0 + 1, pos - F::from_usize(i0).unwrap())
    };
    let (x0, x1, fx) = axis(u, w);
    let (y0, y1, fy) = axis(v, h);
    Some(GridTap {
        x0,
        x1,
        y0,
        y1,
        fx,
        fy,
    })
}

/// Samples `[c, h, w]` at `coords` (`[p, 2]`, `(u, v)` with `u` along the
/// width) producing `[p, c]`.
pub fn grid_sample_forward<F: Real>(
    input: &[F],
    c: usize,
    h: usize,
    w: usize,
    coords: &[F],
) -> Vec<F> {
    // channel-last copy so each tap reads a contiguous feature vector
    let mut hwc = vec![F::zero(); h * w * c];
    for ch in 0..c {
        for s in 0..h * w {
            hwc[s * c + ch] = input[ch * h * w + s];
        }
    }
    let p = coords.len() / 2;
    let mut out = vec![F::zero(); p * c];
    let one = F::one();
    for i in 0..p {
        let Some(t) = grid_tap(coords[2 * i], coords[2 * i + 1], h, w) else {
            continue;
        };
        let wts = [
            (t.y0 * w + t.x0, (one - t.fy) * (one - t.fx)),
            (t.y0 * w + t.x1, (one - t.fy) * t.fx),
            (t.y1 * w + t.x0, t.fy * (one - t.fx)),
            (t.y1 * w + t.x1, t.fy * t.fx),
        ];
        let dst = &mut out[i * c..(i + 1) * c];
        for (s, wt) in wts {
            if wt == F::zero() {
                continue;
            }
            let src = &hwc[s * c..(s + 1) * c];
            for (d, &v) in dst.iter_mut().zip(src) {
                *d += wt * v;
            }
        }
    }
    out
}

pub fn grid_sample_backward<F: Real>(
    gout: &[F],
    c: usize,
    h: usize,
    w: usize,
    coords: &[F],
) -> Vec<F> {
    let mut ghwc = vec![F::zero(); h * w * c];
    let p = coords.len() / 2;
    let one = F::one();
    for i in 0..p {
        let Some(t) = grid_tap(coords[2 * i], coords[2 * i + 1], h, w) else {
            continue;
        };
        let wts = [
            (t.y0 * w + t.x0, (one - t.fy) * (one - t.fx)),
            (t.y0 * w + t.x1, (one - t.fy) * t.fx),
            (t.y1 * w + t.x0, t.fy * (one - t.fx)),
            (t.y1 * w + t.x1, t.fy * t.fx),
        ];
        let src = &gout[i * c..(i + 1) * c];
        for (s, wt) in wts {
            if wt == F::zero() {
                continue;
            }
            let dst = &mut ghwc[s * c..(s + 1) * c];
            for (d, &g) in dst.iter_mut().zip(src) {
                *d += wt * g;
            }
        }
    }
    let mut gx = vec![F::zero(); c * h * w];
    for ch in 0..c {
        for s in 0..h * w {
            gx[ch * h * w + s] = ghwc[s * c + ch];
        }
    }
    gx
}

/// Group normalization over `[batch, channels, spatial]` with a per-channel
/// affine map. Returns (output, mean, rstd) with statistics per (batch, group).
pub fn group_norm_forward<F: Real>(
    x: &[F],
    batch: usize,
    channels: usize,
    spatial: usize,
    groups: usize,
    gamma: &[F],
    beta: &[F],
    eps: F,
) -> (Vec<F>, Vec<F>, Vec<F>) {
    let cpg = channels / groups;
    let n = F::from_usize(cpg * spatial).unwrap();
    let mut out = vec![F::zero(); x.len()];
    let mut means = Vec::with_capacity(batch * groups);
    let mut rstds = Vec::with_capacity(batch * groups);
    for b in 0..batch {
        for g in 0..groups {
            let start = (b * channels + g * cpg) * spatial;
            let seg = &x[start..start + cpg * spatial];
            let mean = seg.iter().copied().sum::<F>() / n;
            let var = seg.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / n;
            let rstd = F::one() / (var + eps).sqrt();
            for ci in 0..cpg {
                let ch = g * cpg + ci;
                let base = start + ci * spatial;
                for s in 0..spatial {
                    out[base + s] = (x[base + s] - mean) * rstd * gamma[ch] + beta[ch];
                }
            }
            means.push(mean);
            rstds.push(rstd);
        }
    }
    (out, means, rstds)
}

/// Returns (grad_x, grad_gamma, grad_beta).
#[allow(clippy::too_many_arguments)]
pub fn group_norm_backward<F: Real>(
    x: &[F],
    batch: usize,
    channels: usize,
    spatial: usize,
    groups: usize,
    gamma: &[F],
    means: &[F],
    rstds: &[F],
    gout: &[F],
) -> (Vec<F>, Vec<F>, Vec<F>) {
    let cpg = channels / groups;
    let n = F::from_usize(cpg * spatial).unwrap();
    let mut gx = vec![F::zero(); x.len()];
    let mut ggamma = vec![F::zero(); channels];
    let mut gbeta = vec![F::zero(); channels];
    for b in 0..batch {
        for g in 0..groups {
            let (mean, rstd) = (means[b * groups + g], rstds[b * groups + g]);
            let start = (b * channels + g * cpg) * spatial;
            let mut sum_gxh = F::zero();
            let mut sum_gxh_xh = F::zero();
            for ci in 0..cpg {
                let ch = g * cpg + ci;
                let base = start + ci * spatial;
                for s in 0..spatial {
                    let xh = (x[base + s] - mean) * rstd;
                    let go = gout[base + s];
                    gbeta[ch] += go;
                    ggamma[ch] += go * xh;
                    let gxh = go * gamma[ch];
                    sum_gxh += gxh;
                    sum_gxh_xh += gxh * xh;
                }
            }
            let (m1, m2) = (sum_gxh / n, sum_gxh_xh / n);
            for ci in 0..cpg {
                let ch = g * cpg + ci;
                let base = start + ci * spatial;
                for s in 0..spatial {
                    let xh = (x[base + s] - mean) * rstd;
                    let gxh = gout[base + s] * gamma[ch];
                    gx[base + s] = rstd * (gxh - m1 - xh * m2);
                }
            }
        }
    }
    (gx, ggamma, gbeta)
}

/// Volume-rendering weights `w_i = T_i (1 - exp(-d_i * delta_i))` along the
/// last axis of `[rays, samples]`.
pub fn composite_weights_forward<F: Real>(density: &[F], deltas: &[F], samples: usize) -> Vec<F> {
    let mut w = vec![F::zero(); density.len()];
    for r in 0..density.len() / samples {
        let mut trans = F::one();
        for i in 0..samples {
            let k = r * samples + i;
            let tau = density[k] * deltas[k];
            let alpha = -tau.neg().exp_m1();
            w[k] = trans * alpha;
            trans = trans * (-tau).exp();
        }
    }
    w
}

pub fn composite_weights_backward<F: Real>(
    density: &[F],
    deltas: &[F],
    weights: &[F],
    samples: usize,
    gout: &[F],
) -> Vec<F> {
    let mut gd = vec![F::zero(); density.len()];
    for r in 0..density.len() / samples {
        // dL/dtau_k = g_k * E_k - sum_{i>k} g_i w_i, with E_k the transmittance after sample k
        let mut trans = vec![F::one(); samples];
        let mut acc = F::one();
        for i in 0..samples {
            let k = r * samples + i;
            acc = acc * (-(density[k] * deltas[k])).exp();
            trans[i] = acc;
        }
        let mut suffix = F::zero();
        for i in (0..samples).rev() {
            let k = r * samples + i;
            let dtau = gout[k] * trans[i] - suffix;
            gd[k] = dtau * deltas[k];
            suffix += gout[k] * weights[k];
        }
    }
    gd
}
