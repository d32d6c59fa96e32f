//! U-Net image-to-triplane encoder with timestep conditioning.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::autodiff::kernels::UpsampleMode;
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamStore};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    /// Input resolution `M`.
    pub in_res: usize,
    /// Output resolution `N`; a power-of-two multiple of `M`.
    pub out_res: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    /// Channel width per level; the level count is the encoder depth.
    pub widths: Vec<usize>,
    pub res_blocks: usize,
    pub groups: usize,
    /// Sinusoidal timestep embedding size.
    pub time_dim: usize,
    pub attention: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            in_res: 32,
            out_res: 32,
            in_channels: 3,
            out_channels: 96,
            widths: vec![32, 64, 128],
            res_blocks: 2,
            groups: 8,
            time_dim: 64,
            attention: false,
        }
    }
}

impl EncoderConfig {
    pub fn depth(&self) -> usize {
        self.widths.len()
    }

    /// Number of nearest-upsampling stages appended after the last skip.
    pub fn extra_up(&self) -> usize {
        let mut n = 0;
        let mut r = self.in_res;
        while r < self.out_res {
            r *= 2;
            n += 1;
        }
        n
    }

    fn time_hidden(&self) -> usize {
        self.time_dim * 2
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.widths.is_empty()
            || self.res_blocks == 0
            || self.time_dim < 2
            || self.time_dim % 2 != 0
        {
            return bad(
                "encoder needs at least one level, one residual block and an even timestep size"
                    .into(),
            );
        }
        if self.groups == 0 || self.widths.iter().any(|w| w % self.groups != 0) {
            return bad(format!(
                "group count {} must divide every width {:?}",
                self.groups, self.widths
            ));
        }
        let div = 1usize << (self.depth() - 1);
        if self.in_res == 0 || self.in_res % div != 0 {
            return bad(format!(
                "input resolution {} must be divisible by {div}",
                self.in_res
            ));
        }
        if self.out_res < self.in_res || self.in_res << self.extra_up() != self.out_res {
            return bad(format!(
                "triplane resolution {} must be the input resolution {} times a power of two",
                self.out_res, self.in_res
            ));
        }
        Ok(())
    }
}

/// Sinusoidal embedding `[sin(t f_i).., cos(t f_i)..]` with
/// `f_i = 10000^(-i / (dim / 2))`.
pub fn timestep_embed(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let ln = libm::log(10000.0);
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let f = libm::exp(-ln * i as f64 / half as f64);
        let a = t as f64 * f;
        out[i] = libm::sin(a);
        out[half + i] = libm::cos(a);
    }
    out
}

fn conv_init<F: Real>(
    s: &mut ParamStore<F>,
    rng: &mut impl Rng,
    name: &str,
    cin: usize,
    cout: usize,
    k: usize,
) {
    s.insert_uniform(rng, &format!("{name}.w"), &[cout, cin, k, k], cin * k * k);
    s.insert(&format!("{name}.b"), Tensor::zeros(&[cout]));
}

fn norm_init<F: Real>(s: &mut ParamStore<F>, name: &str, c: usize) {
    s.insert(&format!("{name}.g"), Tensor::ones(&[c]));
    s.insert(&format!("{name}.b"), Tensor::zeros(&[c]));
}

fn linear_init<F: Real>(s: &mut ParamStore<F>, rng: &mut impl Rng, name: &str, i: usize, o: usize) {
    s.insert_uniform(rng, &format!("{name}.w"), &[i, o], i);
    s.insert(&format!("{name}.b"), Tensor::zeros(&[o]));
}

fn res_init<F: Real>(
    s: &mut ParamStore<F>,
    rng: &mut impl Rng,
    name: &str,
    cin: usize,
    cout: usize,
    temb: usize,
) {
    norm_init(s, &format!("{name}.n1"), cin);
    conv_init(s, rng, &format!("{name}.c1"), cin, cout, 3);
    linear_init(s, rng, &format!("{name}.t"), temb, cout);
    norm_init(s, &format!("{name}.n2"), cout);
    conv_init(s, rng, &format!("{name}.c2"), cout, cout, 3);
    if cin != cout {
        conv_init(s, rng, &format!("{name}.skip"), cin, cout, 1);
    }
}

/// Block layout shared by initialization and the forward pass.
enum Block {
    Res {
        name: String,
        cin: usize,
        cout: usize,
    },
    Down {
        name: String,
        c: usize,
    },
    Up {
        name: String,
        c: usize,
    },
    Attn {
        name: String,
        c: usize,
    },
    /// Pops a skip and concatenates it before the next residual block.
    Skip,
    Push,
}

fn layout(cfg: &EncoderConfig) -> Vec<Block> {
    let mut b = Vec::new();
    let w = &cfg.widths;
    let mut skips = vec![w[0]];
    b.push(Block::Push);
    let mut c = w[0];
    for (i, &wi) in w.iter().enumerate() {
        for r in 0..cfg.res_blocks {
            b.push(Block::Res {
                name: format!("down{i}.res{r}"),
                cin: c,
                cout: wi,
            });
            c = wi;
            b.push(Block::Push);
            skips.push(c);
        }
        if i + 1 < w.len() {
            b.push(Block::Down {
                name: format!("down{i}.down"),
                c,
            });
            b.push(Block::Push);
            skips.push(c);
        }
    }
    b.push(Block::Res {
        name: "mid.res0".into(),
        cin: c,
        cout: c,
    });
    if cfg.attention {
        b.push(Block::Attn {
            name: "mid.attn".into(),
            c,
        });
    }
    b.push(Block::Res {
        name: "mid.res1".into(),
        cin: c,
        cout: c,
    });
    for (i, &wi) in w.iter().enumerate().rev() {
        for r in 0..=cfg.res_blocks {
            let sc = skips.pop().expect("balanced skips");
            b.push(Block::Skip);
            b.push(Block::Res {
                name: format!("up{i}.res{r}"),
                cin: c + sc,
                cout: wi,
            });
            c = wi;
        }
        if i > 0 {
            b.push(Block::Up {
                name: format!("up{i}.up"),
                c,
            });
        }
    }
    for k in 0..cfg.extra_up() {
        b.push(Block::Up {
            name: format!("extra{k}.up"),
            c,
        });
        b.push(Block::Res {
            name: format!("extra{k}.res"),
            cin: c,
            cout: c,
        });
    }
    b
}

/// Inserts all encoder weights under `prefix`.
pub fn init_encoder<F: Real>(
    store: &mut ParamStore<F>,
    rng: &mut impl Rng,
    prefix: &str,
    cfg: &EncoderConfig,
) -> Result<()> {
    cfg.validate()?;
    let th = cfg.time_hidden();
    linear_init(store, rng, &format!("{prefix}.time0"), cfg.time_dim, th);
    linear_init(store, rng, &format!("{prefix}.time1"), th, th);
    conv_init(
        store,
        rng,
        &format!("{prefix}.conv_in"),
        cfg.in_channels,
        cfg.widths[0],
        3,
    );
    for block in layout(cfg) {
        match block {
            Block::Res { name, cin, cout } => {
                res_init(store, rng, &format!("{prefix}.{name}"), cin, cout, th)
            }
            Block::Down { name, c } | Block::Up { name, c } => {
                conv_init(store, rng, &format!("{prefix}.{name}"), c, c, 3)
            }
            Block::Attn { name, c } => {
                norm_init(store, &format!("{prefix}.{name}.n"), c);
                for part in ["q", "k", "v", "o"] {
                    conv_init(store, rng, &format!("{prefix}.{name}.{part}"), c, c, 1);
                }
            }
            Block::Skip | Block::Push => {}
        }
    }
    norm_init(store, &format!("{prefix}.out_norm"), cfg.widths[0]);
    conv_init(
        store,
        rng,
        &format!("{prefix}.conv_out"),
        cfg.widths[0],
        cfg.out_channels,
        3,
    );
    Ok(())
}

struct Ctx<'a, 'b, F: Real> {
    tape: &'a mut Tape<F>,
    bound: &'a Bound<'b>,
    prefix: &'a str,
    groups: usize,
}

impl<F: Real> Ctx<'_, '_, F> {
    fn p(&self, name: &str) -> Var {
        self.bound.var(&format!("{}.{name}", self.prefix))
    }

    fn conv(&mut self, x: Var, name: &str, stride: usize) -> Result<Var> {
        let w = self.p(&format!("{name}.w"));
        let b = self.p(&format!("{name}.b"));
        let k = self.tape.shape(w)[2];
        let y = self.tape.conv2d(x, w, stride, k / 2)?;
        let c = self.tape.shape(b)[0];
        let b = self.tape.reshape(b, &[1, c, 1, 1])?;
        self.tape.add(y, b)
    }

    fn norm_act(&mut self, x: Var, name: &str) -> Result<Var> {
        let g = self.p(&format!("{name}.g"));
        let b = self.p(&format!("{name}.b"));
        let y = self.tape.group_norm(x, g, b, self.groups)?;
        self.tape.silu(y)
    }

    fn linear(&mut self, x: Var, name: &str) -> Result<Var> {
        let w = self.p(&format!("{name}.w"));
        let b = self.p(&format!("{name}.b"));
        let y = self.tape.matmul(x, w)?;
        self.tape.add(y, b)
    }

    fn res(&mut self, x: Var, name: &str, temb: Var) -> Result<Var> {
        let h = self.norm_act(x, &format!("{name}.n1"))?;
        let h = self.conv(h, &format!("{name}.c1"), 1)?;
        let t = self.linear(temb, &format!("{name}.t"))?;
        let c = self.tape.shape(t)[1];
        let t = self.tape.reshape(t, &[1, c, 1, 1])?;
        let h = self.tape.add(h, t)?;
        let h = self.norm_act(h, &format!("{name}.n2"))?;
        let h = self.conv(h, &format!("{name}.c2"), 1)?;
        let skip = if self
            .bound
            .try_var(&format!("{}.{name}.skip.w", self.prefix))
            .is_some()
        {
            self.conv(x, &format!("{name}.skip"), 1)?
        } else {
            x
        };
        self.tape.add(skip, h)
    }

    fn attn(&mut self, x: Var, name: &str) -> Result<Var> {
        let s = self.tape.shape(x).to_vec();
        let (c, hw) = (s[1], s[2] * s[3]);
        let g = self.p(&format!("{name}.n.g"));
        let b = self.p(&format!("{name}.n.b"));
        let h = self.tape.group_norm(x, g, b, self.groups)?;
        let q = self.conv(h, &format!("{name}.q"), 1)?;
        let k = self.conv(h, &format!("{name}.k"), 1)?;
        let v = self.conv(h, &format!("{name}.v"), 1)?;
        let q = self.tape.reshape(q, &[c, hw])?;
        let q = self.tape.transpose(q)?;
        let k = self.tape.reshape(k, &[c, hw])?;
        let v = self.tape.reshape(v, &[c, hw])?;
        let v = self.tape.transpose(v)?;
        let scores = self.tape.matmul(q, k)?;
        let scores = self
            .tape
            .mul_scalar(scores, F::lit(1.0 / libm::sqrt(c as f64)))?;
        let a = self.tape.softmax_rows(scores)?;
        let o = self.tape.matmul(a, v)?;
        let o = self.tape.transpose(o)?;
        let o = self.tape.reshape(o, &s)?;
        let o = self.conv(o, &format!("{name}.o"), 1)?;
        self.tape.add(x, o)
    }
}

/// Maps `[1, in_channels, M, M]` and a timestep to `[1, out_channels, N, N]`.
pub fn encoder_forward<F: Real>(
    tape: &mut Tape<F>,
    bound: &Bound<'_>,
    prefix: &str,
    cfg: &EncoderConfig,
    x: Var,
    t: usize,
) -> Result<Var> {
    let expect = [1, cfg.in_channels, cfg.in_res, cfg.in_res];
    if tape.shape(x) != expect {
        return Err(Error::ShapeMismatch {
            op: "encode",
            expected: expect.to_vec(),
            actual: tape.shape(x).to_vec(),
        });
    }
    let emb = Tensor::new(
        &[1, cfg.time_dim],
        timestep_embed(t, cfg.time_dim)
            .into_iter()
            .map(F::lit)
            .collect(),
    )?;
    let emb = tape.constant(emb);
    let mut ctx = Ctx {
        tape,
        bound,
        prefix,
        groups: cfg.groups,
    };
    let temb = ctx.linear(emb, "time0")?;
    let temb = ctx.tape.silu(temb)?;
    let temb = ctx.linear(temb, "time1")?;
    let temb = ctx.tape.silu(temb)?;

    let mut h = ctx.conv(x, "conv_in", 1)?;
    let mut skips = Vec::new();
    let mut pending = false;
    for block in layout(cfg) {
        match block {
            Block::Push => skips.push(h),
            Block::Skip => pending = true,
            Block::Res { name, .. } => {
                if pending {
                    let s = skips.pop().expect("balanced skips");
                    h = ctx.tape.concat(&[h, s], 1)?;
                    pending = false;
                }
                h = ctx.res(h, &name, temb)?;
            }
            Block::Down { name, .. } => h = ctx.conv(h, &name, 2)?,
            Block::Up { name, .. } => {
                h = ctx.tape.upsample(h, 2, UpsampleMode::Nearest)?;
                h = ctx.conv(h, &name, 1)?;
            }
            Block::Attn { name, .. } => h = ctx.attn(h, &name)?,
        }
    }
    let h = ctx.norm_act(h, "out_norm")?;
    ctx.conv(h, "conv_out", 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal_tensor, seeded};

    fn tiny() -> EncoderConfig {
        EncoderConfig {
            in_res: 8,
            out_res: 8,
            in_channels: 3,
            out_channels: 12,
            widths: vec![8, 16],
            res_blocks: 1,
            groups: 4,
            time_dim: 8,
            attention: true,
        }
    }

    #[test]
    fn embedding_at_zero() {
        let e = timestep_embed(0, 64);
        assert!(e[..32].iter().all(|&v| v == 0.0));
        assert!(e[32..].iter().all(|&v| v == 1.0));
    }

    #[test]
    fn embeddings_are_distinct() {
        let all: Vec<_> = (0..=100).map(|t| timestep_embed(t, 64)).collect();
        for i in 0..all.len() {
            for j in i + 1..all.len() {
                let d: f64 = all[i]
                    .iter()
                    .zip(&all[j])
                    .map(|(a, b)| (a - b).powi(2))
                    .sum();
                assert!(d > 0.0, "{i} {j}");
            }
        }
        assert_eq!(timestep_embed(17, 64), timestep_embed(17, 64));
    }

    #[test]
    fn output_shape_and_upsampling() {
        for (cfg, n) in [
            (tiny(), 8),
            (
                EncoderConfig {
                    out_res: 16,
                    attention: false,
                    ..tiny()
                },
                16,
            ),
        ] {
            let mut store = ParamStore::<f64>::new();
            init_encoder(&mut store, &mut seeded(1), "e", &cfg).unwrap();
            let mut tape = Tape::new();
            let b = store.bind(&mut tape);
            let x = tape.constant(normal_tensor(&mut seeded(2), &[1, 3, 8, 8]));
            let y = encoder_forward(&mut tape, &b, "e", &cfg, x, 3).unwrap();
            assert_eq!(tape.shape(y), &[1, 12, n, n]);
        }
    }

    #[test]
    fn timestep_changes_output() {
        let cfg = tiny();
        let mut store = ParamStore::<f64>::new();
        init_encoder(&mut store, &mut seeded(1), "e", &cfg).unwrap();
        let x = normal_tensor::<f64>(&mut seeded(2), &[1, 3, 8, 8]);
        let run = |t| {
            let mut tape = Tape::inference();
            let b = store.bind_constant(&mut tape);
            let xv = tape.constant(x.clone());
            let y = encoder_forward(&mut tape, &b, "e", &cfg, xv, t).unwrap();
            tape.value(y).clone()
        };
        let (a, b) = (run(1), run(50));
        let d: f64 = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(p, q)| (p - q).powi(2))
            .sum();
        assert!(d > 0.0);
    }

    #[test]
    fn wrong_resolution_rejected() {
        let cfg = tiny();
        let mut store = ParamStore::<f64>::new();
        init_encoder(&mut store, &mut seeded(1), "e", &cfg).unwrap();
        let mut tape = Tape::new();
        let b = store.bind(&mut tape);
        let x = tape.constant(Tensor::zeros(&[1, 3, 16, 16]));
        assert!(matches!(
            encoder_forward(&mut tape, &b, "e", &cfg, x, 3),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn invalid_configs() {
        assert!(EncoderConfig {
            groups: 3,
            ..tiny()
        }
        .validate()
        .is_err());
        assert!(EncoderConfig {
            out_res: 12,
            ..tiny()
        }
        .validate()
        .is_err());
        assert!(EncoderConfig {
            in_res: 7,
            out_res: 7,
            ..tiny()
        }
        .validate()
        .is_err());
        assert!(EncoderConfig::default().validate().is_ok());
    }
}
