//! Binary checkpoint container. All integers little-endian.
//!
//! ```text
//! magic    8 bytes  "TRIDIFF\0"
//! version  u32      1
//! dtype    u8       element size in bytes: 4 (f32) or 8 (f64)
//! config   u32 length + UTF-8 TOML run config (model, schedule, render, ...)
//! step     u64      optimizer steps taken
//! count    u32      number of tensors
//! tensors  count x { u16 name length, UTF-8 name, u8 rank, rank x u32 dims,
//!                    product(dims) elements of `dtype` }
//! ```
//!
//! Tensor names are `param/<name>`, `adam_m/<name>` and `adam_v/<name>`,
//! plus `ema/<name>` when a parameter moving average is kept.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};
use tridiff_core::denoiser::Denoiser;
use tridiff_core::params::ParamStore;
use tridiff_core::training::Adam;
use tridiff_core::{Real, Tensor};

use crate::config::{Dtype, RunConfig};
use crate::error::{CliError, CliResult};

pub const MAGIC: &[u8; 8] = b"TRIDIFF\0";
pub const VERSION: u32 = 1;

/// Parsed header plus raw tensors, before choosing an element type.
#[derive(Clone, Debug)]
pub struct CheckpointFile {
    pub dtype: Dtype,
    pub config: RunConfig,
    pub config_text: String,
    pub step: u64,
    pub tensors: Vec<(String, Tensor<f64>)>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn file_sha256(path: &Path) -> CliResult<String> {
    Ok(sha256_hex(&fs::read(path).map_err(|e| CliError::io(path, e))?))
}

fn dtype_of<F: Real>() -> Dtype {
    if F::BYTES == 4 {
        Dtype::F32
    } else {
        Dtype::F64
    }
}

pub fn encode<F: Real>(
    config: &RunConfig,
    model: &Denoiser<F>,
    adam: &Adam<F>,
    ema: Option<&ParamStore<F>>,
) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let dtype = dtype_of::<F>();
    out.push(dtype.tag());
    let mut cfg = config.clone();
    cfg.dtype = dtype;
    let text = cfg.to_toml();
    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    out.extend_from_slice(&adam.step.to_le_bytes());
    let mut groups = vec![("param", &model.params), ("adam_m", &adam.m), ("adam_v", &adam.v)];
    if let Some(e) = ema {
        groups.push(("ema", e));
    }
    let count: usize = groups.iter().map(|(_, s)| s.len()).sum();
    out.extend_from_slice(&(count as u32).to_le_bytes());
    for (prefix, store) in groups {
        for (name, t) in store.iter() {
            let full = format!("{prefix}/{name}");
            out.extend_from_slice(&(full.len() as u16).to_le_bytes());
            out.extend_from_slice(full.as_bytes());
            out.push(t.ndim() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                match dtype {
                    Dtype::F32 => out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes()),
                    Dtype::F64 => out.extend_from_slice(&v.as_f64().to_le_bytes()),
                }
            }
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| format!("truncated at byte {}", self.pos))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N], String> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u8(&mut self) -> Result<u8, String> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, String> {
        self.array().map(u16::from_le_bytes)
    }

    fn u32(&mut self) -> Result<u32, String> {
        self.array().map(u32::from_le_bytes)
    }

    fn u64(&mut self) -> Result<u64, String> {
        self.array().map(u64::from_le_bytes)
    }

    fn string(&mut self, n: usize) -> Result<String, String> {
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| "invalid UTF-8".to_string())
    }
}

fn parse(bytes: &[u8]) -> Result<CheckpointFile, String> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err("not a checkpoint (bad magic)".into());
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(format!("unsupported checkpoint version {version}"));
    }
    let dtype = match r.u8()? {
        4 => Dtype::F32,
        8 => Dtype::F64,
        t => return Err(format!("unknown dtype tag {t}")),
    };
    let len = r.u32()? as usize;
    let config_text = r.string(len)?;
    let config = RunConfig::from_toml(&config_text).map_err(|e| e.to_string())?;
    let step = r.u64()?;
    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = r.string(len)?;
        let rank = r.u8()? as usize;
        let shape = (0..rank)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>, _>>()?;
        let n: usize = shape.iter().product();
        let data = match dtype {
            Dtype::F32 => r
                .take(n * 4)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
            Dtype::F64 => r
                .take(n * 8)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        };
        let t = Tensor::new(&shape, data).map_err(|e| e.to_string())?;
        tensors.push((name, t));
    }
    if r.pos != bytes.len() {
        return Err("trailing bytes after the last tensor".into());
    }
    Ok(CheckpointFile {
        dtype,
        config,
        config_text,
        step,
        tensors,
    })
}

impl CheckpointFile {
    pub fn read(path: &Path) -> CliResult<Self> {
        let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
        parse(&bytes).map_err(|m| CliError::format(path, m))
    }

    fn store<F: Real>(&self, prefix: &str) -> ParamStore<F> {
        let mut s = ParamStore::new();
        for (name, t) in &self.tensors {
            if let Some(rest) = name.strip_prefix(prefix).and_then(|r| r.strip_prefix('/')) {
                s.insert(rest, t.cast());
            }
        }
        s
    }

    pub fn has_ema(&self) -> bool {
        self.tensors.iter().any(|(n, _)| n.starts_with("ema/"))
    }

    pub fn model<F: Real>(&self) -> CliResult<Denoiser<F>> {
        Ok(Denoiser::from_parts(self.config.denoiser(), self.store("param"))?)
    }

    /// The model with moving-average weights.
    pub fn ema_model<F: Real>(&self) -> CliResult<Denoiser<F>> {
        if !self.has_ema() {
            return Err(CliError::Config("checkpoint has no moving-average weights".into()));
        }
        Ok(Denoiser::from_parts(self.config.denoiser(), self.store("ema"))?)
    }

    /// Model, optimizer state and moving average (if stored) for resuming.
    pub fn training_state<F: Real>(&self) -> CliResult<(Denoiser<F>, Adam<F>, Option<ParamStore<F>>)> {
        let model = self.model()?;
        let mut adam = Adam::new(&model.params);
        let m = self.store::<F>("adam_m");
        let v = self.store::<F>("adam_v");
        for (name, t) in model.params.iter() {
            let (Some(mt), Some(vt)) = (m.get(name), v.get(name)) else {
                return Err(CliError::Config(format!(
                    "checkpoint lacks optimizer state for {name}"
                )));
            };
            if mt.shape() != t.shape() || vt.shape() != t.shape() {
                return Err(CliError::Config(format!("optimizer state shape for {name}")));
            }
            *adam.m.get_mut(name).expect("same names") = mt.clone();
            *adam.v.get_mut(name).expect("same names") = vt.clone();
        }
        adam.step = self.step;
        let ema = self.has_ema().then(|| self.ema_model::<F>()).transpose()?;
        Ok((model, adam, ema.map(|m| m.params)))
    }
}

/// Writes atomically through a temporary sibling; returns the SHA-256.
pub fn save<F: Real>(
    path: &Path,
    config: &RunConfig,
    model: &Denoiser<F>,
    adam: &Adam<F>,
    ema: Option<&ParamStore<F>>,
) -> CliResult<String> {
    let bytes = encode(config, model, adam, ema);
    let tmp = path.with_extension("partial");
    fs::write(&tmp, &bytes).map_err(|e| CliError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| CliError::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use tridiff_core::denoiser::DenoiserConfig;

    fn tiny_config() -> RunConfig {
        let d = DenoiserConfig::tiny();
        let mut c = RunConfig::default();
        c.model.resolution = d.resolution;
        c.model.triplane_resolution = d.field.resolution;
        c.model.n_f = d.field.n_f;
        c.model.n_freq = d.field.n_freq;
        c.model.hidden = d.field.hidden;
        c.model.widths = d.widths.clone();
        c.model.res_blocks = d.res_blocks;
        c.model.groups = d.groups;
        c.model.time_dim = d.time_dim;
        c.render.n_coarse = 4;
        c.render.n_fine = 4;
        c
    }

    fn round_trip<F: Real>() {
        let cfg = tiny_config();
        let model = Denoiser::<F>::new(cfg.denoiser(), 5).unwrap();
        let mut adam = Adam::new(&model.params);
        adam.step = 17;
        adam.m.tensors_mut()[0].data_mut()[0] = F::lit(0.25);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.ckpt");
        let mut ema = model.params.clone();
        ema.tensors_mut()[1].data_mut()[0] = F::lit(-3.0);
        let hash = save(&p, &cfg, &model, &adam, Some(&ema)).unwrap();
        assert_eq!(hash, file_sha256(&p).unwrap());
        let file = CheckpointFile::read(&p).unwrap();
        assert_eq!(file.dtype, dtype_of::<F>());
        let (m2, a2, e2) = file.training_state::<F>().unwrap();
        assert_eq!(e2.as_ref(), Some(&ema));
        assert_eq!(m2.params, model.params);
        assert_eq!(a2.m, adam.m);
        assert_eq!(a2.v, adam.v);
        assert_eq!(a2.step, 17);
        assert_eq!(encode(&file.config, &m2, &a2, e2.as_ref()), fs::read(&p).unwrap());
    }

    #[test]
    fn round_trip_is_bit_exact_in_both_precisions() {
        round_trip::<f32>();
        round_trip::<f64>();
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let cfg = tiny_config();
        let model = Denoiser::<f32>::new(cfg.denoiser(), 5).unwrap();
        let bytes = encode(&cfg, &model, &Adam::new(&model.params), None);
        assert!(!parse(&bytes).unwrap().has_ema());
        assert!(parse(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(parse(&bad).unwrap_err().contains("magic"));
        let mut extra = bytes;
        extra.push(0);
        assert!(parse(&extra).is_err());
    }
}
