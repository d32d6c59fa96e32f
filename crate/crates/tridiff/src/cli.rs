//! Command-line interface.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::{Dtype, RunConfig, Split};
use crate::error::{CliError, CliResult};

pub const DATA_ENV: &str = "TRIDIFF_DATA";

#[derive(Debug, Parser)]
#[command(name = "tridiff", version, about = "Triplane diffusion: data, training, sampling, evaluation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a procedural single-object dataset with the oracle ray tracer.
    GenDataset(GenDatasetArgs),
    /// Train a denoiser on a dataset.
    Train(TrainArgs),
    /// Sample scenes from pure noise.
    Generate(GenerateArgs),
    /// Reconstruct a scene from one posed view.
    Reconstruct(ReconstructArgs),
    /// Complete the masked part of a view.
    Inpaint(InpaintArgs),
    /// Score reconstructions on held-out views.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
pub struct GenDatasetArgs {
    #[arg(long, default_value_t = 16)]
    pub scenes: usize,
    #[arg(long, default_value_t = 8)]
    pub views_train: usize,
    #[arg(long, default_value_t = 4)]
    pub views_test: usize,
    /// Trailing scenes reserved for evaluation.
    #[arg(long, default_value_t = 0)]
    pub test_scenes: usize,
    #[arg(long, default_value_t = 32)]
    pub res: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long)]
    pub min_size: Option<f64>,
    #[arg(long)]
    pub max_size: Option<f64>,
    /// Output directory; defaults to the data root.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
}

/// Flags shared by commands that write a run directory.
#[derive(Debug, Args, Clone, Default)]
pub struct Common {
    /// TOML run configuration; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub workers: Option<usize>,
    /// Single worker, bit-exact mode.
    #[arg(long)]
    pub deterministic: bool,
    /// Parent of the run directory.
    #[arg(long, default_value = "runs")]
    pub out: PathBuf,
    /// Dataset root (falls back to the config file, then $TRIDIFF_DATA).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Suppress progress output.
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Enable the score-distillation regularizer.
    #[arg(long)]
    pub sd: bool,
    #[arg(long)]
    pub lambda_sd: Option<f64>,
    #[arg(long)]
    pub rho_sd: Option<f64>,
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    #[arg(long)]
    pub ema_decay: Option<f64>,
    #[arg(long)]
    pub n_coarse: Option<usize>,
    #[arg(long)]
    pub n_fine: Option<usize>,
    #[arg(long, value_parser = parse_dtype)]
    pub dtype: Option<Dtype>,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

/// Flags of commands that load a trained checkpoint.
#[derive(Debug, Args, Clone)]
pub struct ModelArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Sample with the moving-average weights stored in the checkpoint.
    #[arg(long)]
    pub ema: bool,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Number of consecutive seeds starting at --seed.
    #[arg(long, default_value_t = 1)]
    pub seeds: usize,
    #[arg(long)]
    pub azimuth: Option<f64>,
    #[arg(long)]
    pub elevation: Option<f64>,
    /// Extra renders on a 30-degree-elevation orbit.
    #[arg(long, default_value_t = 0)]
    pub orbit: usize,
}

/// Input view: a dataset view, or an image file posed by the sampler pose.
#[derive(Debug, Args, Clone)]
pub struct InputArgs {
    #[arg(long)]
    pub scene: Option<usize>,
    #[arg(long)]
    pub view: Option<usize>,
    #[arg(long, conflicts_with_all = ["scene", "view"])]
    pub image: Option<PathBuf>,
    #[arg(long)]
    pub azimuth: Option<f64>,
    #[arg(long)]
    pub elevation: Option<f64>,
}

#[derive(Debug, Args)]
pub struct ReconstructArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub input: InputArgs,
    #[arg(long)]
    pub tr: Option<usize>,
}

#[derive(Debug, Args)]
pub struct InpaintArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub input: InputArgs,
    /// Use the evaluation mask rule (the default without --mask).
    #[arg(long, conflicts_with = "mask")]
    pub mask_eval: bool,
    /// Explicit square mask as `row,col,side`.
    #[arg(long, value_parser = parse_mask)]
    pub mask: Option<[usize; 3]>,
    #[arg(long, default_value_t = 1)]
    pub seeds: usize,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub tr: Option<usize>,
    #[arg(long, value_enum)]
    pub scenes: Option<Split>,
    #[arg(long, value_enum)]
    pub input_split: Option<Split>,
}

fn parse_dtype(s: &str) -> Result<Dtype, String> {
    match s {
        "f32" => Ok(Dtype::F32),
        "f64" => Ok(Dtype::F64),
        _ => Err(format!("expected f32 or f64, got {s:?}")),
    }
}

fn parse_mask(s: &str) -> Result<[usize; 3], String> {
    let v = s
        .split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|e| e.to_string()))
        .collect::<Result<Vec<_>, _>>()?;
    v.try_into().map_err(|_| "expected row,col,side".to_string())
}

impl Common {
    /// Config file (or `base`) with the shared flags applied.
    pub fn resolve(&self, base: Option<RunConfig>) -> CliResult<RunConfig> {
        let mut cfg = match (&self.config, base) {
            (Some(p), None) => RunConfig::load(p)?,
            (Some(p), Some(base)) => {
                // the file may tune sampling and data, never the architecture
                let file = RunConfig::load(p)?;
                RunConfig {
                    model: base.model,
                    schedule: base.schedule,
                    render: base.render,
                    dtype: base.dtype,
                    ..file
                }
            }
            (None, Some(base)) => base,
            (None, None) => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(w) = self.workers {
            cfg.workers = w;
        }
        if self.deterministic {
            cfg.deterministic = true;
        }
        if let Some(d) = &self.data {
            cfg.data.path = Some(d.clone());
        }
        if cfg.data.path.is_none() {
            cfg.data.path = std::env::var_os(DATA_ENV).map(PathBuf::from);
        }
        Ok(cfg)
    }
}

pub fn data_root(cfg: &RunConfig) -> CliResult<&Path> {
    cfg.data.path.as_deref().ok_or_else(|| {
        CliError::Config(format!("no dataset given (use --data, [data] path or ${DATA_ENV})"))
    })
}
