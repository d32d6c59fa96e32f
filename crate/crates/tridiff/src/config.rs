//! Run configuration: a TOML file with one table per component, every key
//! optional, overridden by command-line flags.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tridiff_core::camera::{look_at_pose, DEFAULT_RADIUS};
use tridiff_core::denoiser::DenoiserConfig;
use tridiff_core::render::RenderConfig;
use tridiff_core::samplers::canonical_camera;
use tridiff_core::training::TrainConfig;
use tridiff_core::triplane::FieldConfig;
use tridiff_core::{Camera, NoiseSchedule};

use crate::error::{CliError, CliResult};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    #[default]
    F32,
    F64,
}

impl Dtype {
    pub fn tag(self) -> u8 {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    /// Image resolution `M`.
    pub resolution: usize,
    /// Triplane resolution `N`.
    pub triplane_resolution: usize,
    pub n_f: usize,
    pub n_freq: usize,
    pub hidden: usize,
    pub extent: f64,
    /// Channel width per encoder level; the length is the encoder depth.
    pub widths: Vec<usize>,
    pub res_blocks: usize,
    pub groups: usize,
    pub time_dim: usize,
    pub attention: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        let d = DenoiserConfig::default();
        Self {
            resolution: d.resolution,
            triplane_resolution: d.field.resolution,
            n_f: d.field.n_f,
            n_freq: d.field.n_freq,
            hidden: d.field.hidden,
            extent: d.field.extent,
            widths: d.widths,
            res_blocks: d.res_blocks,
            groups: d.groups,
            time_dim: d.time_dim,
            attention: d.attention,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleSection {
    pub steps: usize,
    pub offset: f64,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        Self {
            steps: 100,
            offset: tridiff_core::schedule::DEFAULT_OFFSET,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderSection {
    pub n_coarse: usize,
    pub n_fine: usize,
    pub background: [f64; 3],
}

impl Default for RenderSection {
    fn default() -> Self {
        let r = RenderConfig::default();
        Self {
            n_coarse: r.n_coarse,
            n_fine: r.n_fine,
            background: r.background,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub batch: usize,
    pub steps: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Adds the score-distillation term (off by default).
    pub score_distillation: bool,
    pub lambda_sd: f64,
    pub rho_sd: f64,
    pub checkpoint_every: usize,
    /// Decay of the parameter moving average; 0 disables it.
    pub ema_decay: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            batch: t.batch,
            steps: t.steps,
            lr: t.lr,
            beta1: t.beta1,
            beta2: t.beta2,
            eps: t.eps,
            weight_decay: t.weight_decay,
            score_distillation: t.sd_enabled,
            lambda_sd: t.lambda_sd,
            rho_sd: t.rho_sd,
            checkpoint_every: t.checkpoint_every,
            ema_decay: 0.0,
        }
    }
}

/// Camera on the dataset sphere looking at the origin.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PoseSection {
    pub azimuth_deg: f64,
    pub elevation_deg: f64,
    pub radius: f64,
}

impl Default for PoseSection {
    fn default() -> Self {
        Self {
            azimuth_deg: 0.0,
            elevation_deg: 30.0,
            radius: DEFAULT_RADIUS,
        }
    }
}

impl PoseSection {
    pub fn camera(&self, resolution: usize) -> CliResult<Camera> {
        if *self == PoseSection::default() {
            return Ok(canonical_camera(resolution));
        }
        let pose = look_at_pose(
            self.azimuth_deg.to_radians(),
            self.elevation_deg.to_radians(),
            self.radius,
            [0.0; 3],
        )?;
        Ok(Camera::new(resolution, pose))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerSection {
    /// Forward-noise steps applied before reconstruction.
    pub t_r: usize,
    pub pose: PoseSection,
    /// Explicit square mask `[row, col, side]`; the evaluation rule is used
    /// when absent.
    pub mask: Option<[usize; 3]>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    #[default]
    Test,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub path: Option<PathBuf>,
    /// View split providing the reconstruction input in `eval`.
    pub input_split: Split,
    /// Scene split evaluated by `eval`.
    pub scenes: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub workers: usize,
    pub deterministic: bool,
    pub dtype: Dtype,
    pub model: ModelSection,
    pub schedule: ScheduleSection,
    pub render: RenderSection,
    pub train: TrainSection,
    pub sampler: SamplerSection,
    pub data: DataSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            workers: 1,
            deterministic: false,
            dtype: Dtype::default(),
            model: ModelSection::default(),
            schedule: ScheduleSection::default(),
            render: RenderSection::default(),
            train: TrainSection::default(),
            sampler: SamplerSection::default(),
            data: DataSection::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> CliResult<Self> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// Worker count actually used: one in deterministic mode.
    pub fn effective_workers(&self) -> usize {
        if self.deterministic {
            1
        } else {
            self.workers.max(1)
        }
    }

    pub fn denoiser(&self) -> DenoiserConfig {
        let m = &self.model;
        DenoiserConfig {
            resolution: m.resolution,
            field: FieldConfig {
                n_f: m.n_f,
                resolution: m.triplane_resolution,
                n_freq: m.n_freq,
                hidden: m.hidden,
                extent: m.extent,
            },
            widths: m.widths.clone(),
            res_blocks: m.res_blocks,
            groups: m.groups,
            time_dim: m.time_dim,
            attention: m.attention,
            render: RenderConfig {
                n_coarse: self.render.n_coarse,
                n_fine: self.render.n_fine,
                background: self.render.background,
                stochastic: true,
            },
        }
    }

    pub fn schedule(&self) -> CliResult<NoiseSchedule> {
        Ok(NoiseSchedule::cosine(self.schedule.steps, self.schedule.offset)?)
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            batch: t.batch,
            steps: t.steps,
            lr: t.lr,
            beta1: t.beta1,
            beta2: t.beta2,
            eps: t.eps,
            weight_decay: t.weight_decay,
            lambda_sd: t.lambda_sd,
            rho_sd: t.rho_sd,
            sd_enabled: t.score_distillation,
            seed: self.seed,
            checkpoint_every: t.checkpoint_every,
        }
    }

    /// Checks every section against the preconditions of the components
    /// it configures.
    pub fn validate(&self) -> CliResult<()> {
        self.denoiser().validate()?;
        self.schedule()?;
        self.train_config().validate()?;
        if self.sampler.t_r > self.schedule.steps {
            return Err(CliError::Config(format!(
                "t_r = {} exceeds the schedule length {}",
                self.sampler.t_r, self.schedule.steps
            )));
        }
        if !(0.0..1.0).contains(&self.train.ema_decay) {
            return Err(CliError::Config("ema_decay must lie in [0, 1)".into()));
        }
        if self.workers == 0 {
            return Err(CliError::Config("workers must be at least 1".into()));
        }
        if let Some([row, col, side]) = self.sampler.mask {
            let m = self.model.resolution;
            if side == 0 || row + side > m || col + side > m {
                return Err(CliError::Config(format!(
                    "mask [{row}, {col}, {side}] does not fit a {m}x{m} image"
                )));
            }
        }
        self.sampler.pose.camera(self.model.resolution)?.validate()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let c = RunConfig::default();
        c.validate().unwrap();
        assert_eq!(RunConfig::from_toml(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn partial_file_keeps_other_defaults() {
        let c = RunConfig::from_toml("seed = 3\n[train]\nbatch = 2\n").unwrap();
        assert_eq!(c.seed, 3);
        assert_eq!(c.train.batch, 2);
        assert_eq!(c.train.steps, TrainSection::default().steps);
    }

    #[test]
    fn unknown_keys_are_config_errors() {
        let e = RunConfig::from_toml("[train]\nbatchsize = 2\n").unwrap_err();
        assert_eq!(e.exit_code(), 1);
    }

    #[test]
    fn invalid_values_are_config_errors() {
        let mut c = RunConfig::default();
        c.schedule.steps = 0;
        assert_eq!(c.validate().unwrap_err().exit_code(), 1);
        let mut c = RunConfig::default();
        c.sampler.t_r = 101;
        assert_eq!(c.validate().unwrap_err().exit_code(), 1);
    }

    #[test]
    fn default_pose_is_the_canonical_camera() {
        let p = PoseSection::default();
        assert_eq!(p.camera(32).unwrap(), canonical_camera(32));
    }
}
