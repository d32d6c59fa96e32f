//! Training driver: batches spread over worker threads, JSON-lines loss
//! log, periodic checkpoints and resume.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;
use std::time::Instant;

use serde::Serialize;
use tridiff_core::denoiser::Denoiser;
use tridiff_core::params::ParamStore;
use tridiff_core::training::{
    draw_step, element_gradients, ema_update, reduce_elements, Adam, ElementDraw, Example, LossTerms,
    TrainConfig,
};
use tridiff_core::{NoiseSchedule, Real};

use crate::checkpoint::{self, CheckpointFile};
use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::par;
use crate::run::RunDir;

pub const LOG: &str = "train_log.jsonl";

/// One line of the loss log.
#[derive(Clone, Debug, PartialEq, Serialize, serde::Deserialize)]
pub struct LogRecord {
    pub step: u64,
    pub denoise_loss: f64,
    pub sd_loss: f64,
    pub lr: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct SavedCheckpoint {
    pub step: u64,
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoints: Vec<SavedCheckpoint>,
    pub param_count: usize,
}

impl TrainOutcome {
    pub fn last(&self) -> &SavedCheckpoint {
        self.checkpoints.last().expect("at least the initial checkpoint")
    }
}

/// Per-element gradients in element order. Workers take contiguous
/// chunks, so the result does not depend on the worker count.
pub fn batch_gradients<F: Real>(
    model: &Denoiser<F>,
    cfg: &TrainConfig,
    sched: &NoiseSchedule,
    data: &[Example<F>],
    draws: &[ElementDraw<F>],
    workers: usize,
) -> tridiff_core::Result<Vec<(ParamStore<F>, LossTerms)>> {
    par::map(draws, workers, |d| element_gradients(model, cfg, sched, data, d))
}

fn check_compatible(config: &RunConfig, ckpt: &CheckpointFile) -> CliResult<()> {
    let old = &ckpt.config;
    if old.model != config.model || old.schedule != config.schedule || old.render != config.render {
        return Err(CliError::Config(
            "model, schedule and render settings must match the checkpoint being resumed".into(),
        ));
    }
    if old.seed != config.seed {
        return Err(CliError::Config(format!(
            "resume seed {} differs from the checkpoint seed {}",
            config.seed, old.seed
        )));
    }
    Ok(())
}

fn is_divergence(e: &tridiff_core::Error) -> bool {
    matches!(
        e,
        tridiff_core::Error::NonFinite { .. } | tridiff_core::Error::NonFiniteDensity { .. }
    )
}

/// Trains until `config.train.steps` optimizer steps have been taken,
/// starting fresh or from `resume`.
pub fn train<F: Real>(
    config: &RunConfig,
    data: &[Example<F>],
    run: &RunDir,
    resume: Option<&CheckpointFile>,
    progress: bool,
) -> CliResult<TrainOutcome> {
    let tc = config.train_config();
    let sched = config.schedule()?;
    let (mut model, mut adam, ema) = match resume {
        Some(ck) => {
            check_compatible(config, ck)?;
            ck.training_state::<F>()?
        }
        None => {
            let model = Denoiser::<F>::new(config.denoiser(), config.seed)?;
            let adam = Adam::new(&model.params);
            (model, adam, None)
        }
    };
    let decay = config.train.ema_decay;
    let mut ema = (decay > 0.0).then(|| ema.unwrap_or_else(|| model.params.clone()));
    let dir = run.subdir("checkpoints")?;
    let mut saved = Vec::new();
    let save = |saved: &mut Vec<SavedCheckpoint>,
                model: &Denoiser<F>,
                adam: &Adam<F>,
                ema: Option<&ParamStore<F>>| {
        let path = dir.join(format!("step_{:06}.ckpt", adam.step));
        let sha256 = checkpoint::save(&path, config, model, adam, ema)?;
        saved.push(SavedCheckpoint {
            step: adam.step,
            path,
            sha256,
        });
        CliResult::Ok(())
    };
    save(&mut saved, &model, &adam, ema.as_ref())?;
    let log_path = run.join(LOG);
    let file = File::create(&log_path).map_err(|e| CliError::io(&log_path, e))?;
    let mut log = BufWriter::new(file);
    let start = Instant::now();
    let target = tc.steps as u64;
    let workers = config.effective_workers();
    let every = tc.checkpoint_every as u64;
    let report = (target / 20).max(1);
    while adam.step < target {
        let draws = draw_step(&tc, &sched, adam.step, data)?;
        let parts = match batch_gradients(&model, &tc, &sched, data, &draws, workers) {
            Ok(p) => p,
            Err(e) if is_divergence(&e) => {
                log.flush().map_err(|e| CliError::io(&log_path, e))?;
                return Err(CliError::Diverged {
                    step: adam.step + 1,
                    checkpoint: saved.last().expect("initial checkpoint").path.clone(),
                });
            }
            Err(e) => return Err(e.into()),
        };
        let (grads, terms) = reduce_elements(parts)?;
        adam.update(&mut model.params, &grads, &tc)?;
        if let Some(e) = ema.as_mut() {
            ema_update(e, &model.params, decay)?;
        }
        let rec = LogRecord {
            step: adam.step,
            denoise_loss: terms.denoise,
            sd_loss: terms.sd,
            lr: tc.lr,
            seconds: start.elapsed().as_secs_f64(),
        };
        let line = serde_json::to_string(&rec).expect("record serializes");
        writeln!(log, "{line}").map_err(|e| CliError::io(&log_path, e))?;
        if progress && (adam.step % report == 0 || adam.step == target) {
            eprintln!(
                "step {}/{}  loss {:.5}  sd {:.5}  {:.1}s",
                adam.step, target, terms.denoise, terms.sd, rec.seconds
            );
        }
        if (every > 0 && adam.step % every == 0) || adam.step == target {
            log.flush().map_err(|e| CliError::io(&log_path, e))?;
            save(&mut saved, &model, &adam, ema.as_ref())?;
        }
    }
    log.flush().map_err(|e| CliError::io(&log_path, e))?;
    Ok(TrainOutcome {
        checkpoints: saved,
        param_count: model.param_count(),
    })
}

/// Parses a loss log.
pub fn read_log(path: &std::path::Path) -> CliResult<Vec<LogRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    text.lines()
        .map(|l| serde_json::from_str(l).map_err(|e| CliError::format(path, e.to_string())))
        .collect()
}
