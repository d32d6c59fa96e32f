//! Command handlers. Each returns the run directory it wrote.

use std::path::{Path, PathBuf};

use serde_json::json;
use tridiff_core::camera::{look_at_pose, DEFAULT_RADIUS};
use tridiff_core::denoiser::Denoiser;
use tridiff_core::metrics::{evaluate_reconstruction, psnr, ssim, EvalScene, MetricReport};
use tridiff_core::samplers::{
    generate, inpaint, mask_for_eval, novel_view, reconstruct, InpaintTask, Mask, SampleRun,
};
use tridiff_core::scene::SceneConfig;
use tridiff_core::{rng, Camera, NoiseSchedule, Real, Tensor};

use crate::checkpoint::{file_sha256, CheckpointFile};
use crate::cli::{
    data_root, EvalArgs, GenDatasetArgs, GenerateArgs, InpaintArgs, InputArgs, ModelArgs,
    ReconstructArgs, TrainArgs, DATA_ENV,
};
use crate::config::{Dtype, RunConfig};
use crate::dataset::{generate_dataset, Dataset, DatasetConfig, Manifest, MANIFEST};
use crate::error::{CliError, CliResult};
use crate::image_io::{save_depth, save_rgb};
use crate::par;
use crate::run::{metadata, RunDir, METADATA};
use crate::train;

/// Maps `[-1, 1]` to `[0, 1]`.
fn to_unit<F: Real>(x: &Tensor<F>) -> Tensor<f64> {
    x.cast::<f64>().map(|v| (0.5 * (v + 1.0)).clamp(0.0, 1.0))
}

fn from_unit<F: Real>(x: &Tensor<f64>) -> Tensor<F> {
    x.map(|v| 2.0 * v - 1.0).cast()
}

fn pose_json(cam: &Camera) -> serde_json::Value {
    json!({
        "rotation": cam.pose.rotation_flat(),
        "position": cam.pose.position,
        "focal": cam.focal,
        "principal": cam.principal,
        "resolution": cam.resolution,
    })
}

fn depth_json(cam: &Camera) -> serde_json::Value {
    json!({"encoding": "16-bit gray, linear", "near": cam.near, "far": cam.far, "near_value": 0, "far_value": 65535})
}

pub fn gen_dataset(args: &GenDatasetArgs) -> CliResult<(PathBuf, Manifest)> {
    let out = match &args.out {
        Some(p) => p.clone(),
        None => std::env::var_os(DATA_ENV)
            .map(PathBuf::from)
            .ok_or_else(|| CliError::Config(format!("no output directory (use --out or ${DATA_ENV})")))?,
    };
    let defaults = SceneConfig::default();
    let cfg = DatasetConfig {
        scenes: args.scenes,
        views_train: args.views_train,
        views_test: args.views_test,
        test_scenes: args.test_scenes,
        resolution: args.res,
        seed: args.seed,
        objects: SceneConfig {
            min_size: args.min_size.unwrap_or(defaults.min_size),
            max_size: args.max_size.unwrap_or(defaults.max_size),
        },
    };
    cfg.validate()?;
    if args.workers == 0 {
        return Err(CliError::Config("workers must be at least 1".into()));
    }
    let m = generate_dataset(&cfg, &out, args.workers)?;
    Ok((out, m))
}

fn train_config(args: &TrainArgs, resume: Option<&CheckpointFile>) -> CliResult<RunConfig> {
    let mut cfg = args.common.resolve(resume.map(|c| c.config.clone()))?;
    let t = &mut cfg.train;
    if let Some(v) = args.steps {
        t.steps = v;
    }
    if let Some(v) = args.batch {
        t.batch = v;
    }
    if let Some(v) = args.lr {
        t.lr = v;
    }
    if let Some(v) = args.lambda_sd {
        t.lambda_sd = v;
    }
    if let Some(v) = args.rho_sd {
        t.rho_sd = v;
    }
    if let Some(v) = args.checkpoint_every {
        t.checkpoint_every = v;
    }
    if let Some(v) = args.ema_decay {
        t.ema_decay = v;
    }
    if args.sd {
        t.score_distillation = true;
    }
    if let Some(v) = args.n_coarse {
        cfg.render.n_coarse = v;
    }
    if let Some(v) = args.n_fine {
        cfg.render.n_fine = v;
    }
    if let Some(d) = args.dtype {
        cfg.dtype = d;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn cmd_train(args: &TrainArgs) -> CliResult<PathBuf> {
    let resume = args.resume.as_deref().map(CheckpointFile::read).transpose()?;
    let cfg = train_config(args, resume.as_ref())?;
    let root = data_root(&cfg)?.to_path_buf();
    let data = Dataset::open(&root)?;
    if data.manifest.resolution != cfg.model.resolution {
        return Err(CliError::Config(format!(
            "dataset resolution {} differs from model resolution {}",
            data.manifest.resolution, cfg.model.resolution
        )));
    }
    let run = RunDir::create(&args.common.out, "train", &cfg)?;
    let progress = !args.common.quiet;
    let outcome = match cfg.dtype {
        Dtype::F32 => train::train::<f32>(&cfg, &data.training_examples()?, &run, resume.as_ref(), progress),
        Dtype::F64 => train::train::<f64>(&cfg, &data.training_examples()?, &run, resume.as_ref(), progress),
    };
    let resumed = match &args.resume {
        Some(p) => json!({"path": p, "sha256": file_sha256(p)?}),
        None => serde_json::Value::Null,
    };
    let base = json!({
        "dataset": root,
        "manifest_sha256": file_sha256(&root.join(MANIFEST))?,
        "resumed_from": resumed,
        "log": train::LOG,
    });
    match outcome {
        Ok(o) => {
            let mut extra = base;
            extra["param_count"] = json!(o.param_count);
            let rel = |p: &Path| p.strip_prefix(&run.path).unwrap_or(p).to_path_buf();
            let saved: Vec<_> = o
                .checkpoints
                .iter()
                .map(|c| json!({"step": c.step, "path": rel(&c.path), "sha256": c.sha256}))
                .collect();
            extra["checkpoints"] = json!(saved);
            extra["final_checkpoint"] = json!(rel(&o.last().path));
            run.write_json(METADATA, &metadata("train", &cfg, extra))?;
            Ok(run.path)
        }
        Err(e) => {
            let mut extra = base;
            extra["error"] = json!(e.to_string());
            run.write_json(METADATA, &metadata("train", &cfg, extra))?;
            Err(e)
        }
    }
}

/// Checkpoint plus the config it implies after flag overrides.
struct Loaded {
    file: CheckpointFile,
    sha256: String,
    config: RunConfig,
    ema: bool,
}

impl Loaded {
    fn model<F: Real>(&self) -> CliResult<Denoiser<F>> {
        if self.ema {
            self.file.ema_model()
        } else {
            self.file.model()
        }
    }
}

fn load_model_args(m: &ModelArgs, tweak: impl FnOnce(&mut RunConfig)) -> CliResult<Loaded> {
    let file = CheckpointFile::read(&m.checkpoint)?;
    let sha256 = file_sha256(&m.checkpoint)?;
    let mut config = m.common.resolve(Some(file.config.clone()))?;
    tweak(&mut config);
    config.validate()?;
    if m.ema && !file.has_ema() {
        return Err(CliError::Config(format!(
            "{} has no moving-average weights",
            m.checkpoint.display()
        )));
    }
    Ok(Loaded {
        file,
        sha256,
        config,
        ema: m.ema,
    })
}

fn model_metadata(l: &Loaded, m: &ModelArgs, sched: &NoiseSchedule) -> serde_json::Value {
    json!({
        "checkpoint": {"path": m.checkpoint, "sha256": l.sha256, "step": l.file.step, "ema": l.ema},
        "schedule_hash": format!("{:016x}", sched.fingerprint()),
    })
}

fn merge(mut a: serde_json::Value, b: serde_json::Value) -> serde_json::Value {
    if let (Some(a), serde_json::Value::Object(b)) = (a.as_object_mut(), b) {
        a.extend(b);
    }
    a
}

fn save_render<F: Real>(
    dir: &Path,
    stem: &str,
    model: &Denoiser<F>,
    run: &SampleRun<F>,
    cam: &Camera,
) -> CliResult<Tensor<f64>> {
    let out = novel_view(model, run, cam)?;
    let rgb = out.rgb.cast::<f64>();
    save_rgb(&dir.join(format!("{stem}.png")), &rgb)?;
    save_depth(&dir.join(format!("{stem}_depth.png")), &out.depth, cam.near, cam.far)?;
    Ok(rgb)
}

macro_rules! dispatch {
    ($dtype:expr, $f:ident ( $($arg:expr),* )) => {
        match $dtype {
            Dtype::F32 => $f::<f32>($($arg),*),
            Dtype::F64 => $f::<f64>($($arg),*),
        }
    };
}

pub fn cmd_generate(args: &GenerateArgs) -> CliResult<PathBuf> {
    let l = load_model_args(&args.model, |c| {
        if let Some(a) = args.azimuth {
            c.sampler.pose.azimuth_deg = a;
        }
        if let Some(e) = args.elevation {
            c.sampler.pose.elevation_deg = e;
        }
    })?;
    if args.seeds == 0 {
        return Err(CliError::Config("--seeds must be at least 1".into()));
    }
    dispatch!(l.file.dtype, generate_impl(args, &l))
}

fn generate_impl<F: Real>(args: &GenerateArgs, l: &Loaded) -> CliResult<PathBuf> {
    let cfg = &l.config;
    let model = l.model::<F>()?;
    let sched = cfg.schedule()?;
    let cam = cfg.sampler.pose.camera(cfg.model.resolution)?;
    let run = RunDir::create(&args.model.common.out, "generate", cfg)?;
    let seeds: Vec<u64> = (0..args.seeds as u64).map(|i| cfg.seed + i).collect();
    let orbit: Vec<Camera> = (0..args.orbit)
        .map(|k| {
            let az = 2.0 * std::f64::consts::PI * k as f64 / args.orbit as f64;
            let pose = look_at_pose(az, 30f64.to_radians(), DEFAULT_RADIUS, [0.0; 3])?;
            Ok(Camera::new(cfg.model.resolution, pose))
        })
        .collect::<CliResult<_>>()?;
    let calls = par::map(&seeds, cfg.effective_workers(), |&seed| -> CliResult<usize> {
        let s = generate(&model, &sched, &cam, seed, false)?;
        let dir = run.subdir(&format!("seed_{seed}"))?;
        save_rgb(&dir.join("image.png"), &to_unit(&s.image))?;
        save_render(&dir, "render", &model, &s, &cam)?;
        for (k, c) in orbit.iter().enumerate() {
            save_render(&dir, &format!("orbit_{k}"), &model, &s, c)?;
        }
        Ok(s.calls.len())
    })?;
    let extra = merge(
        model_metadata(l, &args.model, &sched),
        json!({
            "seeds": seeds,
            "pose": cfg.sampler.pose,
            "camera": pose_json(&cam),
            "denoiser_calls": calls,
            "orbit_views": args.orbit,
            "depth": depth_json(&cam),
        }),
    );
    run.write_json(METADATA, &metadata("generate", cfg, extra))?;
    Ok(run.path)
}

/// Input image in `[0, 1]`, its camera, and the scene and view it came from.
struct Input {
    image: Tensor<f64>,
    camera: Camera,
    source: serde_json::Value,
    dataset: Option<(Dataset, usize, usize)>,
}

fn load_input(a: &InputArgs, cfg: &RunConfig) -> CliResult<Input> {
    let m = cfg.model.resolution;
    if let Some(p) = &a.image {
        let image = crate::image_io::load_rgb(p)?;
        if image.shape() != [3, m, m] {
            return Err(CliError::Config(format!("{} is not {m}x{m}", p.display())));
        }
        let mut pose = cfg.sampler.pose.clone();
        if let Some(v) = a.azimuth {
            pose.azimuth_deg = v;
        }
        if let Some(v) = a.elevation {
            pose.elevation_deg = v;
        }
        return Ok(Input {
            image,
            camera: pose.camera(m)?,
            source: json!({"image": p, "sha256": file_sha256(p)?, "pose": pose}),
            dataset: None,
        });
    }
    let d = Dataset::open(data_root(cfg)?)?;
    if d.manifest.resolution != m {
        return Err(CliError::Config("dataset resolution differs from the model".into()));
    }
    let (s, v) = (a.scene.unwrap_or(0), a.view.unwrap_or(0));
    let rec = d.view(s, v)?;
    Ok(Input {
        image: d.load_image(rec)?,
        camera: rec.camera.camera()?,
        source: json!({"dataset": d.root, "scene": s, "view": v, "file": rec.file}),
        dataset: Some((d, s, v)),
    })
}

pub fn cmd_reconstruct(args: &ReconstructArgs) -> CliResult<PathBuf> {
    let l = load_model_args(&args.model, |c| {
        if let Some(t) = args.tr {
            c.sampler.t_r = t;
        }
    })?;
    dispatch!(l.file.dtype, reconstruct_impl(args, &l))
}

fn reconstruct_impl<F: Real>(args: &ReconstructArgs, l: &Loaded) -> CliResult<PathBuf> {
    let cfg = &l.config;
    let model = l.model::<F>()?;
    let sched = cfg.schedule()?;
    let input = load_input(&args.input, cfg)?;
    let run = RunDir::create(&args.model.common.out, "reconstruct", cfg)?;
    let s = reconstruct(&model, &sched, &from_unit(&input.image), &input.camera, cfg.sampler.t_r, cfg.seed)?;
    save_rgb(&run.join("input.png"), &input.image)?;
    save_rgb(&run.join("reconstruction.png"), &to_unit(&s.image))?;
    let rgb = save_render(&run.path, "render", &model, &s, &input.camera)?;
    let mut views = Vec::new();
    if let Some((d, scene, view)) = &input.dataset {
        let dir = run.subdir("views")?;
        let rec = d.scene(*scene)?;
        let others: Vec<_> = rec.views.iter().filter(|v| v.index != *view).collect();
        views = par::map(&others, cfg.effective_workers(), |v| -> CliResult<serde_json::Value> {
            let img = save_render(&dir, &format!("view_{}", v.index), &model, &s, &v.camera.camera()?)?;
            let gt = d.load_image(v)?;
            Ok(json!({"view": v.index, "split": v.split, "psnr": psnr(&img, &gt)?, "ssim": ssim(&img, &gt).ok()}))
        })?;
    }
    let extra = merge(
        model_metadata(l, &args.model, &sched),
        json!({
            "input": input.source,
            "t_r": cfg.sampler.t_r,
            "denoiser_calls": s.calls.len(),
            "camera": pose_json(&input.camera),
            "input_psnr": psnr(&rgb, &input.image)?,
            "views": views,
            "depth": depth_json(&input.camera),
        }),
    );
    run.write_json(METADATA, &metadata("reconstruct", cfg, extra))?;
    Ok(run.path)
}

pub fn cmd_inpaint(args: &InpaintArgs) -> CliResult<PathBuf> {
    let l = load_model_args(&args.model, |c| {
        if let Some(m) = args.mask {
            c.sampler.mask = Some(m);
        }
        if args.mask_eval {
            c.sampler.mask = None;
        }
    })?;
    if args.seeds == 0 {
        return Err(CliError::Config("--seeds must be at least 1".into()));
    }
    dispatch!(l.file.dtype, inpaint_impl(args, &l))
}

/// Salt of the stream that draws the evaluation mask.
const MASK_STREAM: u64 = 0x4d61736b;

fn inpaint_impl<F: Real>(args: &InpaintArgs, l: &Loaded) -> CliResult<PathBuf> {
    let cfg = &l.config;
    let model = l.model::<F>()?;
    let sched = cfg.schedule()?;
    let input = load_input(&args.input, cfg)?;
    let m = cfg.model.resolution;
    let (mask, rect) = match cfg.sampler.mask {
        Some([r, c, side]) => (Mask::square(m, r, c, side), [r, c, side]),
        None => {
            let mask = mask_for_eval(&mut rng::stream(cfg.seed, MASK_STREAM), m)?;
            let first = mask.unknown.iter().position(|&u| u).expect("non-empty mask");
            let side = tridiff_core::samplers::eval_mask_side(m);
            (mask, [first / m, first % m, side])
        }
    };
    let task = InpaintTask {
        target: from_unit::<F>(&input.image),
        mask,
        camera: input.camera,
    };
    let run = RunDir::create(&args.model.common.out, "inpaint", cfg)?;
    save_rgb(&run.join("target.png"), &input.image)?;
    let unknown = &task.mask.unknown;
    let mask_img = Tensor::from_fn(&[3, m, m], |i| if unknown[i % (m * m)] { 1.0 } else { 0.0 });
    save_rgb(&run.join("mask.png"), &mask_img)?;
    let masked = input
        .image
        .zip_map(&mask_img, |v, u| if u > 0.5 { 0.5 } else { v })?;
    save_rgb(&run.join("masked.png"), &masked)?;
    let seeds: Vec<u64> = (0..args.seeds as u64).map(|i| cfg.seed + i).collect();
    let outs = par::map(&seeds, cfg.effective_workers(), |&seed| -> CliResult<(Tensor<F>, usize)> {
        let s = inpaint(&model, &sched, &task, seed)?;
        let dir = run.subdir(&format!("seed_{seed}"))?;
        save_rgb(&dir.join("completion.png"), &to_unit(&s.image))?;
        save_render(&dir, "render", &model, &s, &task.camera)?;
        Ok((s.image, s.calls.len()))
    })?;
    let stats = completion_stats(&outs.iter().map(|o| &o.0).collect::<Vec<_>>(), &task);
    let extra = merge(
        model_metadata(l, &args.model, &sched),
        json!({
            "input": input.source,
            "seeds": seeds,
            "mask": {"row": rect[0], "col": rect[1], "side": rect[2], "rule": if cfg.sampler.mask.is_some() { "explicit" } else { "eval" }},
            "denoiser_calls": outs.iter().map(|o| o.1).collect::<Vec<_>>(),
            "known_pixels_exact": stats.known_exact,
            "masked_variance_mean": stats.masked_var,
            "known_variance_max": stats.known_var,
            "camera": pose_json(&task.camera),
            "depth": depth_json(&task.camera),
        }),
    );
    run.write_json(METADATA, &metadata("inpaint", cfg, extra))?;
    Ok(run.path)
}

/// Per-pixel variance across completions, split by mask region.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CompletionStats {
    pub masked_var: f64,
    pub known_var: f64,
    pub known_exact: bool,
}

pub fn completion_stats<F: Real>(outs: &[&Tensor<F>], task: &InpaintTask<F>) -> CompletionStats {
    let m2 = task.mask.unknown.len();
    let n = outs.len() as f64;
    let (mut masked, mut masked_n, mut known) = (0.0, 0usize, 0.0f64);
    let mut exact = true;
    for i in 0..3 * m2 {
        let vals: Vec<f64> = outs.iter().map(|o| o.data()[i].as_f64()).collect();
        let mean = vals.iter().sum::<f64>() / n;
        let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        if task.mask.unknown[i % m2] {
            masked += var;
            masked_n += 1;
        } else {
            known = known.max(var);
            exact &= outs.iter().all(|o| o.data()[i] == task.target.data()[i]);
        }
    }
    CompletionStats {
        masked_var: masked / masked_n.max(1) as f64,
        known_var: known,
        known_exact: exact,
    }
}

pub fn cmd_eval(args: &EvalArgs) -> CliResult<PathBuf> {
    let l = load_model_args(&args.model, |c| {
        if let Some(t) = args.tr {
            c.sampler.t_r = t;
        }
        if let Some(s) = args.scenes {
            c.data.scenes = s;
        }
        if let Some(s) = args.input_split {
            c.data.input_split = s;
        }
    })?;
    dispatch!(l.file.dtype, eval_impl(args, &l))
}

/// Evaluates scenes in parallel; each scene's seed depends only on its
/// index, so the report is independent of the worker count.
pub fn evaluate_parallel<F: Real>(
    model: &Denoiser<F>,
    sched: &NoiseSchedule,
    scenes: &[EvalScene],
    t_r: usize,
    seed: u64,
    workers: usize,
) -> CliResult<MetricReport> {
    let per = par::map(scenes, workers, |s| {
        evaluate_reconstruction(model, sched, std::slice::from_ref(s), t_r, seed)
    })?;
    let (mut images, mut inputs) = (Vec::new(), Vec::new());
    for r in per {
        images.extend(r.images);
        inputs.extend(r.inputs);
    }
    Ok(MetricReport::from_images(images)?.with_inputs(inputs))
}

pub fn report_text(r: &MetricReport) -> String {
    let mut s = String::from("scene  images  psnr_db   ssim\n");
    for sc in &r.scenes {
        s += &format!("{:>5}  {:>6}  {:>7.3}  {:.4}\n", sc.scene, sc.images, sc.psnr, sc.ssim);
    }
    s += &format!("all    {:>6}  {:>7.3}  {:.4}\n", r.images.len(), r.psnr, r.ssim);
    if let Some(p) = r.input_psnr {
        s += &format!("input  {:>6}  {:>7.3}\n", r.inputs.len(), p);
    }
    s
}

fn eval_impl<F: Real>(args: &EvalArgs, l: &Loaded) -> CliResult<PathBuf> {
    let cfg = &l.config;
    let model = l.model::<F>()?;
    let sched = cfg.schedule()?;
    let root = data_root(cfg)?;
    let d = Dataset::open(root)?;
    let scenes = d.eval_scenes(cfg.data.scenes, cfg.data.input_split)?;
    let run = RunDir::create(&args.model.common.out, "eval", cfg)?;
    let report = evaluate_parallel(&model, &sched, &scenes, cfg.sampler.t_r, cfg.seed, cfg.effective_workers())?;
    run.write_text("report.txt", &report_text(&report))?;
    let metrics = json!({
        "psnr": report.psnr,
        "ssim": report.ssim,
        "images": report.images.iter().map(|i| json!({"scene": i.scene, "view": i.view, "psnr": i.psnr, "ssim": i.ssim})).collect::<Vec<_>>(),
        "scenes": report.scenes.iter().map(|s| json!({"scene": s.scene, "images": s.images, "psnr": s.psnr, "ssim": s.ssim})).collect::<Vec<_>>(),
        "input_psnr": report.input_psnr,
        "inputs": report.inputs.iter().map(|i| json!({"scene": i.scene, "view": i.view, "psnr": i.psnr, "ssim": i.ssim})).collect::<Vec<_>>(),
    });
    run.write_json("metrics.json", &metrics)?;
    let extra = merge(
        model_metadata(l, &args.model, &sched),
        json!({
            "dataset": root,
            "manifest_sha256": file_sha256(&root.join(MANIFEST))?,
            "t_r": cfg.sampler.t_r,
            "scenes": cfg.data.scenes,
            "input_split": cfg.data.input_split,
            "denoiser_calls_per_scene": if cfg.sampler.t_r == 0 { 1 } else { cfg.sampler.t_r },
        }),
    );
    run.write_json(METADATA, &metadata("eval", cfg, extra))?;
    Ok(run.path)
}
