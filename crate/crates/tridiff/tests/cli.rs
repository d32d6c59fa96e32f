//! End-to-end runs of the `tridiff` binary on a tiny model.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tridiff::checkpoint::CheckpointFile;

const TINY: &str = r#"
seed = 3
[model]
resolution = 16
triplane_resolution = 16
n_f = 4
n_freq = 2
hidden = 8
widths = [8]
res_blocks = 1
groups = 4
time_dim = 8
[schedule]
steps = 8
[render]
n_coarse = 4
n_fine = 4
[train]
batch = 3
steps = 4
checkpoint_every = 2
score_distillation = true
lambda_sd = 0.1
rho_sd = 0.5
ema_decay = 0.5
"#;

fn tridiff(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tridiff"))
        .args(args)
        .current_dir(cwd)
        .env_remove("TRIDIFF_DATA")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str], cwd: &Path) -> String {
    let out = tridiff(args, cwd);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

/// Path printed on the last stdout line.
fn run_dir(stdout: &str, cwd: &Path) -> PathBuf {
    cwd.join(stdout.lines().last().unwrap().trim())
}

/// Every file under `root` by relative path. The wall-clock field of the
/// training log is dropped.
fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
                continue;
            }
            let mut bytes = fs::read(&p).unwrap();
            if p.file_name().unwrap() == "train_log.jsonl" {
                let text = String::from_utf8(bytes).unwrap();
                let lines: Vec<String> = text
                    .lines()
                    .map(|l| {
                        let mut v: Value = serde_json::from_str(l).unwrap();
                        v.as_object_mut().unwrap().remove("seconds");
                        v.to_string()
                    })
                    .collect();
                bytes = lines.join("\n").into_bytes();
            }
            out.insert(p.strip_prefix(root).unwrap().to_path_buf(), bytes);
        }
    }
    out
}

fn metadata(dir: &Path) -> Value {
    serde_json::from_slice(&fs::read(dir.join("metadata.json")).unwrap()).unwrap()
}

struct Fixture {
    _tmp: tempfile::TempDir,
    root: PathBuf,
}

impl Fixture {
    fn new() -> Self {
        let tmp = tempfile::tempdir().unwrap();
        let root = tmp.path().to_path_buf();
        fs::write(root.join("tiny.toml"), TINY).unwrap();
        ok(
            &[
                "gen-dataset", "--scenes", "3", "--views-train", "2", "--views-test", "3",
                "--test-scenes", "1", "--res", "16", "--seed", "2", "--out", "data",
            ],
            &root,
        );
        Self { _tmp: tmp, root }
    }

    fn train(&self, out: &str, extra: &[&str]) -> PathBuf {
        let mut args = vec![
            "train", "--config", "tiny.toml", "--data", "data", "--out", out, "--quiet",
        ];
        args.extend_from_slice(extra);
        run_dir(&ok(&args, &self.root), &self.root)
    }
}

fn final_checkpoint(run: &Path) -> PathBuf {
    run.join(metadata(run)["final_checkpoint"].as_str().unwrap())
}

#[test]
fn gen_dataset_writes_the_desk_default_and_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let args = |out: &'static str| {
        vec![
            "gen-dataset", "--scenes", "16", "--views-train", "8", "--views-test", "4", "--res",
            "32", "--seed", "1", "--out", out, "--workers", "2",
        ]
    };
    ok(&args("a"), tmp.path());
    ok(&args("b"), tmp.path());
    let a = tree(&tmp.path().join("a"));
    let pngs = a.keys().filter(|p| p.extension().is_some_and(|e| e == "png")).count();
    assert_eq!(pngs, 192);
    assert!(a.contains_key(Path::new("manifest.toml")));
    assert_eq!(a, tree(&tmp.path().join("b")));
}

#[test]
fn usage_and_config_errors_exit_with_1() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tridiff(&["gen-dataset", "--scenes", "0", "--out", "d"], tmp.path());
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(tridiff(&["frobnicate"], tmp.path()).status.code(), Some(1));
    fs::write(tmp.path().join("bad.toml"), "[train]\nbatchsize = 2\n").unwrap();
    let out = tridiff(&["train", "--config", "bad.toml", "--data", "d"], tmp.path());
    assert_eq!(out.status.code(), Some(1));
    let out = tridiff(&["train", "--steps", "1"], tmp.path());
    assert_eq!(out.status.code(), Some(1), "no dataset configured");
}

#[test]
fn missing_inputs_exit_with_2_naming_the_path() {
    let fx = Fixture::new();
    let out = tridiff(&["eval", "--checkpoint", "missing.ckpt", "--data", "data"], &fx.root);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.ckpt"));
    let out = tridiff(
        &["train", "--config", "tiny.toml", "--data", "nowhere", "--quiet"],
        &fx.root,
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nowhere"));
}

#[test]
fn data_root_falls_back_to_the_environment() {
    let fx = Fixture::new();
    let out = Command::new(env!("CARGO_BIN_EXE_tridiff"))
        .args(["train", "--config", "tiny.toml", "--steps", "1", "--out", "r", "--quiet"])
        .current_dir(&fx.root)
        .env("TRIDIFF_DATA", fx.root.join("data"))
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn every_command_is_bit_identical_in_deterministic_mode() {
    let fx = Fixture::new();
    let data_before = tree(&fx.root.join("data"));
    let a = fx.train("ra", &["--deterministic"]);
    let b = fx.train("rb", &["--deterministic"]);
    assert_eq!(tree(&a), tree(&b));
    // worker count does not change the arithmetic
    let c = fx.train("rc", &["--workers", "3"]);
    let pa = CheckpointFile::read(&final_checkpoint(&a)).unwrap();
    let pc = CheckpointFile::read(&final_checkpoint(&c)).unwrap();
    assert_eq!(pa.tensors, pc.tensors);

    let ck = final_checkpoint(&a);
    let ck_bytes = fs::read(&ck).unwrap();
    let ck = ck.to_str().unwrap();
    let commands: Vec<Vec<&str>> = vec![
        vec!["generate", "--checkpoint", ck, "--seed", "7", "--orbit", "2"],
        vec!["reconstruct", "--checkpoint", ck, "--data", "data", "--scene", "1", "--view", "0", "--tr", "3"],
        vec!["inpaint", "--checkpoint", ck, "--data", "data", "--scene", "0", "--view", "2", "--seeds", "2"],
        vec!["eval", "--checkpoint", ck, "--data", "data", "--scenes", "train", "--input-split", "train"],
    ];
    for cmd in commands {
        let mut x = cmd.clone();
        x.extend(["--deterministic", "--out", "x"]);
        let mut y = cmd.clone();
        y.extend(["--deterministic", "--out", "y"]);
        let dx = run_dir(&ok(&x, &fx.root), &fx.root);
        let dy = run_dir(&ok(&y, &fx.root), &fx.root);
        assert_ne!(dx, dy);
        assert_eq!(tree(&dx), tree(&dy), "{}", cmd[0]);
    }
    assert_eq!(fs::read(ck).unwrap(), ck_bytes, "checkpoint mutated");
    assert_eq!(tree(&fx.root.join("data")), data_before, "dataset mutated");
}

#[test]
fn resumed_training_matches_an_uninterrupted_run() {
    let fx = Fixture::new();
    let full = fx.train("full", &["--deterministic"]);
    let half = fx.train("half", &["--deterministic", "--steps", "2"]);
    let ck = final_checkpoint(&half);
    let resumed = fx.train(
        "resumed",
        &["--deterministic", "--resume", ck.to_str().unwrap(), "--steps", "4"],
    );
    let a = CheckpointFile::read(&final_checkpoint(&full)).unwrap();
    let b = CheckpointFile::read(&final_checkpoint(&resumed)).unwrap();
    assert!(a.has_ema());
    assert_eq!(a.step, 4);
    assert_eq!(b.step, 4);
    assert_eq!(a.tensors, b.tensors);
    let log = |d: &Path| tridiff::train::read_log(&d.join("train_log.jsonl")).unwrap();
    let mut joined = log(&half);
    joined.extend(log(&resumed));
    let strip = |v: Vec<tridiff::train::LogRecord>| {
        v.into_iter().map(|r| (r.step, r.denoise_loss, r.sd_loss)).collect::<Vec<_>>()
    };
    assert_eq!(strip(joined), strip(log(&full)));
}

#[test]
fn divergence_exits_with_2_and_keeps_the_last_checkpoint() {
    let fx = Fixture::new();
    let out = tridiff(
        &[
            "train", "--config", "tiny.toml", "--data", "data", "--out", "div", "--quiet",
            "--lr", "1e30", "--steps", "50", "--checkpoint-every", "1",
        ],
        &fx.root,
    );
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr).to_string();
    assert!(err.contains("non-finite"), "{err}");
    let run = fs::read_dir(fx.root.join("div")).unwrap().next().unwrap().unwrap().path();
    let meta = metadata(&run);
    assert!(meta["error"].as_str().unwrap().contains("non-finite"));
    let ckpts: Vec<_> = fs::read_dir(run.join("checkpoints")).unwrap().collect();
    assert!(!ckpts.is_empty());
    for c in ckpts {
        CheckpointFile::read(&c.unwrap().path()).unwrap();
    }
}

#[test]
fn reconstruct_with_tr_0_calls_the_denoiser_once() {
    let fx = Fixture::new();
    let ck = final_checkpoint(&fx.train("r", &["--steps", "1"]));
    let out = ok(
        &[
            "reconstruct", "--checkpoint", ck.to_str().unwrap(), "--data", "data", "--tr", "0",
            "--out", "rec",
        ],
        &fx.root,
    );
    let dir = run_dir(&out, &fx.root);
    let meta = metadata(&dir);
    assert_eq!(meta["denoiser_calls"], 1);
    assert_eq!(meta["t_r"], 0);
    for f in ["input.png", "reconstruction.png", "render.png", "render_depth.png", "config.toml"] {
        assert!(dir.join(f).exists(), "{f}");
    }
    let depth = image::open(dir.join("render_depth.png")).unwrap();
    assert_eq!(depth.color(), image::ColorType::L16);
    assert_eq!(meta["depth"]["near"], 0.5);
}

#[test]
fn inpaint_with_the_eval_mask_writes_one_completion_per_seed() {
    let fx = Fixture::new();
    let ck = final_checkpoint(&fx.train("r", &["--steps", "1"]));
    let out = ok(
        &[
            "inpaint", "--checkpoint", ck.to_str().unwrap(), "--data", "data", "--mask-eval",
            "--seeds", "10", "--out", "inp",
        ],
        &fx.root,
    );
    let dir = run_dir(&out, &fx.root);
    let meta = metadata(&dir);
    assert_eq!(meta["seeds"].as_array().unwrap().len(), 10);
    assert_eq!(meta["mask"]["side"], 6);
    assert_eq!(meta["known_pixels_exact"], true);
    assert_eq!(meta["known_variance_max"], 0.0);
    assert!(meta["masked_variance_mean"].as_f64().unwrap() > 0.0);
    for s in 3..13 {
        assert!(dir.join(format!("seed_{s}/completion.png")).exists());
    }
}

#[test]
fn moving_average_weights_are_opt_in_for_sampling() {
    let fx = Fixture::new();
    let with = final_checkpoint(&fx.train("a", &["--steps", "2"]));
    let without = final_checkpoint(&fx.train("b", &["--steps", "2", "--ema-decay", "0"]));
    let run = |ck: &Path, ema: bool| {
        let mut args = vec!["generate", "--checkpoint", ck.to_str().unwrap(), "--out", "g"];
        if ema {
            args.push("--ema");
        }
        tridiff(&args, &fx.root)
    };
    assert!(run(&with, true).status.success());
    assert_eq!(run(&without, true).status.code(), Some(1));
    assert!(run(&without, false).status.success());
}

#[test]
fn score_distillation_is_off_unless_requested() {
    let fx = Fixture::new();
    fs::write(fx.root.join("plain.toml"), TINY.replace("score_distillation = true\n", "")).unwrap();
    let out = ok(
        &["train", "--config", "plain.toml", "--data", "data", "--out", "p", "--quiet"],
        &fx.root,
    );
    let log = tridiff::train::read_log(&run_dir(&out, &fx.root).join("train_log.jsonl")).unwrap();
    assert!(log.iter().all(|r| r.sd_loss == 0.0));
    let out = ok(
        &["train", "--config", "plain.toml", "--data", "data", "--out", "q", "--quiet", "--sd", "--rho-sd", "1"],
        &fx.root,
    );
    let log = tridiff::train::read_log(&run_dir(&out, &fx.root).join("train_log.jsonl")).unwrap();
    assert!(log.iter().all(|r| r.sd_loss > 0.0));
}
