//! On-disk single-object dataset: `manifest.toml` plus
//! `scene_<k>/view_<j>.png`, views numbered train first, then test.
//!
//! Manifest schema (format version 1):
//!
//! ```toml
//! format_version = 1
//! generator_seed = 1
//! resolution = 32
//! views_train = 8
//! views_test = 4
//! test_scenes = 0        # trailing scenes reserved for evaluation
//! min_size = 0.2
//! max_size = 0.45
//!
//! [[scenes]]
//! index = 0
//! split = "train"        # scene split
//! shape = "sphere"
//! size = 0.31
//! color = [0.34, 0.34, 0.34]
//!
//! [[scenes.views]]
//! index = 0
//! split = "train"        # view split within the scene
//! file = "scene_0/view_0.png"
//!
//! [scenes.views.camera]
//! resolution = 32
//! rotation = [...]       # 9 numbers, row-major camera-to-world
//! position = [...]
//! focal = 43.96
//! principal = [16.0, 16.0]
//! near = 0.5
//! far = 6.0
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tridiff_core::camera::{sample_hemisphere_pose, Pose, DEFAULT_MIN_ELEVATION_DEG, DEFAULT_RADIUS};
use tridiff_core::metrics::{EvalScene, View};
use tridiff_core::scene::{oracle_render, sample_scene, SceneConfig, SceneSpec, Shape};
use tridiff_core::training::Example;
use tridiff_core::{rng, Camera, Real, Tensor};

use crate::config::Split;
use crate::error::{CliError, CliResult};
use crate::image_io;

pub const MANIFEST: &str = "manifest.toml";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraRecord {
    pub resolution: usize,
    pub rotation: [f64; 9],
    pub position: [f64; 3],
    pub focal: f64,
    pub principal: [f64; 2],
    pub near: f64,
    pub far: f64,
}

impl From<&Camera> for CameraRecord {
    fn from(c: &Camera) -> Self {
        Self {
            resolution: c.resolution,
            rotation: c.pose.rotation_flat(),
            position: c.pose.position,
            focal: c.focal,
            principal: c.principal,
            near: c.near,
            far: c.far,
        }
    }
}

impl CameraRecord {
    pub fn camera(&self) -> CliResult<Camera> {
        let r = &self.rotation;
        let cam = Camera {
            resolution: self.resolution,
            focal: self.focal,
            principal: self.principal,
            pose: Pose {
                rotation: [[r[0], r[1], r[2]], [r[3], r[4], r[5]], [r[6], r[7], r[8]]],
                position: self.position,
            },
            near: self.near,
            far: self.far,
        };
        cam.validate()?;
        Ok(cam)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViewRecord {
    pub index: usize,
    pub split: Split,
    pub file: PathBuf,
    pub camera: CameraRecord,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneRecord {
    pub index: usize,
    pub split: Split,
    pub shape: String,
    pub size: f64,
    pub color: [f64; 3],
    pub views: Vec<ViewRecord>,
}

impl SceneRecord {
    pub fn spec(&self) -> CliResult<SceneSpec> {
        let shape = Shape::from_name(&self.shape)
            .ok_or_else(|| CliError::Config(format!("unknown shape {:?}", self.shape)))?;
        Ok(SceneSpec {
            shape,
            size: self.size,
            color: self.color,
        })
    }

    pub fn views_in(&self, split: Split) -> impl Iterator<Item = &ViewRecord> {
        self.views.iter().filter(move |v| v.split == split)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub generator_seed: u64,
    pub resolution: usize,
    pub views_train: usize,
    pub views_test: usize,
    #[serde(default)]
    pub test_scenes: usize,
    pub min_size: f64,
    pub max_size: f64,
    pub scenes: Vec<SceneRecord>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetConfig {
    pub scenes: usize,
    pub views_train: usize,
    pub views_test: usize,
    pub test_scenes: usize,
    pub resolution: usize,
    pub seed: u64,
    pub objects: SceneConfig,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            scenes: 16,
            views_train: 8,
            views_test: 4,
            test_scenes: 0,
            resolution: 32,
            seed: 1,
            objects: SceneConfig::default(),
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> CliResult<()> {
        if self.scenes == 0 {
            return Err(CliError::Config("--scenes must be at least 1".into()));
        }
        if self.views_train + self.views_test == 0 {
            return Err(CliError::Config("each scene needs at least one view".into()));
        }
        if self.test_scenes > self.scenes {
            return Err(CliError::Config("more test scenes than scenes".into()));
        }
        if self.resolution == 0 {
            return Err(CliError::Config("--res must be at least 1".into()));
        }
        self.objects.validate()?;
        Ok(())
    }
}

fn view_file(scene: usize, view: usize) -> PathBuf {
    PathBuf::from(format!("scene_{scene}")).join(format!("view_{view}.png"))
}

/// Samples every scene and camera; pure function of the config.
pub fn plan_dataset(cfg: &DatasetConfig) -> CliResult<Manifest> {
    cfg.validate()?;
    let min_el = DEFAULT_MIN_ELEVATION_DEG.to_radians();
    let mut scenes = Vec::with_capacity(cfg.scenes);
    for k in 0..cfg.scenes {
        let mut r = rng::stream(cfg.seed, k as u64);
        let spec = sample_scene(&mut r, &cfg.objects);
        let views = (0..cfg.views_train + cfg.views_test)
            .map(|j| {
                let pose = sample_hemisphere_pose(&mut r, min_el, DEFAULT_RADIUS, [0.0; 3])?;
                let cam = Camera::new(cfg.resolution, pose);
                Ok(ViewRecord {
                    index: j,
                    split: if j < cfg.views_train { Split::Train } else { Split::Test },
                    file: view_file(k, j),
                    camera: CameraRecord::from(&cam),
                })
            })
            .collect::<CliResult<Vec<_>>>()?;
        scenes.push(SceneRecord {
            index: k,
            split: if k >= cfg.scenes - cfg.test_scenes { Split::Test } else { Split::Train },
            shape: spec.shape.name().to_string(),
            size: spec.size,
            color: spec.color,
            views,
        });
    }
    Ok(Manifest {
        format_version: MANIFEST_VERSION,
        generator_seed: cfg.seed,
        resolution: cfg.resolution,
        views_train: cfg.views_train,
        views_test: cfg.views_test,
        test_scenes: cfg.test_scenes,
        min_size: cfg.objects.min_size,
        max_size: cfg.objects.max_size,
        scenes,
    })
}

/// Renders all views with the oracle ray tracer, spread over `workers`
/// threads, then writes the manifest.
pub fn generate_dataset(cfg: &DatasetConfig, out: &Path, workers: usize) -> CliResult<Manifest> {
    let manifest = plan_dataset(cfg)?;
    for s in &manifest.scenes {
        let dir = out.join(format!("scene_{}", s.index));
        fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
    }
    let jobs: Vec<(&SceneRecord, &ViewRecord)> = manifest
        .scenes
        .iter()
        .flat_map(|s| s.views.iter().map(move |v| (s, v)))
        .collect();
    let workers = workers.max(1).min(jobs.len().max(1));
    let chunk = jobs.len().div_ceil(workers);
    std::thread::scope(|scope| {
        let handles: Vec<_> = jobs
            .chunks(chunk.max(1))
            .map(|part| {
                scope.spawn(move || -> CliResult<()> {
                    for (s, v) in part {
                        let img = oracle_render(&s.spec()?, &v.camera.camera()?);
                        image_io::save_rgb(&out.join(&v.file), &img)?;
                    }
                    Ok(())
                })
            })
            .collect();
        handles
            .into_iter()
            .try_for_each(|h| h.join().expect("render worker panicked"))
    })?;
    let path = out.join(MANIFEST);
    let text = toml::to_string(&manifest).expect("manifest serializes");
    fs::write(&path, text).map_err(|e| CliError::io(&path, e))?;
    Ok(manifest)
}

/// A loaded dataset root.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
}

impl Dataset {
    pub fn open(root: &Path) -> CliResult<Self> {
        let path = root.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
        let manifest: Manifest =
            toml::from_str(&text).map_err(|e| CliError::format(&path, e.to_string()))?;
        if manifest.format_version != MANIFEST_VERSION {
            return Err(CliError::format(
                &path,
                format!("unsupported manifest version {}", manifest.format_version),
            ));
        }
        for s in &manifest.scenes {
            for v in &s.views {
                if v.camera.resolution != manifest.resolution {
                    return Err(CliError::format(&path, "camera resolution differs from dataset"));
                }
            }
        }
        Ok(Self {
            root: root.to_path_buf(),
            manifest,
        })
    }

    pub fn scene(&self, k: usize) -> CliResult<&SceneRecord> {
        self.manifest.scenes.get(k).ok_or_else(|| {
            CliError::Config(format!(
                "scene {k} not in dataset ({} scenes)",
                self.manifest.scenes.len()
            ))
        })
    }

    pub fn view(&self, scene: usize, view: usize) -> CliResult<&ViewRecord> {
        let s = self.scene(scene)?;
        s.views
            .get(view)
            .ok_or_else(|| CliError::Config(format!("scene {scene} has no view {view}")))
    }

    /// Image of a view in `[0, 1]`.
    pub fn load_image(&self, v: &ViewRecord) -> CliResult<Tensor<f64>> {
        let img = image_io::load_rgb(&self.root.join(&v.file))?;
        let m = self.manifest.resolution;
        if img.shape() != [3, m, m] {
            return Err(CliError::format(
                &self.root.join(&v.file),
                format!("expected a {m}x{m} image"),
            ));
        }
        Ok(img)
    }

    /// Train views of train scenes in manifest order, mapped to `[-1, 1]`.
    pub fn training_examples<F: Real>(&self) -> CliResult<Vec<Example<F>>> {
        let mut out = Vec::new();
        for s in self.manifest.scenes.iter().filter(|s| s.split == Split::Train) {
            for v in s.views_in(Split::Train) {
                out.push(Example {
                    image: self.load_image(v)?.map(|x| 2.0 * x - 1.0).cast(),
                    camera: v.camera.camera()?,
                });
            }
        }
        if out.is_empty() {
            return Err(CliError::Config(format!(
                "{} has no training views",
                self.root.display()
            )));
        }
        Ok(out)
    }

    /// Evaluation scenes: the input is the first view of `input_split`, the
    /// held-out set is every test view other than the input.
    pub fn eval_scenes(&self, scenes: Split, input_split: Split) -> CliResult<Vec<EvalScene>> {
        let mut out = Vec::new();
        for s in self.manifest.scenes.iter().filter(|s| s.split == scenes) {
            let Some(input) = s.views_in(input_split).next() else {
                continue;
            };
            let to_view = |v: &ViewRecord| -> CliResult<View> {
                Ok(View {
                    index: v.index,
                    image: self.load_image(v)?,
                    camera: v.camera.camera()?,
                })
            };
            let held_out = s
                .views_in(Split::Test)
                .filter(|v| v.index != input.index)
                .map(to_view)
                .collect::<CliResult<Vec<_>>>()?;
            out.push(EvalScene {
                scene: s.index,
                input: to_view(input)?,
                held_out,
            });
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> DatasetConfig {
        DatasetConfig {
            scenes: 3,
            views_train: 2,
            views_test: 1,
            test_scenes: 1,
            resolution: 16,
            ..DatasetConfig::default()
        }
    }

    #[test]
    fn planning_is_a_function_of_the_config() {
        assert_eq!(plan_dataset(&small()).unwrap(), plan_dataset(&small()).unwrap());
        let mut other = small();
        other.seed = 2;
        assert_ne!(plan_dataset(&small()).unwrap(), plan_dataset(&other).unwrap());
    }

    #[test]
    fn every_camera_sees_the_object_center() {
        let m = plan_dataset(&DatasetConfig::default()).unwrap();
        assert_eq!(m.scenes.iter().map(|s| s.views.len()).sum::<usize>(), 192);
        for s in &m.scenes {
            let center = s.spec().unwrap().center();
            for v in &s.views {
                let (x, y, z) = v.camera.camera().unwrap().project(center);
                assert!(z > 0.0);
                assert!((0.0..32.0).contains(&x) && (0.0..32.0).contains(&y));
            }
        }
    }

    #[test]
    fn manifest_round_trips_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let m = generate_dataset(&small(), dir.path(), 2).unwrap();
        let d = Dataset::open(dir.path()).unwrap();
        assert_eq!(d.manifest, m);
        for s in &m.scenes {
            for v in &s.views {
                assert!(dir.path().join(&v.file).exists());
                let cam = v.camera.camera().unwrap();
                let back = CameraRecord::from(&cam);
                assert_eq!(back, v.camera);
            }
        }
        assert_eq!(d.training_examples::<f64>().unwrap().len(), 4);
        let eval = d.eval_scenes(Split::Test, Split::Test).unwrap();
        assert_eq!(eval.len(), 1);
        assert_eq!(eval[0].scene, 2);
        assert!(eval[0].held_out.is_empty());
        let eval = d.eval_scenes(Split::Train, Split::Train).unwrap();
        assert_eq!(eval.len(), 2);
        assert_eq!(eval[0].held_out.len(), 1);
    }

    #[test]
    fn zero_scenes_is_rejected() {
        let cfg = DatasetConfig {
            scenes: 0,
            ..DatasetConfig::default()
        };
        assert_eq!(plan_dataset(&cfg).unwrap_err().exit_code(), 1);
    }
}
