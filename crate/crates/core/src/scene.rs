//! Single-primitive scenes and an analytic ray tracer that renders them.
//!
//! The tracer shares no code with the volume renderer, so it can serve as
//! ground truth for it.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::camera::{add, dot, normalize, scale, sub, Camera, Ray, Vec3};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::triplane::FieldSample;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Shape {
    Sphere,
    Cube,
    Cylinder,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Sphere, Shape::Cube, Shape::Cylinder];

    pub fn name(self) -> &'static str {
        match self {
            Shape::Sphere => "sphere",
            Shape::Cube => "cube",
            Shape::Cylinder => "cylinder",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.name() == s)
    }
}

/// The eight CLEVR colors.
pub const PALETTE: [[f64; 3]; 8] = [
    [87.0 / 255.0, 87.0 / 255.0, 87.0 / 255.0],
    [173.0 / 255.0, 35.0 / 255.0, 35.0 / 255.0],
    [42.0 / 255.0, 75.0 / 255.0, 215.0 / 255.0],
    [29.0 / 255.0, 105.0 / 255.0, 20.0 / 255.0],
    [129.0 / 255.0, 74.0 / 255.0, 25.0 / 255.0],
    [129.0 / 255.0, 38.0 / 255.0, 192.0 / 255.0],
    [41.0 / 255.0, 208.0 / 255.0, 208.0 / 255.0],
    [1.0, 238.0 / 255.0, 51.0 / 255.0],
];

pub const GROUND_ALBEDO: [f64; 3] = [0.78, 0.78, 0.78];
pub const AMBIENT: f64 = 0.3;
/// Direction towards the light (unnormalized).
pub const LIGHT: Vec3 = [0.5, 0.3, 1.0];
/// Half side of the square ground patch.
pub const GROUND_HALF: f64 = 1.5;
pub const BACKGROUND: [f64; 3] = [1.0; 3];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SceneConfig {
    pub min_size: f64,
    pub max_size: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            min_size: 0.2,
            max_size: 0.45,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.min_size > 0.0 && self.min_size <= self.max_size && self.max_size < GROUND_HALF) {
            return Err(Error::InvalidConfig(
                "object size range must satisfy 0 < min <= max < 1.5".into(),
            ));
        }
        Ok(())
    }
}

/// One object on the ground plane `z = 0`, centered above the origin.
/// `size` is the radius (sphere, cylinder) or half side (cube); cylinders
/// are `2 size` tall.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SceneSpec {
    pub shape: Shape,
    pub size: f64,
    pub color: [f64; 3],
}

impl SceneSpec {
    pub fn center(&self) -> Vec3 {
        [0.0, 0.0, self.size]
    }

    pub fn lowest_z(&self) -> f64 {
        self.center()[2] - self.size
    }
}

pub fn sample_scene(rng: &mut impl Rng, cfg: &SceneConfig) -> SceneSpec {
    let shape = Shape::ALL[rng.random_range(0..3)];
    let size = if cfg.max_size > cfg.min_size {
        rng.random_range(cfg.min_size..=cfg.max_size)
    } else {
        cfg.min_size
    };
    let color = PALETTE[rng.random_range(0..PALETTE.len())];
    SceneSpec { shape, size, color }
}

fn light_dir() -> Vec3 {
    normalize(LIGHT)
}

/// Nearest intersection with the object beyond `t_min`: depth and outward normal.
pub fn intersect_object(
    scene: &SceneSpec,
    origin: Vec3,
    dir: Vec3,
    t_min: f64,
) -> Option<(f64, Vec3)> {
    let c = scene.center();
    let r = scene.size;
    let o = sub(origin, c);
    match scene.shape {
        Shape::Sphere => {
            let b = dot(o, dir);
            let cc = dot(o, o) - r * r;
            let disc = b * b - cc;
            if disc < 0.0 {
                return None;
            }
            let s = libm::sqrt(disc);
            [-b - s, -b + s]
                .into_iter()
                .find(|&t| t > t_min)
                .map(|t| (t, normalize(add(o, scale(dir, t)))))
        }
        Shape::Cube => {
            let (mut lo, mut hi) = (f64::NEG_INFINITY, f64::INFINITY);
            let (mut n_lo, mut n_hi) = ([0.0; 3], [0.0; 3]);
            for a in 0..3 {
                if dir[a].abs() < 1e-15 {
                    if o[a].abs() > r {
                        return None;
                    }
                    continue;
                }
                let mut t0 = (-r - o[a]) / dir[a];
                let mut t1 = (r - o[a]) / dir[a];
                let mut s = -1.0;
                if t0 > t1 {
                    core::mem::swap(&mut t0, &mut t1);
                    s = 1.0;
                }
                if t0 > lo {
                    lo = t0;
                    n_lo = [0.0; 3];
                    n_lo[a] = s;
                }
                if t1 < hi {
                    hi = t1;
                    n_hi = [0.0; 3];
                    n_hi[a] = -s;
                }
            }
            if lo > hi {
                return None;
            }
            if lo > t_min {
                Some((lo, n_lo))
            } else if hi > t_min {
                Some((hi, n_hi))
            } else {
                None
            }
        }
        Shape::Cylinder => {
            let mut best: Option<(f64, Vec3)> = None;
            let mut take = |t: f64, n: Vec3| {
                if t > t_min && best.is_none_or(|(b, _)| t < b) {
                    best = Some((t, n));
                }
            };
            let a = dir[0] * dir[0] + dir[1] * dir[1];
            if a > 1e-15 {
                let b = o[0] * dir[0] + o[1] * dir[1];
                let cc = o[0] * o[0] + o[1] * o[1] - r * r;
                let disc = b * b - a * cc;
                if disc >= 0.0 {
                    let s = libm::sqrt(disc);
                    for t in [(-b - s) / a, (-b + s) / a] {
                        let p = add(o, scale(dir, t));
                        if p[2].abs() <= r {
                            take(t, normalize([p[0], p[1], 0.0]));
                        }
                    }
                }
            }
            if dir[2].abs() > 1e-15 {
                for (cap, nz) in [(r, 1.0), (-r, -1.0)] {
                    let t = (cap - o[2]) / dir[2];
                    let p = add(o, scale(dir, t));
                    if p[0] * p[0] + p[1] * p[1] <= r * r {
                        take(t, [0.0, 0.0, nz]);
                    }
                }
            }
            best
        }
    }
}

/// What a primary ray hits.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Hit {
    Object { t: f64, normal: Vec3 },
    Ground { t: f64 },
    Background,
}

fn intersect_ground(origin: Vec3, dir: Vec3) -> Option<f64> {
    if dir[2] >= -1e-15 {
        return None;
    }
    let t = -origin[2] / dir[2];
    let p = add(origin, scale(dir, t));
    (t > 0.0 && p[0].abs() <= GROUND_HALF && p[1].abs() <= GROUND_HALF).then_some(t)
}

/// Primary hit within `[ray.near, ray.far]`.
pub fn trace(scene: &SceneSpec, ray: &Ray) -> Hit {
    let obj =
        intersect_object(scene, ray.origin, ray.direction, ray.near).filter(|&(t, _)| t <= ray.far);
    let ground =
        intersect_ground(ray.origin, ray.direction).filter(|&t| t >= ray.near && t <= ray.far);
    match (obj, ground) {
        (Some((t, n)), Some(g)) if t <= g => Hit::Object { t, normal: n },
        (Some((t, n)), None) => Hit::Object { t, normal: n },
        (_, Some(t)) => Hit::Ground { t },
        (None, None) => Hit::Background,
    }
}

fn lambert(albedo: [f64; 3], normal: Vec3, lit: bool) -> [f64; 3] {
    let d = if lit {
        dot(normal, light_dir()).max(0.0)
    } else {
        0.0
    };
    let k = AMBIENT + (1.0 - AMBIENT) * d;
    albedo.map(|a| (a * k).clamp(0.0, 1.0))
}

fn in_shadow(scene: &SceneSpec, p: Vec3) -> bool {
    intersect_object(scene, p, light_dir(), 1e-7).is_some()
}

/// Shaded color of an object surface point.
pub fn object_color(scene: &SceneSpec, p: Vec3, normal: Vec3) -> [f64; 3] {
    let lit = dot(normal, light_dir()) > 0.0 && !in_shadow(scene, add(p, scale(normal, 1e-6)));
    lambert(scene.color, normal, lit)
}

/// Shaded color of a ground point.
pub fn ground_color(scene: &SceneSpec, p: Vec3) -> [f64; 3] {
    let lit = !in_shadow(scene, [p[0], p[1], 1e-9]);
    lambert(GROUND_ALBEDO, [0.0, 0.0, 1.0], lit)
}

/// Color along one ray.
pub fn shade_ray(scene: &SceneSpec, ray: &Ray) -> [f64; 3] {
    match trace(scene, ray) {
        Hit::Object { t, normal } => object_color(scene, ray.at(t), normal),
        Hit::Ground { t } => ground_color(scene, ray.at(t)),
        Hit::Background => BACKGROUND,
    }
}

/// Channel-first `[3, M, M]` image in `[0, 1]`.
pub fn oracle_render(scene: &SceneSpec, cam: &Camera) -> Tensor<f64> {
    let m = cam.resolution;
    let mut out = vec![0.0; 3 * m * m];
    for (i, ray) in cam.rays().iter().enumerate() {
        let c = shade_ray(scene, ray);
        for ch in 0..3 {
            out[ch * m * m + i] = c[ch];
        }
    }
    Tensor::new(&[3, m, m], out).expect("sized")
}

/// Pixels whose primary hit is the object, row-major.
pub fn object_mask(scene: &SceneSpec, cam: &Camera) -> Vec<bool> {
    cam.rays()
        .iter()
        .map(|r| matches!(trace(scene, r), Hit::Object { .. }))
        .collect()
}

/// Signed distance to the object surface and the normal of the closest face.
pub fn object_sdf(scene: &SceneSpec, p: Vec3) -> (f64, Vec3) {
    let q = sub(p, scene.center());
    let r = scene.size;
    match scene.shape {
        Shape::Sphere => (
            libm::sqrt(dot(q, q)) - r,
            normalize(if dot(q, q) > 0.0 { q } else { [0.0, 0.0, 1.0] }),
        ),
        Shape::Cube => {
            let d = q.map(|v| v.abs() - r);
            let a = (0..3)
                .max_by(|&i, &j| d[i].partial_cmp(&d[j]).expect("finite"))
                .expect("3 axes");
            let mut n = [0.0; 3];
            n[a] = if q[a] >= 0.0 { 1.0 } else { -1.0 };
            let outside = libm::sqrt(d.iter().map(|v| v.max(0.0) * v.max(0.0)).sum::<f64>());
            (outside + d[a].min(0.0), n)
        }
        Shape::Cylinder => {
            let rad = libm::sqrt(q[0] * q[0] + q[1] * q[1]);
            let (dr, dz) = (rad - r, q[2].abs() - r);
            let n = if dr > dz {
                normalize(if rad > 0.0 {
                    [q[0], q[1], 0.0]
                } else {
                    [1.0, 0.0, 0.0]
                })
            } else {
                [0.0, 0.0, if q[2] >= 0.0 { 1.0 } else { -1.0 }]
            };
            let outside = libm::sqrt(dr.max(0.0) * dr.max(0.0) + dz.max(0.0) * dz.max(0.0));
            (outside + dr.max(dz).min(0.0), n)
        }
    }
}

/// Volumetric stand-in for a scene: constant `density` inside the object and
/// inside a thin slab under the ground patch, colored by the shading of the
/// closest surface.
pub fn scene_field_sample(scene: &SceneSpec, p: Vec3, density: f64, slab: f64) -> FieldSample {
    let (d, n) = object_sdf(scene, p);
    if d <= 0.0 {
        let surface = sub(p, scale(n, d));
        return FieldSample {
            gamma: density,
            color: object_color(scene, surface, n),
        };
    }
    if p[2] <= 0.0 && p[2] >= -slab && p[0].abs() <= GROUND_HALF && p[1].abs() <= GROUND_HALF {
        return FieldSample {
            gamma: density,
            color: ground_color(scene, [p[0], p[1], 0.0]),
        };
    }
    FieldSample {
        gamma: 0.0,
        color: [0.0; 3],
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::{look_at_pose, DEFAULT_RADIUS};
    use crate::rng::seeded;

    fn sphere(r: f64) -> SceneSpec {
        SceneSpec {
            shape: Shape::Sphere,
            size: r,
            color: PALETTE[1],
        }
    }

    #[test]
    fn shapes_are_uniform() {
        let mut rng = seeded(5);
        let cfg = SceneConfig::default();
        let mut counts = [0usize; 3];
        for _ in 0..10_000 {
            let s = sample_scene(&mut rng, &cfg);
            assert!(s.size >= cfg.min_size && s.size <= cfg.max_size);
            assert!(s.lowest_z().abs() < 1e-15);
            counts[Shape::ALL.iter().position(|&x| x == s.shape).unwrap()] += 1;
        }
        let e = 10_000.0 / 3.0;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - e).powi(2) / e).sum();
        // 2 dof, p = 0.001
        assert!(chi2 < 13.82, "{counts:?}");
    }

    #[test]
    fn sphere_rests_on_ground() {
        assert_eq!(sphere(0.3).center(), [0.0, 0.0, 0.3]);
    }

    #[test]
    fn empty_ground_from_above() {
        // object far below the view: a zero-size sphere leaves only ground
        let scene = SceneSpec {
            size: 1e-9,
            ..sphere(0.3)
        };
        let cam = Camera::new(16, look_at_pose(0.0, 1.5, 2.5, [0.0; 3]).unwrap());
        let img = oracle_render(&scene, &cam);
        assert!(object_mask(&scene, &cam).iter().all(|&m| !m));
        let lit = lambert(GROUND_ALBEDO, [0.0, 0.0, 1.0], true);
        for ch in 0..3 {
            for &v in &img.data()[ch * 256..(ch + 1) * 256] {
                assert!((v - lit[ch]).abs() < 1e-12 || v == 1.0);
            }
        }
    }

    #[test]
    fn sphere_silhouette_radius() {
        let r = 0.4;
        let scene = sphere(r);
        let m = 64;
        let cam = Camera::new(
            m,
            look_at_pose(0.3, 0.6, DEFAULT_RADIUS, scene.center()).unwrap(),
        );
        let count = object_mask(&scene, &cam).iter().filter(|&&b| b).count() as f64;
        let dist = DEFAULT_RADIUS;
        // angular radius of the sphere projected through the pinhole
        let half = libm::asin(r / dist);
        let radius_px = cam.focal * libm::tan(half);
        let measured = libm::sqrt(count / core::f64::consts::PI);
        assert!(
            (measured - radius_px).abs() < 1.0,
            "{measured} vs {radius_px}"
        );
    }

    #[test]
    fn render_is_reproducible() {
        let mut rng = seeded(9);
        let scene = sample_scene(&mut rng, &SceneConfig::default());
        let cam = Camera::new(24, look_at_pose(2.0, 0.4, 2.5, [0.0; 3]).unwrap());
        assert_eq!(oracle_render(&scene, &cam), oracle_render(&scene, &cam));
    }

    #[test]
    fn cube_and_cylinder_hits() {
        for shape in [Shape::Cube, Shape::Cylinder] {
            let scene = SceneSpec {
                shape,
                size: 0.3,
                color: PALETTE[2],
            };
            let (t, n) = intersect_object(&scene, [2.0, 0.0, 0.3], [-1.0, 0.0, 0.0], 0.0).unwrap();
            assert!((t - 1.7).abs() < 1e-12);
            assert!((n[0] - 1.0).abs() < 1e-12);
            let (t, n) = intersect_object(&scene, [0.0, 0.0, 2.0], [0.0, 0.0, -1.0], 0.0).unwrap();
            assert!((t - 1.4).abs() < 1e-12);
            assert_eq!(n, [0.0, 0.0, 1.0]);
            assert!(intersect_object(&scene, [2.0, 0.0, 0.7], [-1.0, 0.0, 0.0], 0.0).is_none());
        }
    }

    #[test]
    fn sdf_sign_matches_membership() {
        let mut rng = seeded(3);
        for shape in Shape::ALL {
            let scene = SceneSpec {
                shape,
                size: 0.35,
                color: PALETTE[0],
            };
            for _ in 0..500 {
                let p = [
                    rng.random_range(-0.6..0.6),
                    rng.random_range(-0.6..0.6),
                    rng.random_range(-0.2..1.0),
                ];
                let (d, _) = object_sdf(&scene, p);
                // a ray from p straight up exits the object iff p is inside
                let q = sub(p, scene.center());
                let inside = match shape {
                    Shape::Sphere => dot(q, q) < 0.35f64.powi(2),
                    Shape::Cube => q.iter().all(|v| v.abs() < 0.35),
                    Shape::Cylinder => {
                        q[0] * q[0] + q[1] * q[1] < 0.35f64.powi(2) && q[2].abs() < 0.35
                    }
                };
                assert_eq!(d < 0.0, inside, "{shape:?} {p:?} {d}");
            }
        }
    }

    #[test]
    fn object_center_projects_inside_image() {
        let mut rng = seeded(12);
        for _ in 0..200 {
            let pose = crate::camera::sample_hemisphere_pose(
                &mut rng,
                12f64.to_radians(),
                DEFAULT_RADIUS,
                [0.0; 3],
            )
            .unwrap();
            let cam = Camera::new(32, pose);
            let (x, y, z) = cam.project([0.0, 0.0, 0.3]);
            assert!(z > 0.0 && (0.0..32.0).contains(&x) && (0.0..32.0).contains(&y));
        }
    }
}
