//! Pinhole cameras, look-at poses and per-pixel rays.
//!
//! World frame: right-handed, `+z` up, ground plane `z = 0`. Camera frame:
//! `x` right, `y` down, `z` forward. The rotation maps camera to world, so
//! its columns are the camera's right, down and forward axes in world space.
//! Pixel `(row, col)` has its center at `(col + 0.5, row + 0.5)`.

use core::f64::consts::{FRAC_PI_2, PI};

use rand::Rng;

use crate::error::{Error, Result};

pub type Vec3 = [f64; 3];

pub fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn scale(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

pub fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub fn norm(a: Vec3) -> f64 {
    libm::sqrt(dot(a, a))
}

pub fn normalize(a: Vec3) -> Vec3 {
    scale(a, 1.0 / norm(a))
}

pub const DEFAULT_FOV_DEG: f64 = 40.0;
pub const DEFAULT_RADIUS: f64 = 2.5;
pub const DEFAULT_NEAR: f64 = 0.5;
pub const DEFAULT_FAR: f64 = 6.0;
pub const DEFAULT_MIN_ELEVATION_DEG: f64 = 12.0;

/// Camera-to-world rotation plus camera center.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    /// Row-major 3x3 rotation, columns are right, down, forward.
    pub rotation: [[f64; 3]; 3],
    pub position: Vec3,
}

impl Pose {
    pub fn column(&self, c: usize) -> Vec3 {
        [
            self.rotation[0][c],
            self.rotation[1][c],
            self.rotation[2][c],
        ]
    }

    pub fn right(&self) -> Vec3 {
        self.column(0)
    }

    pub fn down(&self) -> Vec3 {
        self.column(1)
    }

    pub fn forward(&self) -> Vec3 {
        self.column(2)
    }

    pub fn to_world(&self, v: Vec3) -> Vec3 {
        let r = &self.rotation;
        [
            r[0][0] * v[0] + r[0][1] * v[1] + r[0][2] * v[2],
            r[1][0] * v[0] + r[1][1] * v[1] + r[1][2] * v[2],
            r[2][0] * v[0] + r[2][1] * v[1] + r[2][2] * v[2],
        ]
    }

    pub fn to_camera(&self, v: Vec3) -> Vec3 {
        [
            dot(self.right(), v),
            dot(self.down(), v),
            dot(self.forward(), v),
        ]
    }

    /// Max deviation of `R^T R` from identity, and the determinant.
    pub fn orthonormality(&self) -> (f64, f64) {
        let mut dev: f64 = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                let d = dot(self.column(i), self.column(j)) - if i == j { 1.0 } else { 0.0 };
                dev = dev.max(d.abs());
            }
        }
        let det = dot(self.right(), cross(self.down(), self.forward()));
        (dev, det)
    }

    /// Row-major rotation as 9 numbers.
    pub fn rotation_flat(&self) -> [f64; 9] {
        let r = &self.rotation;
        [
            r[0][0], r[0][1], r[0][2], r[1][0], r[1][1], r[1][2], r[2][0], r[2][1], r[2][2],
        ]
    }
}

/// Camera at `radius` from `target` in direction (azimuth, elevation),
/// looking at `target`. Azimuth 0, elevation 0 places the camera on `+x`.
/// When the view direction is parallel to `+z` the up reference switches to
/// `+x`.
pub fn look_at_pose(azimuth: f64, elevation: f64, radius: f64, target: Vec3) -> Result<Pose> {
    if !(radius > 0.0) || !(elevation > -FRAC_PI_2 && elevation <= FRAC_PI_2) {
        return Err(Error::InvalidConfig(
            "look_at needs radius > 0 and elevation in (-pi/2, pi/2]".into(),
        ));
    }
    let (ce, se) = (libm::cos(elevation), libm::sin(elevation));
    let dir = [ce * libm::cos(azimuth), ce * libm::sin(azimuth), se];
    let position = add(target, scale(dir, radius));
    Ok(pose_from_forward(position, scale(dir, -1.0)))
}

fn pose_from_forward(position: Vec3, forward: Vec3) -> Pose {
    let f = normalize(forward);
    let mut up = [0.0, 0.0, 1.0];
    if norm(cross(f, up)) < 1e-9 {
        up = [1.0, 0.0, 0.0];
    }
    let right = normalize(cross(f, up));
    let cam_up = cross(right, f);
    let down = scale(cam_up, -1.0);
    Pose {
        rotation: [
            [right[0], down[0], f[0]],
            [right[1], down[1], f[1]],
            [right[2], down[2], f[2]],
        ],
        position,
    }
}

/// Square pinhole camera.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Camera {
    pub resolution: usize,
    /// Focal length in pixels.
    pub focal: f64,
    /// Principal point `(x, y)` in pixels.
    pub principal: [f64; 2],
    pub pose: Pose,
    pub near: f64,
    pub far: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub direction: Vec3,
    pub near: f64,
    pub far: f64,
}

impl Ray {
    pub fn at(&self, t: f64) -> Vec3 {
        add(self.origin, scale(self.direction, t))
    }
}

pub fn focal_from_fov(resolution: usize, fov_deg: f64) -> f64 {
    0.5 * resolution as f64 / libm::tan(0.5 * fov_deg * PI / 180.0)
}

impl Camera {
    /// Camera with the default 40 degree field of view, centered principal
    /// point and default clip range.
    pub fn new(resolution: usize, pose: Pose) -> Self {
        Self {
            resolution,
            focal: focal_from_fov(resolution, DEFAULT_FOV_DEG),
            principal: [resolution as f64 / 2.0; 2],
            pose,
            near: DEFAULT_NEAR,
            far: DEFAULT_FAR,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (dev, det) = self.pose.orthonormality();
        if self.resolution == 0 || !(self.focal > 0.0) || dev > 1e-6 || (det - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidConfig(
                "camera needs resolution >= 1, focal > 0 and a proper rotation".into(),
            ));
        }
        if !(self.near > 0.0 && self.near < self.far) {
            return Err(Error::InvalidConfig("camera needs 0 < near < far".into()));
        }
        Ok(())
    }

    /// Same camera at another resolution with the same field of view.
    pub fn with_resolution(&self, resolution: usize) -> Self {
        let s = resolution as f64 / self.resolution as f64;
        Self {
            resolution,
            focal: self.focal * s,
            principal: [self.principal[0] * s, self.principal[1] * s],
            ..*self
        }
    }

    /// Ray through the center of pixel (`row`, `col`).
    pub fn pixel_ray(&self, row: usize, col: usize) -> Result<Ray> {
        if row >= self.resolution || col >= self.resolution {
            return Err(Error::PixelOutOfRange {
                row,
                col,
                res: self.resolution,
            });
        }
        Ok(self.ray_through(col as f64 + 0.5, row as f64 + 0.5))
    }

    /// Ray through the continuous image point `(x, y)`.
    pub fn ray_through(&self, x: f64, y: f64) -> Ray {
        let d = [
            (x - self.principal[0]) / self.focal,
            (y - self.principal[1]) / self.focal,
            1.0,
        ];
        Ray {
            origin: self.pose.position,
            direction: normalize(self.pose.to_world(d)),
            near: self.near,
            far: self.far,
        }
    }

    /// Image-plane position `(x, y)` and depth of a world point.
    pub fn project(&self, p: Vec3) -> (f64, f64, f64) {
        let c = self.pose.to_camera(sub(p, self.pose.position));
        (
            self.focal * c[0] / c[2] + self.principal[0],
            self.focal * c[1] / c[2] + self.principal[1],
            c[2],
        )
    }

    /// All pixel rays in row-major order.
    pub fn rays(&self) -> alloc::vec::Vec<Ray> {
        let m = self.resolution;
        (0..m * m)
            .map(|k| self.ray_through((k % m) as f64 + 0.5, (k / m) as f64 + 0.5))
            .collect()
    }
}

/// Pose on the upper hemisphere looking at `target`, uniform over directions
/// and re-drawn while the elevation is below `min_elevation`.
pub fn sample_hemisphere_pose(
    rng: &mut impl Rng,
    min_elevation: f64,
    radius: f64,
    target: Vec3,
) -> Result<Pose> {
    if !(0.0..FRAC_PI_2).contains(&min_elevation) {
        return Err(Error::InvalidConfig(
            "min elevation must lie in [0, pi/2)".into(),
        ));
    }
    loop {
        // uniform on the hemisphere: z = sin(elevation) is uniform on [0, 1)
        let z: f64 = rng.random();
        let azimuth = rng.random::<f64>() * 2.0 * PI;
        let elevation = libm::asin(z);
        if elevation >= min_elevation {
            return look_at_pose(azimuth, elevation, radius, target);
        }
    }
}

/// Elevation (radians) of a camera position relative to `target`.
pub fn elevation_of(pose: &Pose, target: Vec3) -> f64 {
    let d = normalize(sub(pose.position, target));
    libm::asin(d[2].clamp(-1.0, 1.0))
}

pub fn azimuth_of(pose: &Pose, target: Vec3) -> f64 {
    let d = sub(pose.position, target);
    let a = libm::atan2(d[1], d[0]);
    if a < 0.0 {
        a + 2.0 * PI
    } else {
        a
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn canonical_pose() {
        let p = look_at_pose(0.0, 0.0, 1.0, [0.0; 3]).unwrap();
        for (a, b) in p.position.iter().zip([1.0, 0.0, 0.0]) {
            assert!((a - b).abs() < 1e-12);
        }
        let f = p.forward();
        assert!((f[0] + 1.0).abs() < 1e-12);
        // image "down" is world -z
        assert!((p.down()[2] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn overhead_pose_uses_fallback_up() {
        let p = look_at_pose(0.3, FRAC_PI_2, 2.0, [0.0; 3]).unwrap();
        assert!((p.position[2] - 2.0).abs() < 1e-12);
        assert!((p.forward()[2] + 1.0).abs() < 1e-12);
        let (dev, det) = p.orthonormality();
        assert!(dev < 1e-12 && (det - 1.0).abs() < 1e-12);
    }

    #[test]
    fn forward_points_at_target() {
        let mut rng = seeded(7);
        for _ in 0..100 {
            let az = rng.random::<f64>() * 2.0 * PI;
            let el = (rng.random::<f64>() - 0.5) * 3.0;
            let target = [
                rng.random::<f64>(),
                rng.random::<f64>(),
                rng.random::<f64>(),
            ];
            let p = look_at_pose(az, el, 0.5 + rng.random::<f64>() * 3.0, target).unwrap();
            let to_target = normalize(sub(target, p.position));
            assert!((dot(p.forward(), to_target) - 1.0).abs() < 1e-6);
            let (dev, det) = p.orthonormality();
            assert!(dev < 1e-6 && (det - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn invalid_look_at_is_rejected() {
        assert!(look_at_pose(0.0, 0.0, 0.0, [0.0; 3]).is_err());
        assert!(look_at_pose(0.0, -FRAC_PI_2, 1.0, [0.0; 3]).is_err());
    }

    #[test]
    fn principal_pixel_looks_forward() {
        let pose = look_at_pose(1.0, 0.4, 2.5, [0.0; 3]).unwrap();
        let mut cam = Camera::new(33, pose);
        cam.principal = [16.5, 16.5];
        let r = cam.pixel_ray(16, 16).unwrap();
        assert!((dot(r.direction, pose.forward()) - 1.0).abs() < 1e-12);
        assert!(cam.pixel_ray(33, 0).is_err());
    }

    #[test]
    fn mirrored_pixels_mirror_about_forward_up_plane() {
        let pose = look_at_pose(0.7, 0.5, 2.5, [0.0; 3]).unwrap();
        let cam = Camera::new(16, pose);
        let right = pose.right();
        for row in [0, 5, 15] {
            for col in [0, 3, 7] {
                let a = cam.pixel_ray(row, col).unwrap().direction;
                let b = cam.pixel_ray(row, 15 - col).unwrap().direction;
                assert!((dot(a, right) + dot(b, right)).abs() < 1e-12);
                assert!((dot(a, pose.forward()) - dot(b, pose.forward())).abs() < 1e-12);
                assert!((dot(a, pose.down()) - dot(b, pose.down())).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn project_then_raycast() {
        let mut rng = seeded(99);
        let pose = look_at_pose(2.0, 0.6, 2.5, [0.0; 3]).unwrap();
        let cam = Camera::new(64, pose);
        for _ in 0..100 {
            let p = [
                rng.random::<f64>() - 0.5,
                rng.random::<f64>() - 0.5,
                rng.random::<f64>(),
            ];
            let (x, y, depth) = cam.project(p);
            assert!(depth > 0.0);
            let r = cam.ray_through(x, y);
            let rel = sub(p, r.origin);
            let along = dot(rel, r.direction);
            let miss = norm(sub(rel, scale(r.direction, along)));
            assert!(miss < 1e-6, "miss {miss}");
        }
    }

    #[test]
    fn rays_share_origin() {
        let cam = Camera::new(8, look_at_pose(0.1, 0.3, 2.5, [0.0; 3]).unwrap());
        let rays = cam.rays();
        assert_eq!(rays.len(), 64);
        assert!(rays.iter().all(|r| r.origin == cam.pose.position));
        assert!(rays.iter().all(|r| (norm(r.direction) - 1.0).abs() < 1e-12));
    }

    #[test]
    fn hemisphere_respects_min_elevation() {
        let mut rng = seeded(12);
        let min = DEFAULT_MIN_ELEVATION_DEG.to_radians();
        for _ in 0..10_000 {
            let p = sample_hemisphere_pose(&mut rng, min, 2.5, [0.0; 3]).unwrap();
            assert!(elevation_of(&p, [0.0; 3]) >= min - 1e-12);
        }
    }
}
