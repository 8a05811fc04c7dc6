//! Pinhole camera model.
//!
//! Conventions: poses are camera-to-world, right-handed, the camera looks
//! down its local −Z axis with +Y up (the NeRF-synthetic convention). Image
//! rows grow downward, so camera-frame `y` maps to `cy − fl_y·y/(−z)`.
//!
//! Depth is planar z-depth along the optical axis. A ray through pixel
//! `(px, py)` has un-normalized camera direction
//! `d_cam = ((px − cx)/fl_x, −(py − cy)/fl_y, −1)`, so a z-depth `d` lies at ray
//! distance `t = d·‖d_cam‖ = d / axis_cos`.

use nalgebra::{Matrix3, Vector3};

use crate::{Error, Result};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

const ORTHO_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    pub fl_x: f64,
    pub fl_y: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(fl_x: f64, fl_y: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let k = Self {
            fl_x,
            fl_y,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    /// Symmetric intrinsics from a horizontal field of view in degrees.
    pub fn from_fov(width: usize, height: usize, fov_x_deg: f64) -> Result<Self> {
        let fl = 0.5 * width as f64 / (0.5 * fov_x_deg.to_radians()).tan();
        Self::new(fl, fl, 0.5 * width as f64, 0.5 * height as f64, width, height)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.fl_x > 0.0
            && self.fl_y > 0.0
            && self.cx > 0.0
            && self.cx < self.width as f64
            && self.cy > 0.0
            && self.cy < self.height as f64;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid intrinsics {self:?}")))
        }
    }

    pub fn contains(&self, px: f64, py: f64) -> bool {
        px >= 0.0 && py >= 0.0 && px < self.width as f64 && py < self.height as f64
    }
}

/// Rigid camera-to-world transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl Pose {
    pub fn new(rotation: Mat3, translation: Vec3) -> Result<Self> {
        let pose = Self { rotation, translation };
        pose.validate()?;
        Ok(pose)
    }

    pub fn identity() -> Self {
        Self {
            rotation: Mat3::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let r = &self.rotation;
        let ortho = (r.transpose() * r - Mat3::identity()).abs().max();
        let det = r.determinant();
        if ortho > ORTHO_TOL || (det - 1.0).abs() > ORTHO_TOL || !self.translation.iter().all(|v| v.is_finite()) {
            return Err(Error::Config(format!(
                "pose rotation is not a proper rotation (|RᵀR−I|={ortho:e}, det={det})"
            )));
        }
        Ok(())
    }

    /// Camera at `eye` looking at `target`, with `up` as the approximate +Y.
    pub fn look_at(eye: Vec3, target: Vec3, up: Vec3) -> Result<Self> {
        let back = eye - target;
        if back.norm() == 0.0 {
            return Err(Error::Domain("look_at with eye == target".into()));
        }
        let z = back.normalize();
        let x = up.cross(&z);
        if x.norm() < 1e-12 {
            return Err(Error::Domain("look_at up vector parallel to view axis".into()));
        }
        let x = x.normalize();
        let y = z.cross(&x);
        Self::new(Mat3::from_columns(&[x, y, z]), eye)
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn to_world(&self, p_cam: &Vec3) -> Vec3 {
        self.rotation * p_cam + self.translation
    }

    pub fn to_camera(&self, p_world: &Vec3) -> Vec3 {
        self.rotation.transpose() * (p_world - self.translation)
    }

    /// 4×4 row-major camera-to-world matrix (last row `0 0 0 1`).
    pub fn to_row_major(&self) -> [f64; 16] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[(0, 0)],
            r[(0, 1)],
            r[(0, 2)],
            t.x,
            r[(1, 0)],
            r[(1, 1)],
            r[(1, 2)],
            t.y,
            r[(2, 0)],
            r[(2, 1)],
            r[(2, 2)],
            t.z,
            0.0,
            0.0,
            0.0,
            1.0,
        ]
    }

    pub fn from_row_major(m: &[f64]) -> Result<Self> {
        if m.len() != 16 {
            return Err(Error::Schema(format!(
                "transform_matrix must have 16 entries, got {}",
                m.len()
            )));
        }
        let rotation = Mat3::new(m[0], m[1], m[2], m[4], m[5], m[6], m[8], m[9], m[10]);
        let translation = Vec3::new(m[3], m[7], m[11]);
        Self::new(rotation, translation)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Camera {
    pub intrinsics: CameraIntrinsics,
    pub pose: Pose,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    /// Unit direction in world space.
    pub direction: Vec3,
    pub t_near: f64,
    pub t_far: f64,
    /// Cosine between `direction` and the optical axis; converts z-depth to
    /// ray distance via `t = z / axis_cos`.
    pub axis_cos: f64,
}

impl Ray {
    pub fn at(&self, t: f64) -> Vec3 {
        self.origin + self.direction * t
    }

    pub fn depth_to_distance(&self, z: f64) -> f64 {
        z / self.axis_cos
    }

    pub fn distance_to_depth(&self, t: f64) -> f64 {
        t * self.axis_cos
    }

    pub fn with_bounds(mut self, t_near: f64, t_far: f64) -> Result<Self> {
        if !(t_near > 0.0 && t_near < t_far) {
            return Err(Error::Domain(format!("ray bounds [{t_near}, {t_far}]")));
        }
        self.t_near = t_near;
        self.t_far = t_far;
        Ok(self)
    }
}

/// Outcome of projecting a world point into an image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Projection {
    Visible { u: f64, v: f64, z: f64 },
    Behind,
    Outside { u: f64, v: f64, z: f64 },
}

impl Camera {
    pub fn new(intrinsics: CameraIntrinsics, pose: Pose) -> Self {
        Self { intrinsics, pose }
    }

    pub fn width(&self) -> usize {
        self.intrinsics.width
    }

    pub fn height(&self) -> usize {
        self.intrinsics.height
    }

    fn check_pixel(&self, px: f64, py: f64) -> Result<()> {
        if self.intrinsics.contains(px, py) {
            Ok(())
        } else {
            Err(Error::Domain(format!(
                "pixel ({px}, {py}) outside {}x{} image",
                self.intrinsics.width, self.intrinsics.height
            )))
        }
    }

    /// Camera-frame direction with z-component −1.
    fn pixel_dir_cam(&self, px: f64, py: f64) -> Vec3 {
        let k = &self.intrinsics;
        Vec3::new((px - k.cx) / k.fl_x, -(py - k.cy) / k.fl_y, -1.0)
    }

    /// Ray through sub-pixel position `(px, py)`; pixel centers sit at `i + 0.5`.
    pub fn generate_ray(&self, px: f64, py: f64, t_near: f64, t_far: f64) -> Result<Ray> {
        self.check_pixel(px, py)?;
        let d_cam = self.pixel_dir_cam(px, py);
        let len = d_cam.norm();
        let ray = Ray {
            origin: self.pose.translation,
            direction: (self.pose.rotation * d_cam) / len,
            t_near,
            t_far,
            axis_cos: 1.0 / len,
        };
        ray.with_bounds(t_near, t_far)
    }

    pub fn project(&self, point: &Vec3) -> Projection {
        let p = self.pose.to_camera(point);
        if p.z >= 0.0 {
            return Projection::Behind;
        }
        let k = &self.intrinsics;
        let z = -p.z;
        let u = k.cx + k.fl_x * (p.x / z);
        let v = k.cy - k.fl_y * (p.y / z);
        if k.contains(u, v) {
            Projection::Visible { u, v, z }
        } else {
            Projection::Outside { u, v, z }
        }
    }

    /// World point at planar depth `depth` behind pixel `(px, py)`.
    pub fn backproject(&self, px: f64, py: f64, depth: f64) -> Result<Vec3> {
        if !(depth > 0.0 && depth.is_finite()) {
            return Err(Error::Domain(format!("backproject depth {depth} must be > 0")));
        }
        self.check_pixel(px, py)?;
        Ok(self.pose.to_world(&(self.pixel_dir_cam(px, py) * depth)))
    }
}
