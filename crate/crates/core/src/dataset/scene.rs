//! Analytic scenes: ray–primitive intersection and Lambertian shading.

use serde::{Deserialize, Serialize};

use crate::geometry::{Ray, Vec3};
use crate::{Error, Result};

const HIT_EPS: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Albedo {
    Solid {
        rgb: [f64; 3],
    },
    /// 3D checkerboard with cells of edge `scale`.
    Checker {
        rgb_a: [f64; 3],
        rgb_b: [f64; 3],
        scale: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Shape {
    Sphere {
        center: [f64; 3],
        radius: f64,
    },
    Box {
        center: [f64; 3],
        half_extents: [f64; 3],
    },
    /// Plane through `point` with unit `normal`; restricted to a disk of
    /// radius `extent` around `point` when given.
    Plane {
        point: [f64; 3],
        normal: [f64; 3],
        #[serde(default, skip_serializing_if = "Option::is_none")]
        extent: Option<f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    pub shape: Shape,
    pub albedo: Albedo,
}

/// Optional Phong highlight to make appearance view-dependent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Specular {
    pub strength: f64,
    pub exponent: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub primitives: Vec<Primitive>,
    /// Direction light travels, unit length.
    pub light_dir: [f64; 3],
    pub ambient: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub specular: Option<Specular>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    pub t: f64,
    pub point: Vec3,
    /// Outward unit normal.
    pub normal: Vec3,
    pub albedo: [f64; 3],
    pub primitive: usize,
}

impl SceneSpec {
    pub fn empty() -> Self {
        Self {
            primitives: Vec::new(),
            light_dir: [0.0, -1.0, 0.0],
            ambient: 0.2,
            specular: None,
        }
    }

    /// Checkered box of half-extent 0.8 at the origin standing on a ground
    /// disk at `y = −0.8`.
    pub fn cube() -> Self {
        let l = Vec3::new(-0.4, -1.0, -0.6).normalize();
        Self {
            primitives: vec![
                Primitive {
                    shape: Shape::Box {
                        center: [0.0; 3],
                        half_extents: [0.8; 3],
                    },
                    albedo: Albedo::Checker {
                        rgb_a: [0.85, 0.35, 0.25],
                        rgb_b: [0.95, 0.85, 0.45],
                        scale: 0.4,
                    },
                },
                Primitive {
                    shape: Shape::Plane {
                        point: [0.0, -0.8, 0.0],
                        normal: [0.0, 1.0, 0.0],
                        extent: Some(2.2),
                    },
                    albedo: Albedo::Solid { rgb: [0.55, 0.6, 0.65] },
                },
            ],
            light_dir: [l.x, l.y, l.z],
            ambient: 0.35,
            specular: None,
        }
    }

    /// Three spheres on the same ground disk.
    pub fn spheres() -> Self {
        let mut s = Self::cube();
        s.primitives[0] = Primitive {
            shape: Shape::Sphere {
                center: [0.0, 0.0, 0.0],
                radius: 0.8,
            },
            albedo: Albedo::Checker {
                rgb_a: [0.2, 0.45, 0.85],
                rgb_b: [0.9, 0.9, 0.9],
                scale: 0.4,
            },
        };
        s.primitives.push(Primitive {
            shape: Shape::Sphere {
                center: [1.2, -0.4, 0.6],
                radius: 0.4,
            },
            albedo: Albedo::Solid { rgb: [0.3, 0.8, 0.35] },
        });
        s.primitives.push(Primitive {
            shape: Shape::Sphere {
                center: [-1.0, -0.5, -0.9],
                radius: 0.3,
            },
            albedo: Albedo::Solid { rgb: [0.9, 0.5, 0.1] },
        });
        s
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "cube" => Ok(Self::cube()),
            "spheres" => Ok(Self::spheres()),
            "glossy-cube" => Ok(Self {
                specular: Some(Specular {
                    strength: 0.4,
                    exponent: 16.0,
                }),
                ..Self::cube()
            }),
            "empty" => Ok(Self::empty()),
            other => Err(Error::Config(format!(
                "unknown scene {other:?} (expected cube, spheres, glossy-cube or empty)"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let l = Vec3::from(self.light_dir);
        if (l.norm() - 1.0).abs() > 1e-6 {
            return Err(Error::Config("light_dir must be unit length".into()));
        }
        if !(0.0..=1.0).contains(&self.ambient) {
            return Err(Error::Config("ambient must be in [0, 1]".into()));
        }
        for (i, p) in self.primitives.iter().enumerate() {
            let ok = match &p.shape {
                Shape::Sphere { radius, .. } => *radius > 0.0,
                Shape::Box { half_extents, .. } => half_extents.iter().all(|&h| h > 0.0),
                Shape::Plane { normal, extent, .. } => {
                    (Vec3::from(*normal).norm() - 1.0).abs() < 1e-6 && extent.is_none_or(|e| e > 0.0)
                }
            };
            if !ok {
                return Err(Error::Config(format!("primitive {i} has invalid dimensions")));
            }
            if let Albedo::Checker { scale, .. } = p.albedo {
                if scale <= 0.0 {
                    return Err(Error::Config(format!("primitive {i} checker scale must be > 0")));
                }
            }
        }
        Ok(())
    }

    /// Radius of a sphere around the origin that contains all bounded
    /// primitives.
    pub fn bounded_extent(&self) -> f64 {
        self.primitives
            .iter()
            .map(|p| match &p.shape {
                Shape::Sphere { center, radius } => Vec3::from(*center).norm() + radius,
                Shape::Box { center, half_extents } => Vec3::from(*center).norm() + Vec3::from(*half_extents).norm(),
                Shape::Plane { .. } => 0.0,
            })
            .fold(0.0, f64::max)
    }
}

fn intersect_shape(shape: &Shape, o: &Vec3, d: &Vec3) -> Option<(f64, Vec3)> {
    match shape {
        Shape::Sphere { center, radius } => {
            let oc = o - Vec3::from(*center);
            let b = oc.dot(d);
            let c = oc.norm_squared() - radius * radius;
            let disc = b * b - c;
            if disc < 0.0 {
                return None;
            }
            let sq = disc.sqrt();
            let t = [-b - sq, -b + sq].into_iter().find(|&t| t > HIT_EPS)?;
            Some((t, (oc + d * t) / *radius))
        }
        Shape::Box { center, half_extents } => {
            let c = Vec3::from(*center);
            let (mut t_enter, mut t_exit) = (f64::NEG_INFINITY, f64::INFINITY);
            let (mut enter_axis, mut exit_axis) = (0, 0);
            for a in 0..3 {
                let lo = c[a] - half_extents[a];
                let hi = c[a] + half_extents[a];
                if d[a].abs() < 1e-300 {
                    if o[a] < lo || o[a] > hi {
                        return None;
                    }
                    continue;
                }
                let (mut t0, mut t1) = ((lo - o[a]) / d[a], (hi - o[a]) / d[a]);
                if t0 > t1 {
                    std::mem::swap(&mut t0, &mut t1);
                }
                if t0 > t_enter {
                    t_enter = t0;
                    enter_axis = a;
                }
                if t1 < t_exit {
                    t_exit = t1;
                    exit_axis = a;
                }
            }
            if t_enter > t_exit {
                return None;
            }
            let (t, axis) = if t_enter > HIT_EPS {
                (t_enter, enter_axis)
            } else if t_exit > HIT_EPS {
                (t_exit, exit_axis)
            } else {
                return None;
            };
            let p = o + d * t;
            let mut n = Vec3::zeros();
            n[axis] = (p[axis] - c[axis]).signum();
            Some((t, n))
        }
        Shape::Plane { point, normal, extent } => {
            let n = Vec3::from(*normal);
            let denom = d.dot(&n);
            if denom.abs() < 1e-12 {
                return None;
            }
            let p0 = Vec3::from(*point);
            let t = (p0 - o).dot(&n) / denom;
            if t <= HIT_EPS {
                return None;
            }
            if let Some(r) = extent {
                let offset = o + d * t - p0;
                if offset.norm_squared() > r * r {
                    return None;
                }
            }
            Some((t, n))
        }
    }
}

fn albedo_at(albedo: &Albedo, p: &Vec3, normal: &Vec3) -> [f64; 3] {
    match albedo {
        Albedo::Solid { rgb } => *rgb,
        Albedo::Checker { rgb_a, rgb_b, scale } => {
            // nudge inside so faces on cell boundaries pick a stable cell
            let q = (p - normal * 1e-7) / *scale;
            let parity = q.x.floor() as i64 + q.y.floor() as i64 + q.z.floor() as i64;
            if parity.rem_euclid(2) == 0 {
                *rgb_a
            } else {
                *rgb_b
            }
        }
    }
}

/// Nearest positive intersection along the ray (ignores the ray's bounds).
pub fn intersect_scene(ray: &Ray, scene: &SceneSpec) -> Option<Hit> {
    let mut best: Option<(f64, Vec3, usize)> = None;
    for (i, prim) in scene.primitives.iter().enumerate() {
        if let Some((t, n)) = intersect_shape(&prim.shape, &ray.origin, &ray.direction) {
            if best.is_none_or(|(bt, _, _)| t < bt) {
                best = Some((t, n, i));
            }
        }
    }
    best.map(|(t, normal, i)| {
        let point = ray.at(t);
        Hit {
            t,
            point,
            normal,
            albedo: albedo_at(&scene.primitives[i].albedo, &point, &normal),
            primitive: i,
        }
    })
}

/// Lambertian + ambient shading, plus the optional Phong term seen from
/// direction `view_dir` (pointing from the eye to the hit).
pub fn shade(hit: &Hit, scene: &SceneSpec, view_dir: &Vec3) -> [f64; 3] {
    let to_light = -Vec3::from(scene.light_dir);
    let diffuse = hit.normal.dot(&to_light).max(0.0);
    let k = scene.ambient + (1.0 - scene.ambient) * diffuse;
    let spec = scene.specular.map_or(0.0, |s| {
        let reflected = to_light - hit.normal * (2.0 * hit.normal.dot(&to_light));
        s.strength * reflected.dot(view_dir).max(0.0).powf(s.exponent) * f64::from(diffuse > 0.0)
    });
    hit.albedo.map(|a| (a * k + spec).clamp(0.0, 1.0))
}
