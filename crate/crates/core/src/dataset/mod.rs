//! Procedural RGB-D datasets and their on-disk layout.
//!
//! A dataset directory holds `manifest.json`, one 8-bit PNG and one float32
//! PFM depth map per frame, and optionally cached error maps
//! `error_####.pfm` (one per frame index).
//!
//! ```json
//! {"fl_x": .., "fl_y": .., "cx": .., "cy": .., "w": .., "h": .., "near": .., "far": ..,
//!  "frames": [{"file_path": "rgb_0000.png", "depth_path": "depth_0000.pfm",
//!              "transform_matrix": [16 numbers, row-major camera-to-world],
//!              "split": "train"}]}
//! ```

pub mod pfm;
pub mod png_io;
pub mod scene;

use std::fmt;
use std::path::{Path, PathBuf};

use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::geometry::{Camera, CameraIntrinsics, Pose, Vec3};
use crate::raster::{DepthMap, RgbImage};
use crate::sampling::{depth_error_map, DepthErrorMap, DepthLookup};
use crate::seed;
use crate::{Error, Result};

pub use scene::{intersect_scene, shade, Albedo, Hit, Primitive, SceneSpec, Shape, Specular};

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::Schema(format!(
                "split must be \"train\" or \"test\", got {other:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RgbdFrame {
    pub color: RgbImage,
    /// Planar z-depth, `0` where nothing was hit.
    pub depth: DepthMap,
    pub camera: Camera,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RgbdDataset {
    pub frames: Vec<RgbdFrame>,
    pub near: f64,
    pub far: f64,
    /// Per-frame error maps, aligned with `frames`.
    pub error_maps: Option<Vec<DepthErrorMap>>,
}

impl RgbdDataset {
    pub fn new(frames: Vec<RgbdFrame>, near: f64, far: f64) -> Result<Self> {
        let ds = Self {
            frames,
            near,
            far,
            error_maps: None,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.near > 0.0 && self.near < self.far) {
            return Err(Error::Schema(format!(
                "need 0 < near < far, got {} / {}",
                self.near, self.far
            )));
        }
        if self.indices(Split::Train).is_empty() {
            return Err(Error::Schema("dataset has no train frames".into()));
        }
        for (i, f) in self.frames.iter().enumerate() {
            let (w, h) = (f.camera.width(), f.camera.height());
            if f.color.width != w || f.color.height != h || f.depth.width != w || f.depth.height != h {
                return Err(Error::Schema(format!("frame {i} image size does not match intrinsics")));
            }
            if !f.depth.data.iter().all(|d| d.is_finite() && *d >= 0.0) {
                return Err(Error::Schema(format!("frame {i} has negative or non-finite depth")));
            }
        }
        Ok(())
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.frames.len())
            .filter(|&i| self.frames[i].split == split)
            .collect()
    }

    pub fn error_map(&self, frame: usize) -> Option<&DepthErrorMap> {
        self.error_maps.as_ref().map(|m| &m[frame])
    }

    /// Error maps for every frame, each measured against all other training
    /// frames.
    pub fn compute_error_maps(&self, e_max_fill: f32, lookup: DepthLookup) -> Vec<DepthErrorMap> {
        let train = self.indices(Split::Train);
        (0..self.frames.len())
            .into_par_iter()
            .map(|i| {
                let refs: Vec<(Camera, &DepthMap)> = train
                    .iter()
                    .filter(|&&j| j != i)
                    .map(|&j| (self.frames[j].camera, &self.frames[j].depth))
                    .collect();
                let f = &self.frames[i];
                depth_error_map(&f.camera, &f.depth, &refs, e_max_fill, lookup)
            })
            .collect()
    }

    /// Load cached `error_####.pfm` maps from `dir`, or compute and write them.
    pub fn ensure_error_maps(&mut self, dir: &Path, e_max_fill: f32) -> Result<()> {
        let paths: Vec<PathBuf> = (0..self.frames.len()).map(|i| error_map_path(dir, i)).collect();
        let maps = if paths.iter().all(|p| p.exists()) {
            paths
                .iter()
                .map(|p| DepthErrorMap::from_depth_map(pfm::read_depth(p)?, e_max_fill))
                .collect::<Result<Vec<_>>>()?
        } else {
            let maps = self.compute_error_maps(e_max_fill, DepthLookup::default());
            for (m, p) in maps.iter().zip(&paths) {
                pfm::write_depth(p, &m.as_depth_map())?;
            }
            maps
        };
        for (i, (m, f)) in maps.iter().zip(&self.frames).enumerate() {
            if m.width != f.depth.width || m.height != f.depth.height {
                return Err(Error::format(&paths[i], "cached error map has the wrong resolution"));
            }
        }
        self.error_maps = Some(maps);
        Ok(())
    }
}

pub fn error_map_path(dir: &Path, frame: usize) -> PathBuf {
    dir.join(format!("error_{frame:04}.pfm"))
}

/// Ray-trace color and planar depth for every pixel center. Hits outside the
/// `[near, far]` ray interval count as background.
pub fn render_ground_truth(scene: &SceneSpec, camera: &Camera, near: f64, far: f64) -> Result<(RgbImage, DepthMap)> {
    let (w, h) = (camera.width(), camera.height());
    let rows: Vec<Vec<([f32; 3], f32)>> = (0..h)
        .into_par_iter()
        .map(|y| {
            (0..w)
                .map(|x| {
                    let ray = camera.generate_ray(x as f64 + 0.5, y as f64 + 0.5, near, far)?;
                    Ok(match intersect_scene(&ray, scene) {
                        Some(hit) if hit.t >= near && hit.t <= far => {
                            let c = shade(&hit, scene, &ray.direction);
                            (
                                [c[0] as f32, c[1] as f32, c[2] as f32],
                                ray.distance_to_depth(hit.t) as f32,
                            )
                        }
                        _ => ([0.0; 3], 0.0),
                    })
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let mut color = RgbImage::new(w, h);
    let mut depth = DepthMap::new(w, h);
    for (y, row) in rows.into_iter().enumerate() {
        for (x, (c, d)) in row.into_iter().enumerate() {
            color.set(x, y, c);
            depth.set(x, y, d);
        }
    }
    Ok((color, depth))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateOptions {
    pub n_train: usize,
    pub n_test: usize,
    pub radius: f64,
    pub elevation_deg: f64,
    pub resolution: usize,
    pub fov_deg: f64,
    pub near: f64,
    pub far: f64,
    /// Std-dev of Gaussian noise added to valid depth pixels.
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for GenerateOptions {
    fn default() -> Self {
        Self {
            n_train: 8,
            n_test: 4,
            radius: 3.0,
            elevation_deg: 30.0,
            resolution: 100,
            fov_deg: 55.0,
            near: 0.5,
            far: 6.0,
            noise_sigma: 0.0,
            seed: 0,
        }
    }
}

impl GenerateOptions {
    pub fn validate(&self, scene: &SceneSpec) -> Result<()> {
        let checks = [
            (self.n_train >= 1, "train views must be >= 1".to_string()),
            (self.resolution >= 1, "resolution must be >= 1".to_string()),
            (
                self.fov_deg > 0.0 && self.fov_deg < 180.0,
                "fov must be in (0, 180)".to_string(),
            ),
            (
                self.near > 0.0 && self.near < self.far,
                "need 0 < near < far".to_string(),
            ),
            (self.noise_sigma >= 0.0, "noise sigma must be >= 0".to_string()),
            (
                self.radius > scene.bounded_extent(),
                format!(
                    "radius {} must exceed scene extent {:.3}",
                    self.radius,
                    scene.bounded_extent()
                ),
            ),
        ];
        match checks.into_iter().find(|(ok, _)| !ok) {
            Some((_, msg)) => Err(Error::Config(msg)),
            None => Ok(()),
        }
    }
}

/// Cameras on a circle at the given elevation, all looking at the origin.
/// Train azimuths are evenly spaced from 0; test azimuths are offset by half
/// a step.
pub fn orbit_cameras(n: usize, offset: f64, opts: &GenerateOptions) -> Result<Vec<Camera>> {
    let k = CameraIntrinsics::from_fov(opts.resolution, opts.resolution, opts.fov_deg)?;
    let el = opts.elevation_deg.to_radians();
    (0..n)
        .map(|i| {
            let az = std::f64::consts::TAU * (i as f64 + offset) / n as f64;
            let eye = Vec3::new(el.cos() * az.sin(), el.sin(), el.cos() * az.cos()) * opts.radius;
            Ok(Camera::new(k, Pose::look_at(eye, Vec3::zeros(), Vec3::y())?))
        })
        .collect()
}

fn add_depth_noise(depth: &mut DepthMap, sigma: f64, seed: u64, frame: usize) {
    if sigma <= 0.0 {
        return;
    }
    let normal = Normal::new(0.0, sigma).expect("finite sigma");
    let mut rng = seed::rng_for(seed::derive_seed(seed, "depth-noise"), &[frame as u64]);
    for d in depth.data.iter_mut().filter(|d| **d > 0.0) {
        // noisy measurements stay valid
        *d = (f64::from(*d) + normal.sample(&mut rng)).max(1e-3) as f32;
    }
}

/// Synthesize frames in memory.
pub fn synthesize(scene: &SceneSpec, opts: &GenerateOptions) -> Result<RgbdDataset> {
    scene.validate()?;
    opts.validate(scene)?;
    let cams: Vec<(Camera, Split)> = orbit_cameras(opts.n_train, 0.0, opts)?
        .into_iter()
        .map(|c| (c, Split::Train))
        .chain(
            orbit_cameras(opts.n_test, 0.5, opts)?
                .into_iter()
                .map(|c| (c, Split::Test)),
        )
        .collect();
    let frames = cams
        .into_iter()
        .enumerate()
        .map(|(i, (camera, split))| {
            let (color, mut depth) = render_ground_truth(scene, &camera, opts.near, opts.far)?;
            add_depth_noise(&mut depth, opts.noise_sigma, opts.seed, i);
            Ok(RgbdFrame {
                color,
                depth,
                camera,
                split,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    RgbdDataset::new(frames, opts.near, opts.far)
}

/// Synthesize and write a dataset to `out_dir`.
pub fn generate_dataset(scene: &SceneSpec, opts: &GenerateOptions, out_dir: &Path) -> Result<RgbdDataset> {
    let ds = synthesize(scene, opts)?;
    save_dataset(&ds, out_dir)?;
    Ok(ds)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    fl_x: f64,
    fl_y: f64,
    cx: f64,
    cy: f64,
    w: usize,
    h: usize,
    near: f64,
    far: f64,
    frames: Vec<ManifestFrame>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ManifestFrame {
    file_path: String,
    depth_path: String,
    transform_matrix: Vec<f64>,
    split: String,
}

pub fn save_dataset(ds: &RgbdDataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let k = ds
        .frames
        .first()
        .ok_or_else(|| Error::Schema("no frames".into()))?
        .camera
        .intrinsics;
    if ds.frames.iter().any(|f| f.camera.intrinsics != k) {
        return Err(Error::Schema("manifest stores shared intrinsics; frames differ".into()));
    }
    let mut frames = Vec::with_capacity(ds.frames.len());
    for (i, f) in ds.frames.iter().enumerate() {
        let file_path = format!("rgb_{i:04}.png");
        let depth_path = format!("depth_{i:04}.pfm");
        png_io::write_rgb(&dir.join(&file_path), &f.color)?;
        pfm::write_depth(&dir.join(&depth_path), &f.depth)?;
        frames.push(ManifestFrame {
            file_path,
            depth_path,
            transform_matrix: f.camera.pose.to_row_major().to_vec(),
            split: f.split.to_string(),
        });
    }
    let manifest = Manifest {
        fl_x: k.fl_x,
        fl_y: k.fl_y,
        cx: k.cx,
        cy: k.cy,
        w: k.width,
        h: k.height,
        near: ds.near,
        far: ds.far,
        frames,
    };
    let path = dir.join(MANIFEST);
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))
}

pub fn load_dataset(dir: &Path) -> Result<RgbdDataset> {
    let path = dir.join(MANIFEST);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::Schema(format!("{}: {e}", path.display())))?;
    let k = CameraIntrinsics::new(m.fl_x, m.fl_y, m.cx, m.cy, m.w, m.h)
        .map_err(|e| Error::Schema(format!("{}: {e}", path.display())))?;
    let frames = m
        .frames
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let pose = Pose::from_row_major(&f.transform_matrix)
                .map_err(|e| Error::Schema(format!("frame {i} transform_matrix: {e}")))?;
            let split: Split = f.split.parse()?;
            let color = png_io::read_rgb(&dir.join(&f.file_path))?;
            let depth = pfm::read_depth(&dir.join(&f.depth_path))?;
            Ok(RgbdFrame {
                color,
                depth,
                camera: Camera::new(k, pose),
                split,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    RgbdDataset::new(frames, m.near, m.far)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Projection;
    use rand::Rng;

    fn small_opts() -> GenerateOptions {
        GenerateOptions {
            n_train: 3,
            n_test: 2,
            resolution: 24,
            ..Default::default()
        }
    }

    #[test]
    fn empty_scene_renders_black() {
        let cam = orbit_cameras(1, 0.0, &small_opts()).unwrap()[0];
        let (c, d) = render_ground_truth(&SceneSpec::empty(), &cam, 0.5, 6.0).unwrap();
        assert!(c.data.iter().all(|&v| v == 0.0));
        assert!(d.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn fronto_parallel_plane_has_constant_depth() {
        let scene = SceneSpec {
            primitives: vec![Primitive {
                shape: Shape::Plane {
                    point: [0.0, 0.0, -2.0],
                    normal: [0.0, 0.0, 1.0],
                    extent: None,
                },
                albedo: Albedo::Solid { rgb: [0.5; 3] },
            }],
            ..SceneSpec::empty()
        };
        let cam = Camera::new(CameraIntrinsics::from_fov(32, 32, 60.0).unwrap(), Pose::identity());
        let (_, d) = render_ground_truth(&scene, &cam, 0.5, 6.0).unwrap();
        assert!(d.data.iter().all(|&v| (v - 2.0).abs() < 1e-6));
    }

    #[test]
    fn cube_depth_matches_analytic_intersection() {
        let opts = GenerateOptions::default();
        let scene = SceneSpec::cube();
        let cam = orbit_cameras(8, 0.0, &opts).unwrap()[3];
        let (_, d) = render_ground_truth(&scene, &cam, opts.near, opts.far).unwrap();
        let mut rng = seed::rng_for(4, &[]);
        let mut checked = 0;
        for _ in 0..100 {
            let (x, y) = (rng.gen_range(0..100), rng.gen_range(0..100));
            let ray = cam
                .generate_ray(x as f64 + 0.5, y as f64 + 0.5, opts.near, opts.far)
                .unwrap();
            let want = intersect_scene(&ray, &scene)
                .filter(|h| h.t <= opts.far)
                .map_or(0.0, |h| ray.distance_to_depth(h.t));
            assert!((f64::from(d.get(x, y)) - want).abs() < 1e-6 * want.max(1.0));
            checked += usize::from(want > 0.0);
        }
        assert!(checked > 30);
    }

    #[test]
    fn foreground_backprojects_onto_surfaces() {
        let opts = small_opts();
        let scene = SceneSpec::cube();
        let ds = synthesize(&scene, &opts).unwrap();
        for f in &ds.frames {
            for y in 0..f.depth.height {
                for x in 0..f.depth.width {
                    let d = f64::from(f.depth.get(x, y));
                    if d <= 0.0 {
                        continue;
                    }
                    let p = f.camera.backproject(x as f64 + 0.5, y as f64 + 0.5, d).unwrap();
                    let ray = f.camera.generate_ray(x as f64 + 0.5, y as f64 + 0.5, 0.5, 6.0).unwrap();
                    let hit = intersect_scene(&ray, &scene).unwrap();
                    assert!((hit.point - p).norm() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn cameras_sit_on_the_orbit_and_look_at_origin() {
        let opts = GenerateOptions::default();
        for cam in orbit_cameras(8, 0.0, &opts)
            .unwrap()
            .iter()
            .chain(&orbit_cameras(4, 0.5, &opts).unwrap())
        {
            assert!((cam.pose.translation.norm() - 3.0).abs() < 1e-6);
            let fwd = cam.pose.rotation * Vec3::new(0.0, 0.0, -1.0);
            assert!((fwd + cam.pose.translation.normalize()).norm() < 1e-6);
            assert!(matches!(cam.project(&Vec3::zeros()), Projection::Visible { .. }));
        }
    }

    #[test]
    fn depth_noise_has_half_normal_mean_error() {
        let opts = GenerateOptions {
            n_train: 4,
            n_test: 0,
            ..Default::default()
        };
        let clean = synthesize(&SceneSpec::cube(), &opts).unwrap();
        let noisy = synthesize(
            &SceneSpec::cube(),
            &GenerateOptions {
                noise_sigma: 0.05,
                ..opts
            },
        )
        .unwrap();
        let (mut sum, mut n) = (0.0, 0usize);
        for (a, b) in clean.frames.iter().zip(&noisy.frames) {
            for (&c, &z) in a.depth.data.iter().zip(&b.depth.data) {
                if c > 0.0 {
                    sum += f64::from((z - c).abs());
                    n += 1;
                }
            }
        }
        let mean = sum / n as f64;
        let want = 0.05 * (2.0 / std::f64::consts::PI).sqrt();
        assert!((mean - want).abs() < 0.002, "{mean} vs {want} over {n} pixels");
    }

    #[test]
    fn save_load_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_dataset(&SceneSpec::cube(), &small_opts(), dir.path()).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back.frames.len(), 5);
        assert_eq!(back.indices(Split::Test), vec![3, 4]);
        for (a, b) in ds.frames.iter().zip(&back.frames) {
            assert!(a
                .depth
                .data
                .iter()
                .zip(&b.depth.data)
                .all(|(x, y)| x.to_bits() == y.to_bits()));
            assert!(a
                .color
                .data
                .iter()
                .zip(&b.color.data)
                .all(|(x, y)| (x - y).abs() <= 1.0 / 510.0 + 1e-7));
            assert!((a.camera.pose.rotation - b.camera.pose.rotation).abs().max() < 1e-15);
        }
    }

    #[test]
    fn manifest_schema_errors_name_the_field() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(
            dir.path().join(MANIFEST),
            r#"{"fl_x": 1, "fl_y": 1, "cx": 1, "cy": 1, "w": 4, "h": 4, "near": 0.5, "far": 6}"#,
        )
        .unwrap();
        let err = load_dataset(dir.path()).unwrap_err();
        assert!(matches!(err, Error::Schema(_)));
        assert!(err.to_string().contains("frames"), "{err}");
        assert!(matches!(load_dataset(&dir.path().join("nope")), Err(Error::Io { .. })));
    }

    #[test]
    fn generation_rejects_bad_options() {
        let scene = SceneSpec::cube();
        assert!(synthesize(
            &scene,
            &GenerateOptions {
                n_train: 0,
                ..small_opts()
            }
        )
        .is_err());
        assert!(synthesize(
            &scene,
            &GenerateOptions {
                radius: 1.0,
                ..small_opts()
            }
        )
        .is_err());
    }

    #[test]
    fn error_maps_are_cached() {
        let dir = tempfile::tempdir().unwrap();
        let mut ds = generate_dataset(&SceneSpec::cube(), &small_opts(), dir.path()).unwrap();
        ds.ensure_error_maps(dir.path(), 0.5).unwrap();
        assert!(error_map_path(dir.path(), 4).exists());
        let first = ds.error_maps.clone().unwrap();
        let mut again = load_dataset(dir.path()).unwrap();
        again.ensure_error_maps(dir.path(), 0.5).unwrap();
        assert_eq!(again.error_maps.unwrap(), first);
    }
}
