//! Depth-guided ray sampling.
//!
//! Four strategies place `n` sample distances along a ray:
//! - `GlobalStratified`: one sample per equal bin of `[t_near, t_far]` (the
//!   classic NeRF scheme, used as the baseline and as the fallback whenever a
//!   pixel has no usable depth).
//! - `StratifiedLocal`: the same, restricted to `[t − delta, t + delta]`
//!   around the measured surface distance `t`.
//! - `Gaussian`: draws from `Normal(t, sigma_fixed²)`, clamped to the ray
//!   bounds and sorted.
//! - `Adaptive`: Gaussian whose spread grows with the pixel's multiview depth
//!   error.
//!
//! With `perturb = false` every strategy is deterministic: stratified samples
//! sit at bin midpoints and Gaussian samples at the normal quantiles
//! `Φ⁻¹((i + ½)/n)`.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal as StatNormal};

use crate::geometry::{Camera, Projection, Ray};
use crate::raster::{is_valid_depth, DepthMap};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplingStrategy {
    #[serde(rename = "global")]
    GlobalStratified,
    #[serde(rename = "stratified")]
    StratifiedLocal,
    Gaussian,
    Adaptive,
}

impl SamplingStrategy {
    pub const ALL: [SamplingStrategy; 4] = [
        SamplingStrategy::StratifiedLocal,
        SamplingStrategy::Gaussian,
        SamplingStrategy::Adaptive,
        SamplingStrategy::GlobalStratified,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            SamplingStrategy::GlobalStratified => "global",
            SamplingStrategy::StratifiedLocal => "stratified",
            SamplingStrategy::Gaussian => "gaussian",
            SamplingStrategy::Adaptive => "adaptive",
        }
    }

    pub fn is_local(&self) -> bool {
        !matches!(self, SamplingStrategy::GlobalStratified)
    }
}

impl fmt::Display for SamplingStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SamplingStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "global" | "nerf" | "global-stratified" => Ok(SamplingStrategy::GlobalStratified),
            "stratified" | "local" | "stratified-local" => Ok(SamplingStrategy::StratifiedLocal),
            "gaussian" => Ok(SamplingStrategy::Gaussian),
            "adaptive" => Ok(SamplingStrategy::Adaptive),
            other => Err(Error::Config(format!(
                "unknown strategy {other:?} (expected global, stratified, gaussian or adaptive)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingConfig {
    pub strategy: SamplingStrategy,
    pub n_samples: usize,
    /// Half-width of the local stratified interval (world units).
    pub delta: f64,
    /// Standard deviation for `Gaussian` (world units).
    pub sigma_fixed: f64,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub k_error: f64,
    pub perturb: bool,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            strategy: SamplingStrategy::Gaussian,
            n_samples: 16,
            delta: 0.15,
            sigma_fixed: 0.05,
            sigma_min: 0.01,
            sigma_max: 0.5,
            k_error: 1.0,
            perturb: true,
        }
    }
}

impl SamplingConfig {
    pub fn validate(&self) -> Result<()> {
        let checks = [
            (self.n_samples >= 2, "n_samples must be >= 2"),
            (self.delta > 0.0, "delta must be > 0"),
            (self.sigma_fixed >= 0.0, "sigma_fixed must be >= 0"),
            (self.sigma_min > 0.0, "sigma_min must be > 0"),
            (self.sigma_min <= self.sigma_max, "sigma_min must be <= sigma_max"),
            (self.k_error >= 0.0, "k_error must be >= 0"),
        ];
        match checks.iter().find(|(ok, _)| !ok) {
            Some((_, msg)) => Err(Error::Config((*msg).to_string())),
            None => Ok(()),
        }
    }

    pub fn with_strategy(mut self, strategy: SamplingStrategy) -> Self {
        self.strategy = strategy;
        self
    }

    pub fn deterministic(mut self) -> Self {
        self.perturb = false;
        self
    }
}

/// Ascending sample distances along one ray.
#[derive(Debug, Clone, PartialEq)]
pub struct RaySamples {
    pub t: Vec<f64>,
    /// True when placement used the pixel's depth, false for the global
    /// baseline or the invalid-depth fallback.
    pub from_depth: bool,
    pub strategy: SamplingStrategy,
}

impl RaySamples {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    pub fn is_sorted_within(&self, t_near: f64, t_far: f64) -> bool {
        self.t.windows(2).all(|w| w[0] <= w[1]) && self.t.iter().all(|&t| t >= t_near && t <= t_far)
    }
}

fn stratified(lo: f64, hi: f64, n: usize, perturb: bool, rng: &mut impl Rng) -> Vec<f64> {
    let width = (hi - lo) / n as f64;
    (0..n)
        .map(|i| {
            let u = if perturb { rng.gen::<f64>() } else { 0.5 };
            // the last bin may round past `hi`
            (lo + (i as f64 + u) * width).min(hi)
        })
        .collect()
}

pub fn sample_stratified_global(t_near: f64, t_far: f64, n: usize, perturb: bool, rng: &mut impl Rng) -> RaySamples {
    RaySamples {
        t: stratified(t_near, t_far, n, perturb, rng),
        from_depth: false,
        strategy: SamplingStrategy::GlobalStratified,
    }
}

/// Stratified sampling of `[depth_t − delta, depth_t + delta] ∩ [t_near, t_far]`.
pub fn sample_stratified_local(
    depth_t: f64,
    delta: f64,
    n: usize,
    t_near: f64,
    t_far: f64,
    perturb: bool,
    rng: &mut impl Rng,
) -> RaySamples {
    let lo = t_near.max(depth_t - delta);
    let hi = t_far.min(depth_t + delta);
    // negated so NaN bounds or depth fall back too
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    let degenerate = !(lo < hi) || !(depth_t > 0.0);
    if degenerate {
        return sample_stratified_global(t_near, t_far, n, perturb, rng);
    }
    RaySamples {
        t: stratified(lo, hi, n, perturb, rng),
        from_depth: true,
        strategy: SamplingStrategy::StratifiedLocal,
    }
}

/// Standard normal quantiles at `(i + ½)/n`.
pub fn normal_quantiles(n: usize) -> Vec<f64> {
    let std = StatNormal::new(0.0, 1.0).expect("unit normal");
    (0..n).map(|i| std.inverse_cdf((i as f64 + 0.5) / n as f64)).collect()
}

/// Samples from `Normal(depth_t, sigma²)`, clamped to the ray bounds, ascending.
pub fn sample_gaussian(
    depth_t: f64,
    sigma: f64,
    n: usize,
    t_near: f64,
    t_far: f64,
    perturb: bool,
    rng: &mut impl Rng,
) -> RaySamples {
    let mut t: Vec<f64> = if sigma <= 0.0 {
        vec![depth_t; n]
    } else if perturb {
        let normal = Normal::new(depth_t, sigma).expect("positive finite sigma");
        (0..n).map(|_| normal.sample(rng)).collect()
    } else {
        normal_quantiles(n).into_iter().map(|z| depth_t + sigma * z).collect()
    };
    for v in &mut t {
        *v = v.clamp(t_near, t_far);
    }
    t.sort_by(f64::total_cmp);
    RaySamples {
        t,
        from_depth: true,
        strategy: SamplingStrategy::Gaussian,
    }
}

/// Affine error-to-spread map: `clamp(sigma_min + k_error·e, sigma_min, sigma_max)`.
pub fn sigma_from_error(e: f64, cfg: &SamplingConfig) -> f64 {
    (cfg.sigma_min + cfg.k_error * e.max(0.0)).clamp(cfg.sigma_min, cfg.sigma_max)
}

/// Sample one camera ray given the pixel's sensed z-depth and error value.
///
/// Missing, non-positive or non-finite depth falls back to global stratified
/// sampling so background rays still get supervised. For `Adaptive`, a
/// missing error value means maximal spread.
pub fn sample_ray(
    ray: &Ray,
    pixel_depth: Option<f64>,
    pixel_error: Option<f64>,
    cfg: &SamplingConfig,
    rng: &mut impl Rng,
) -> RaySamples {
    let n = cfg.n_samples;
    let (near, far) = (ray.t_near, ray.t_far);
    let depth_t = match pixel_depth {
        Some(z) if is_valid_depth(z) && cfg.strategy.is_local() => ray.depth_to_distance(z),
        _ => return sample_stratified_global(near, far, n, cfg.perturb, rng),
    };
    match cfg.strategy {
        SamplingStrategy::GlobalStratified => unreachable!("handled above"),
        SamplingStrategy::StratifiedLocal => {
            sample_stratified_local(depth_t, cfg.delta, n, near, far, cfg.perturb, rng)
        }
        SamplingStrategy::Gaussian => sample_gaussian(depth_t, cfg.sigma_fixed, n, near, far, cfg.perturb, rng),
        SamplingStrategy::Adaptive => {
            let sigma = pixel_error.map_or(cfg.sigma_max, |e| sigma_from_error(e, cfg));
            let mut s = sample_gaussian(depth_t, sigma, n, near, far, cfg.perturb, rng);
            s.strategy = SamplingStrategy::Adaptive;
            s
        }
    }
}

/// Per-pixel multiview depth inconsistency for one view.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthErrorMap {
    pub width: usize,
    pub height: usize,
    pub e: Vec<f32>,
    /// Value stored where no other view gives evidence.
    pub e_max_fill: f32,
}

impl DepthErrorMap {
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.e[y * self.width + x]
    }

    pub fn as_depth_map(&self) -> DepthMap {
        DepthMap {
            width: self.width,
            height: self.height,
            data: self.e.clone(),
        }
    }

    pub fn from_depth_map(map: DepthMap, e_max_fill: f32) -> Result<Self> {
        if !map.data.iter().all(|v| v.is_finite() && *v >= 0.0) {
            return Err(Error::Domain("error map values must be finite and >= 0".into()));
        }
        Ok(Self {
            width: map.width,
            height: map.height,
            e: map.data,
            e_max_fill,
        })
    }
}

/// How a reprojected point reads the other view's depth map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DepthLookup {
    /// Depth of the pixel containing the projection.
    Nearest,
    /// Piecewise-planar reading of nearby pixel centers. Inverse depth is
    /// affine in pixel coordinates on a plane, so each triangle of three
    /// adjacent valid centers defines a candidate surface. Triangles from the
    /// enclosing quad and its neighbours are extended to `(u, v)` and the
    /// candidate closest to the reprojected depth is used: exact on planar
    /// pieces, also across creases and silhouettes. Falls back to `Nearest`
    /// when no triangle is valid.
    #[default]
    Planar,
}

/// Candidate depths at offset `(ax, ay)` from the quad with top-left center
/// `(x0, y0)`: one per triangle of three valid centers.
fn quad_candidates(map: &DepthMap, x0: usize, y0: usize, ax: f64, ay: f64) -> [Option<f64>; 4] {
    // corners (0,0), (1,0), (0,1), (1,1) as inverse depth
    let inv = [(x0, y0), (x0 + 1, y0), (x0, y0 + 1), (x0 + 1, y0 + 1)].map(|(x, y)| {
        let d = f64::from(map.get(x, y));
        is_valid_depth(d).then(|| 1.0 / d)
    });
    // the triangle that leaves out corner k, extended as a plane
    [
        inv[1]
            .zip(inv[2])
            .zip(inv[3])
            .map(|((i1, i2), i3)| i3 + (i3 - i2) * (ax - 1.0) + (i3 - i1) * (ay - 1.0)),
        inv[0]
            .zip(inv[2])
            .zip(inv[3])
            .map(|((i0, i2), i3)| i0 + (i3 - i2) * ax + (i2 - i0) * ay),
        inv[0]
            .zip(inv[1])
            .zip(inv[3])
            .map(|((i0, i1), i3)| i0 + (i1 - i0) * ax + (i3 - i1) * ay),
        inv[0]
            .zip(inv[1])
            .zip(inv[2])
            .map(|((i0, i1), i2)| i0 + (i1 - i0) * ax + (i2 - i0) * ay),
    ]
}

/// Reference depth at `(u, v)` to compare with the reprojected depth `z`.
fn lookup_depth(map: &DepthMap, u: f64, v: f64, z: f64, mode: DepthLookup) -> Option<f64> {
    let nearest = || {
        let (x, y) = (u.floor() as usize, v.floor() as usize);
        let d = f64::from(map.get(x.min(map.width - 1), y.min(map.height - 1)));
        is_valid_depth(d).then_some(d)
    };
    if mode == DepthLookup::Nearest {
        return nearest();
    }
    let (fx, fy) = (u - 0.5, v - 0.5);
    let (cx, cy) = (fx.floor() as isize, fy.floor() as isize);
    let mut best: Option<f64> = None;
    // the enclosing quad and its eight neighbours, so a surface at least two
    // pixels wide is still found next to a silhouette
    for qy in cy - 1..=cy + 1 {
        for qx in cx - 1..=cx + 1 {
            if qx < 0 || qy < 0 || qx as usize + 1 >= map.width || qy as usize + 1 >= map.height {
                continue;
            }
            let (ax, ay) = (fx - qx as f64, fy - qy as f64);
            for i in quad_candidates(map, qx as usize, qy as usize, ax, ay)
                .into_iter()
                .flatten()
            {
                if i > 0.0 {
                    let d = 1.0 / i;
                    if best.is_none_or(|b| (d - z).abs() < (b - z).abs()) {
                        best = Some(d);
                    }
                }
            }
        }
    }
    best.or_else(nearest)
}

/// Multiview depth error maps with the default lookup.
pub fn compute_depth_error_maps(frames: &[(Camera, &DepthMap)], e_max_fill: f32) -> Vec<DepthErrorMap> {
    compute_depth_error_maps_with(frames, e_max_fill, DepthLookup::default())
}

/// For each view `i` and pixel with valid depth: backproject, reproject into
/// every other view `j`, and average `|z_j − depth_j(u, v)|` over the views
/// where the point lands in-bounds on valid depth. Pixels without evidence get
/// `e_max_fill`. Occluded reprojections are kept and inflate the error.
pub fn compute_depth_error_maps_with(
    frames: &[(Camera, &DepthMap)],
    e_max_fill: f32,
    lookup: DepthLookup,
) -> Vec<DepthErrorMap> {
    (0..frames.len())
        .into_par_iter()
        .map(|i| {
            let others: Vec<(Camera, &DepthMap)> = frames
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(_, f)| *f)
                .collect();
            depth_error_map(&frames[i].0, frames[i].1, &others, e_max_fill, lookup)
        })
        .collect()
}

/// Error map of one target view measured against a set of reference views.
pub fn depth_error_map(
    camera: &Camera,
    depth: &DepthMap,
    references: &[(Camera, &DepthMap)],
    e_max_fill: f32,
    lookup: DepthLookup,
) -> DepthErrorMap {
    let mut e = vec![e_max_fill; depth.width * depth.height];
    for y in 0..depth.height {
        for x in 0..depth.width {
            let d = f64::from(depth.get(x, y));
            if !is_valid_depth(d) {
                continue;
            }
            let Ok(point) = camera.backproject(x as f64 + 0.5, y as f64 + 0.5, d) else {
                continue;
            };
            let (mut sum, mut count) = (0.0, 0usize);
            for (cam_j, depth_j) in references {
                if let Projection::Visible { u, v, z } = cam_j.project(&point) {
                    if let Some(dj) = lookup_depth(depth_j, u, v, z, lookup) {
                        sum += (z - dj).abs();
                        count += 1;
                    }
                }
            }
            if count > 0 {
                e[y * depth.width + x] = (sum / count as f64) as f32;
            }
        }
    }
    DepthErrorMap {
        width: depth.width,
        height: depth.height,
        e,
        e_max_fill,
    }
}
