//! Volume rendering by front-to-back alpha compositing.
//!
//! For ascending samples `t_1..t_n` with densities `σ_i` and colors `c_i`:
//!
//! ```text
//! δ_i = t_{i+1} − t_i,   δ_n = max(t_far − t_n, 1e-6)
//! α_i = 1 − exp(−σ_i δ_i)
//! T_i = Π_{j<i} (1 − α_j),   w_i = T_i α_i
//! C = Σ w_i c_i          (black background)
//! A = Σ w_i
//! D = Σ w_i t_i / max(A, 1e-6)
//! ```
//!
//! The last interval ends at the far bound rather than at infinity; with
//! samples packed around the surface an infinite last interval would force the
//! last sample opaque.

use std::time::{Duration, Instant};

use rayon::prelude::*;

use crate::field::{
    field_backward_into, field_forward_into, ActivationCache, FieldOutput, FieldParams, ParamGradients,
};
use crate::geometry::{Camera, Ray};
use crate::linalg::Scalar;
use crate::raster::{DepthMap, RgbImage};
use crate::sampling::{sample_ray, DepthErrorMap, RaySamples, SamplingConfig};
use crate::seed;
use crate::{Error, Result};

pub const MIN_LAST_DELTA: f64 = 1e-6;
pub const ACC_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct RenderResult<T> {
    pub color: [T; 3],
    /// Expected ray distance, normalized by `acc`.
    pub depth: T,
    pub acc: T,
    pub weights: Vec<T>,
    /// `T_i` for each sample.
    pub transmittance: Vec<T>,
    /// Transmittance past the last sample, `1 − acc` up to rounding.
    pub t_final: T,
}

/// Upstream gradients for one ray's outputs.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RenderCotangent<T> {
    pub color: [T; 3],
    pub depth: T,
    pub acc: T,
}

fn deltas<T: Scalar>(t: &[f64], t_far: f64) -> impl Iterator<Item = T> + '_ {
    let n = t.len();
    (0..n).map(move |i| {
        let d = if i + 1 < n {
            t[i + 1] - t[i]
        } else {
            (t_far - t[i]).max(MIN_LAST_DELTA)
        };
        T::lit(d)
    })
}

fn check_inputs<T>(t: &[f64], density: &[T], rgb: &[T]) -> Result<()> {
    if density.len() != t.len() || rgb.len() != 3 * t.len() {
        return Err(Error::Shape(format!(
            "{} samples with {} densities and {} color values",
            t.len(),
            density.len(),
            rgb.len()
        )));
    }
    // negated so NaN distances are rejected too
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    let unsorted = t.windows(2).any(|w| !(w[0] <= w[1]));
    if unsorted {
        return Err(Error::Domain("sample distances are not ascending".into()));
    }
    Ok(())
}

/// Composite per-sample density and interleaved rgb into a pixel.
pub fn composite<T: Scalar>(t: &[f64], density: &[T], rgb: &[T], t_far: f64) -> Result<RenderResult<T>> {
    check_inputs(t, density, rgb)?;
    let n = t.len();
    let mut weights = Vec::with_capacity(n);
    let mut transmittance = Vec::with_capacity(n);
    let mut trans = T::one();
    let mut color = [T::zero(); 3];
    let (mut acc, mut depth_sum) = (T::zero(), T::zero());
    for (i, delta) in deltas::<T>(t, t_far).enumerate() {
        let survive = (-(density[i] * delta)).exp();
        let w = trans * (T::one() - survive);
        transmittance.push(trans);
        weights.push(w);
        for c in 0..3 {
            color[c] = color[c] + w * rgb[3 * i + c];
        }
        acc = acc + w;
        depth_sum = depth_sum + w * T::lit(t[i]);
        trans = trans * survive;
    }
    let mut depth = depth_sum / acc.max(T::lit(ACC_FLOOR));
    if n > 0 && acc > T::lit(ACC_FLOOR) {
        // a convex combination of the t_i; rounding can leave it an ulp outside
        depth = depth.max(T::lit(t[0])).min(T::lit(t[n - 1]));
    }
    Ok(RenderResult {
        color,
        depth,
        acc,
        weights,
        transmittance,
        t_final: trans,
    })
}

/// Exact gradients of the composite outputs w.r.t. density and rgb.
///
/// Returns `(d_density, d_rgb)` with rgb interleaved like the input.
pub fn composite_backward<T: Scalar>(
    t: &[f64],
    density: &[T],
    rgb: &[T],
    t_far: f64,
    forward: &RenderResult<T>,
    cot: &RenderCotangent<T>,
) -> Result<(Vec<T>, Vec<T>)> {
    check_inputs(t, density, rgb)?;
    let n = t.len();
    let mut d_density = vec![T::zero(); n];
    let mut d_rgb = vec![T::zero(); 3 * n];
    composite_backward_into(t, rgb, t_far, forward, cot, &mut d_density, &mut d_rgb);
    Ok((d_density, d_rgb))
}

fn composite_backward_into<T: Scalar>(
    t: &[f64],
    rgb: &[T],
    t_far: f64,
    fwd: &RenderResult<T>,
    cot: &RenderCotangent<T>,
    d_density: &mut [T],
    d_rgb: &mut [T],
) {
    let n = t.len();
    let floor = T::lit(ACC_FLOOR);
    let normalized = fwd.acc > floor;
    let denom = fwd.acc.max(floor);
    // dL/dw_i
    let gw = |i: usize| -> T {
        let c = &rgb[3 * i..3 * i + 3];
        let dd = if normalized {
            (T::lit(t[i]) - fwd.depth) / denom
        } else {
            T::lit(t[i]) / denom
        };
        cot.color[0] * c[0] + cot.color[1] * c[1] + cot.color[2] * c[2] + cot.acc + cot.depth * dd
    };
    let delta: Vec<T> = deltas::<T>(t, t_far).collect();
    // suffix = Σ_{i>k} gw_i·w_i
    let mut suffix = T::zero();
    for k in (0..n).rev() {
        let g = gw(k);
        let w = fwd.weights[k];
        let t_next = if k + 1 < n {
            fwd.transmittance[k + 1]
        } else {
            fwd.t_final
        };
        d_density[k] = delta[k] * (g * t_next - suffix);
        suffix = suffix + g * w;
        for c in 0..3 {
            d_rgb[3 * k + c] = cot.color[c] * w;
        }
    }
}

/// Composite samples whose density/color come from an arbitrary field.
pub fn render_ray_with<T, F>(ray: &Ray, samples: &RaySamples, field: F) -> Result<RenderResult<T>>
where
    T: Scalar,
    F: FnOnce(&[[T; 3]], &[[T; 3]]) -> Result<FieldOutput<T>>,
{
    let (pos, dirs) = sample_points::<T>(ray, &samples.t);
    let out = field(&pos, &dirs)?;
    composite(&samples.t, &out.density, &out.rgb, ray.t_far)
}

fn sample_points<T: Scalar>(ray: &Ray, t: &[f64]) -> (Vec<[T; 3]>, Vec<[T; 3]>) {
    let d = ray.direction;
    let dir = [T::lit(d.x), T::lit(d.y), T::lit(d.z)];
    let pos = t
        .iter()
        .map(|&ti| {
            let p = ray.at(ti);
            [T::lit(p.x), T::lit(p.y), T::lit(p.z)]
        })
        .collect();
    (pos, vec![dir; t.len()])
}

/// Evaluate the field along one ray and composite.
pub fn render_ray<T: Scalar>(
    params: &FieldParams<T>,
    ray: &Ray,
    samples: &RaySamples,
) -> Result<(RenderResult<T>, RenderWorkspace<T>)> {
    let mut ws = RenderWorkspace::default();
    let mut results = render_rays(
        params,
        std::slice::from_ref(ray),
        std::slice::from_ref(samples),
        &mut ws,
    )?;
    Ok((results.pop().expect("one ray"), ws))
}

/// Time spent in field evaluation and compositing, forward plus backward.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PhaseTimes {
    pub field: Duration,
    pub composite: Duration,
}

/// Buffers for batched ray rendering and its backward pass.
#[derive(Debug, Clone, Default)]
pub struct RenderWorkspace<T> {
    /// Accumulated across calls; reset by the caller.
    pub times: PhaseTimes,
    rays: Vec<(usize, f64)>,
    t: Vec<f64>,
    positions: Vec<[T; 3]>,
    dirs: Vec<[T; 3]>,
    out: FieldOutput<T>,
    cache: ActivationCache<T>,
    results: Vec<RenderResult<T>>,
    d_density: Vec<T>,
    d_rgb: Vec<T>,
}

impl<T: Scalar> RenderWorkspace<T> {
    /// Field outputs of the last [`render_rays`] call, flattened over rays.
    pub fn field_output(&self) -> &FieldOutput<T> {
        &self.out
    }
}

/// Render a batch of rays with one field evaluation.
pub fn render_rays<T: Scalar>(
    params: &FieldParams<T>,
    rays: &[Ray],
    samples: &[RaySamples],
    ws: &mut RenderWorkspace<T>,
) -> Result<Vec<RenderResult<T>>> {
    if rays.len() != samples.len() {
        return Err(Error::Shape(format!(
            "{} rays but {} sample sets",
            rays.len(),
            samples.len()
        )));
    }
    ws.rays.clear();
    ws.t.clear();
    ws.positions.clear();
    ws.dirs.clear();
    for (ray, s) in rays.iter().zip(samples) {
        ws.rays.push((s.len(), ray.t_far));
        ws.t.extend_from_slice(&s.t);
        let d = ray.direction;
        let dir = [T::lit(d.x), T::lit(d.y), T::lit(d.z)];
        for &ti in &s.t {
            let p = ray.at(ti);
            ws.positions.push([T::lit(p.x), T::lit(p.y), T::lit(p.z)]);
            ws.dirs.push(dir);
        }
    }
    let clock = Instant::now();
    field_forward_into(params, &ws.positions, &ws.dirs, &mut ws.cache, &mut ws.out)?;
    let clock = tick(&mut ws.times.field, clock);
    let mut results = Vec::with_capacity(rays.len());
    let mut offset = 0;
    for &(n, t_far) in &ws.rays {
        let r = offset..offset + n;
        results.push(composite(
            &ws.t[r.clone()],
            &ws.out.density[r.clone()],
            &ws.out.rgb[3 * r.start..3 * r.end],
            t_far,
        )?);
        offset += n;
    }
    ws.results = results.clone();
    tick(&mut ws.times.composite, clock);
    Ok(results)
}

fn tick(acc: &mut Duration, since: Instant) -> Instant {
    let now = Instant::now();
    *acc += now - since;
    now
}

/// Backpropagate per-ray cotangents from the last [`render_rays`] call into
/// `grads` (accumulating).
pub fn render_rays_backward<T: Scalar>(
    params: &FieldParams<T>,
    ws: &mut RenderWorkspace<T>,
    cotangents: &[RenderCotangent<T>],
    grads: &mut ParamGradients<T>,
) -> Result<()> {
    if cotangents.len() != ws.rays.len() {
        return Err(Error::Shape(format!(
            "{} cotangents for {} rendered rays",
            cotangents.len(),
            ws.rays.len()
        )));
    }
    let clock = Instant::now();
    let total = ws.t.len();
    ws.d_density.clear();
    ws.d_density.resize(total, T::zero());
    ws.d_rgb.clear();
    ws.d_rgb.resize(3 * total, T::zero());
    let mut offset = 0;
    for ((&(n, t_far), cot), fwd) in ws.rays.iter().zip(cotangents).zip(&ws.results) {
        let r = offset..offset + n;
        composite_backward_into(
            &ws.t[r.clone()],
            &ws.out.rgb[3 * r.start..3 * r.end],
            t_far,
            fwd,
            cot,
            &mut ws.d_density[r.clone()],
            &mut ws.d_rgb[3 * r.start..3 * r.end],
        );
        offset += n;
    }
    let clock = tick(&mut ws.times.composite, clock);
    field_backward_into(params, &mut ws.cache, &ws.d_density, &ws.d_rgb, grads)?;
    tick(&mut ws.times.field, clock);
    Ok(())
}

/// Sensor data used to place samples when rendering a view.
#[derive(Debug, Clone, Copy)]
pub struct DepthSource<'a> {
    pub depth: &'a DepthMap,
    pub error: Option<&'a DepthErrorMap>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderedImage {
    pub color: RgbImage,
    /// Expected depth converted to planar z-depth.
    pub depth: DepthMap,
    pub acc: Vec<f32>,
}

/// Render every pixel center of `camera`. Sampling is forced deterministic.
pub fn render_image<T: Scalar>(
    params: &FieldParams<T>,
    camera: &Camera,
    depth_source: Option<DepthSource<'_>>,
    cfg: &SamplingConfig,
    near: f64,
    far: f64,
) -> Result<RenderedImage> {
    let (w, h) = (camera.width(), camera.height());
    if let Some(src) = depth_source {
        if src.depth.width != w || src.depth.height != h {
            return Err(Error::Shape("depth source does not match camera resolution".into()));
        }
    }
    let cfg = cfg.deterministic();
    type Pixel = ([f32; 3], f32, f32);
    let rows: Vec<Result<Vec<Pixel>>> = (0..h)
        .into_par_iter()
        .map(|y| {
            let mut rays = Vec::with_capacity(w);
            let mut samples = Vec::with_capacity(w);
            for x in 0..w {
                let ray = camera.generate_ray(x as f64 + 0.5, y as f64 + 0.5, near, far)?;
                let depth = depth_source.map(|s| f64::from(s.depth.get(x, y)));
                let err = depth_source.and_then(|s| s.error).map(|e| f64::from(e.get(x, y)));
                // no randomness is consumed with perturb off
                let mut rng = seed::rng_for(0, &[y as u64, x as u64]);
                samples.push(sample_ray(&ray, depth, err, &cfg, &mut rng));
                rays.push(ray);
            }
            let mut ws = RenderWorkspace::default();
            let results = render_rays(params, &rays, &samples, &mut ws)?;
            Ok(results
                .iter()
                .zip(&rays)
                .map(|(r, ray)| {
                    (
                        [
                            r.color[0].f64() as f32,
                            r.color[1].f64() as f32,
                            r.color[2].f64() as f32,
                        ],
                        ray.distance_to_depth(r.depth.f64()) as f32,
                        r.acc.f64() as f32,
                    )
                })
                .collect())
        })
        .collect();
    let mut color = RgbImage::new(w, h);
    let mut depth = DepthMap::new(w, h);
    let mut acc = vec![0.0; w * h];
    for (y, row) in rows.into_iter().enumerate() {
        for (x, (c, d, a)) in row?.into_iter().enumerate() {
            color.set(x, y, c);
            depth.set(x, y, d);
            acc[y * w + x] = a;
        }
    }
    Ok(RenderedImage { color, depth, acc })
}
