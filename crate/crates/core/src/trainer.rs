//! Joint color + depth optimization of the radiance field.
//!
//! Each step draws a batch of training rays, places samples with the
//! configured strategy, renders, and backpropagates
//!
//! ```text
//! L = mean_rays,channels (C - C_gt)^2 + λ · mean_valid_rays (D - D_sensor)^2
//! ```
//!
//! where depths are ray distances. The batch is split into contiguous shards
//! that run in parallel, each with a private gradient buffer; buffers are
//! summed in shard order before a single Adam update, so a fixed worker count
//! gives bit-identical runs.

use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{RgbdDataset, Split};
use crate::field::{load_checkpoint, save_checkpoint, FieldArch, FieldParams, ParamGradients};
use crate::geometry::Ray;
use crate::linalg::Scalar;
use crate::metrics::{evaluate, psnr_from_mse, FieldRenderer};
use crate::raster::is_valid_depth;
use crate::renderer::{render_rays, render_rays_backward, PhaseTimes, RenderCotangent, RenderResult, RenderWorkspace};
use crate::sampling::{sample_ray, DepthLookup, RaySamples, SamplingConfig, SamplingStrategy};
use crate::seed;
use crate::{Error, Result};

pub const ADAM_MAGIC: &[u8; 4] = b"NRDA";
pub const ADAM_VERSION: u32 = 1;
/// Learning rate at the last iteration relative to the initial rate.
pub const LR_FINAL_RATIO: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub iters: usize,
    pub batch_rays: usize,
    pub lr: f64,
    pub lambda_depth: f64,
    /// Depth loss only on rays whose accumulated opacity reaches this value.
    pub acc_mask_threshold: f64,
    pub seed: u64,
    /// Evaluate on the test split every this many iterations (0 = never).
    pub eval_every: usize,
    /// Write a checkpoint every this many iterations (0 = only at the end).
    pub checkpoint_every: usize,
    pub workers: usize,
    /// Error assigned to pixels no other view can verify.
    pub e_max_fill: f32,
    pub sampling: SamplingConfig,
    pub arch: FieldArch,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iters: 20_000,
            batch_rays: 1024,
            lr: 5e-4,
            lambda_depth: 0.1,
            acc_mask_threshold: 0.0,
            seed: 0,
            eval_every: 0,
            checkpoint_every: 0,
            workers: 1,
            e_max_fill: 1.0,
            sampling: SamplingConfig::default(),
            arch: FieldArch::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(msg.into()));
        if self.batch_rays == 0 {
            return bad("batch_rays must be >= 1");
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad("lr must be finite and > 0");
        }
        if !(self.lambda_depth.is_finite() && self.lambda_depth >= 0.0) {
            return bad("lambda_depth must be finite and >= 0");
        }
        if !(0.0..=1.0).contains(&self.acc_mask_threshold) {
            return bad("acc_mask_threshold must be in [0, 1]");
        }
        if self.workers == 0 {
            return bad("workers must be >= 1");
        }
        if !(self.e_max_fill.is_finite() && self.e_max_fill >= 0.0) {
            return bad("e_max_fill must be finite and >= 0");
        }
        self.sampling.validate()?;
        self.arch.validate()
    }

    pub fn lr_at(&self, iter: usize) -> f64 {
        self.lr * LR_FINAL_RATIO.powf(iter as f64 / self.iters.max(1) as f64)
    }

    pub fn objective(&self) -> Objective {
        Objective {
            lambda_depth: self.lambda_depth,
            acc_mask_threshold: self.acc_mask_threshold,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Objective {
    pub lambda_depth: f64,
    pub acc_mask_threshold: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub step: u64,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

impl<T: Scalar> AdamState<T> {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![T::zero(); n],
            v: vec![T::zero(); n],
            step: 0,
        }
    }
}

/// One bias-corrected Adam update. Non-finite gradients are rejected before
/// anything is modified.
pub fn adam_step<T: Scalar>(
    params: &mut FieldParams<T>,
    grads: &ParamGradients<T>,
    state: &mut AdamState<T>,
    lr: f64,
) -> Result<()> {
    let n = params.len();
    if grads.data.len() != n || state.m.len() != n || state.v.len() != n {
        return Err(Error::Shape(format!(
            "adam: {} params, {} grads, {}/{} moments",
            n,
            grads.data.len(),
            state.m.len(),
            state.v.len()
        )));
    }
    if let Some(i) = grads.data.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!(
            "gradient {i} of {n} is {:?} at step {}",
            grads.data[i],
            state.step + 1
        )));
    }
    state.step += 1;
    let t = state.step as f64;
    let (b1, b2) = (T::lit(ADAM_BETA1), T::lit(ADAM_BETA2));
    let (one_b1, one_b2) = (T::lit(1.0 - ADAM_BETA1), T::lit(1.0 - ADAM_BETA2));
    let c1 = T::lit(1.0 / (1.0 - ADAM_BETA1.powf(t)));
    let c2 = T::lit(1.0 / (1.0 - ADAM_BETA2.powf(t)));
    let (lr, eps) = (T::lit(lr), T::lit(ADAM_EPS));
    for (((p, &g), m), v) in params
        .data_mut()
        .iter_mut()
        .zip(&grads.data)
        .zip(&mut state.m)
        .zip(&mut state.v)
    {
        *m = b1 * *m + one_b1 * g;
        *v = b2 * *v + one_b2 * g * g;
        *p = *p - lr * (*m * c1) / ((*v * c2).sqrt() + eps);
    }
    Ok(())
}

/// Sidecar layout: `NRDA`, u32 version, u64 step, u32 count, then `m` and
/// `v` as little-endian f32.
pub fn save_adam(state: &AdamState<f32>, path: &Path) -> Result<()> {
    let mut out = Vec::with_capacity(20 + 8 * state.m.len());
    out.extend_from_slice(ADAM_MAGIC);
    out.extend_from_slice(&ADAM_VERSION.to_le_bytes());
    out.extend_from_slice(&state.step.to_le_bytes());
    out.extend_from_slice(&(state.m.len() as u32).to_le_bytes());
    for x in state.m.iter().chain(&state.v) {
        out.extend_from_slice(&x.to_le_bytes());
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn load_adam(path: &Path) -> Result<AdamState<f32>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |msg: String| Error::Checkpoint(format!("{}: {msg}", path.display()));
    if bytes.len() < 20 || &bytes[..4] != ADAM_MAGIC {
        return Err(bad("missing NRDA magic".into()));
    }
    let u32_at = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
    if u32_at(4) != ADAM_VERSION {
        return Err(bad(format!("unsupported optimizer state version {}", u32_at(4))));
    }
    let step = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let n = u32_at(16) as usize;
    if bytes.len() != 20 + 8 * n {
        return Err(bad(format!(
            "expected {} bytes for {n} moments, found {}",
            20 + 8 * n,
            bytes.len()
        )));
    }
    let floats: Vec<f32> = bytes[20..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    let (m, v) = floats.split_at(n);
    Ok(AdamState {
        m: m.to_vec(),
        v: v.to_vec(),
        step,
    })
}

/// Mean over rays and channels of the squared color error.
pub fn color_loss(pred: &[[f64; 3]], gt: &[[f64; 3]]) -> Result<f64> {
    if pred.is_empty() || pred.len() != gt.len() {
        return Err(Error::Shape(format!(
            "color loss over {} vs {} rays",
            pred.len(),
            gt.len()
        )));
    }
    let sum: f64 = pred
        .iter()
        .zip(gt)
        .flat_map(|(p, g)| (0..3).map(move |c| (p[c] - g[c]).powi(2)))
        .sum();
    Ok(sum / (3 * pred.len()) as f64)
}

/// Mean squared depth error over rays that are valid and whose opacity is
/// at least `acc_threshold`; zero when no ray qualifies.
pub fn depth_loss(pred: &[f64], pred_acc: &[f64], sensor: &[f64], valid: &[bool], acc_threshold: f64) -> f64 {
    let (sum, n) = pred
        .iter()
        .zip(pred_acc)
        .zip(sensor)
        .zip(valid)
        .filter(|(((_, &a), _), &ok)| ok && a >= acc_threshold)
        .fold((0.0, 0usize), |(s, n), (((p, _), d), _)| (s + (p - d).powi(2), n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// A training ray with its supervision.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchRay {
    pub ray: Ray,
    pub rgb: [f32; 3],
    /// Sensor z-depth as stored in the frame.
    pub sensor_depth: f64,
    pub error: Option<f64>,
    pub valid: bool,
    pub frame: usize,
    pub pixel: (usize, usize),
}

impl BatchRay {
    /// Sensor depth as a distance along the ray.
    pub fn sensor_distance(&self) -> f64 {
        self.ray.depth_to_distance(self.sensor_depth)
    }
}

/// Uniform draw over (training frame, pixel) pairs, keyed by seed and
/// iteration.
pub fn sample_ray_batch(ds: &RgbdDataset, batch_rays: usize, seed: u64, iter: u64) -> Result<Vec<BatchRay>> {
    let frames = ds.indices(Split::Train);
    if frames.is_empty() {
        return Err(Error::Domain("no training frames".into()));
    }
    let mut rng = seed::rng_for(seed::derive_seed(seed, "ray-batch"), &[iter]);
    (0..batch_rays)
        .map(|_| {
            let fi = frames[rng.gen_range(0..frames.len())];
            let f = &ds.frames[fi];
            let (w, h) = (f.camera.width(), f.camera.height());
            let p = rng.gen_range(0..w * h);
            let (x, y) = (p % w, p / w);
            let ray = f.camera.generate_ray(x as f64 + 0.5, y as f64 + 0.5, ds.near, ds.far)?;
            let d = f64::from(f.depth.get(x, y));
            Ok(BatchRay {
                ray,
                rgb: f.color.get(x, y),
                sensor_depth: d,
                error: ds.error_map(fi).map(|e| f64::from(e.get(x, y))),
                valid: is_valid_depth(d),
                frame: fi,
                pixel: (x, y),
            })
        })
        .collect()
}

/// Sample positions for each ray of a batch; ray `i` of iteration `iter`
/// always gets the same stream.
pub fn sample_batch(batch: &[BatchRay], cfg: &SamplingConfig, seed: u64, iter: u64) -> Vec<RaySamples> {
    let base = seed::derive_seed(seed, "ray-samples");
    batch
        .iter()
        .enumerate()
        .map(|(i, b)| {
            let mut rng = seed::rng_for(base, &[iter, i as u64]);
            let depth = b.valid.then_some(b.sensor_depth);
            sample_ray(&b.ray, depth, b.error, cfg, &mut rng)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Losses {
    pub color: f64,
    pub depth: f64,
    pub total: f64,
    pub depth_rays: usize,
}

/// Losses for rendered rays and the cotangents of the total loss with
/// respect to each ray's color, depth and opacity.
pub fn objective<T: Scalar>(
    results: &[RenderResult<T>],
    batch: &[BatchRay],
    obj: Objective,
) -> Result<(Losses, Vec<RenderCotangent<T>>)> {
    if results.len() != batch.len() || batch.is_empty() {
        return Err(Error::Shape(format!(
            "{} results for {} rays",
            results.len(),
            batch.len()
        )));
    }
    let pred: Vec<[f64; 3]> = results.iter().map(|r| r.color.map(|c| c.f64())).collect();
    let gt: Vec<[f64; 3]> = batch.iter().map(|b| b.rgb.map(f64::from)).collect();
    let depth: Vec<f64> = results.iter().map(|r| r.depth.f64()).collect();
    let acc: Vec<f64> = results.iter().map(|r| r.acc.f64()).collect();
    let sensor: Vec<f64> = batch.iter().map(BatchRay::sensor_distance).collect();
    let used: Vec<bool> = batch
        .iter()
        .zip(&acc)
        .map(|(b, &a)| b.valid && a >= obj.acc_mask_threshold)
        .collect();
    let depth_rays = used.iter().filter(|&&u| u).count();
    let color = color_loss(&pred, &gt)?;
    let valid: Vec<bool> = batch.iter().map(|b| b.valid).collect();
    let dl = depth_loss(&depth, &acc, &sensor, &valid, obj.acc_mask_threshold);
    let kc = 2.0 / (3 * batch.len()) as f64;
    let kd = if depth_rays > 0 {
        obj.lambda_depth * 2.0 / depth_rays as f64
    } else {
        0.0
    };
    let cot = (0..batch.len())
        .map(|i| RenderCotangent {
            color: [0, 1, 2].map(|c| T::lit(kc * (pred[i][c] - gt[i][c]))),
            depth: T::lit(if used[i] { kd * (depth[i] - sensor[i]) } else { 0.0 }),
            acc: T::zero(),
        })
        .collect();
    Ok((
        Losses {
            color,
            depth: dl,
            total: color + obj.lambda_depth * dl,
            depth_rays,
        },
        cot,
    ))
}

/// Per-worker buffers for one contiguous slice of the batch.
#[derive(Debug, Clone, Default)]
pub struct Shard<T> {
    pub ws: RenderWorkspace<T>,
    pub grads: Option<ParamGradients<T>>,
}

fn shard_bounds(n: usize, shards: usize) -> Vec<std::ops::Range<usize>> {
    (0..shards).map(|s| (s * n / shards)..((s + 1) * n / shards)).collect()
}

/// Render the batch, evaluate the objective and write the summed gradient
/// into `grads`. Forward and backward passes run shard-parallel.
pub fn compute_gradients<T: Scalar>(
    params: &FieldParams<T>,
    batch: &[BatchRay],
    samples: &[RaySamples],
    obj: Objective,
    shards: &mut [Shard<T>],
    grads: &mut ParamGradients<T>,
) -> Result<Losses> {
    if samples.len() != batch.len() {
        return Err(Error::Shape(format!(
            "{} sample sets for {} rays",
            samples.len(),
            batch.len()
        )));
    }
    let bounds = shard_bounds(batch.len(), shards.len().max(1));
    let rays: Vec<Ray> = batch.iter().map(|b| b.ray).collect();
    let forward: Vec<Result<Vec<RenderResult<T>>>> = shards
        .par_iter_mut()
        .zip(bounds.par_iter())
        .map(|(sh, r)| render_rays(params, &rays[r.clone()], &samples[r.clone()], &mut sh.ws))
        .collect();
    let mut results = Vec::with_capacity(batch.len());
    for r in forward {
        results.extend(r?);
    }
    let (losses, cot) = objective(&results, batch, obj)?;
    shards
        .par_iter_mut()
        .zip(bounds.par_iter())
        .map(|(sh, r)| {
            let g = sh.grads.get_or_insert_with(|| ParamGradients::zeros_like(params));
            g.fill_zero();
            render_rays_backward(params, &mut sh.ws, &cot[r.clone()], g)
        })
        .collect::<Result<Vec<()>>>()?;
    grads.fill_zero();
    for sh in shards.iter() {
        grads.add_assign(sh.grads.as_ref().expect("filled above"))?;
    }
    Ok(losses)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub iter: usize,
    pub loss_color: f64,
    pub loss_depth: f64,
    pub loss_total: f64,
    pub psnr_batch: f64,
    pub wall_ms: f64,
}

/// Cumulative time per training phase. Field and composite times are summed
/// over shards, so they can exceed wall time with several workers.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PhaseTimings {
    pub sampling_s: f64,
    pub field_s: f64,
    pub composite_s: f64,
    pub optimizer_s: f64,
}

/// Mutable state carried across training steps.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub cfg: TrainConfig,
    pub params: FieldParams<f32>,
    pub adam: AdamState<f32>,
    shards: Vec<Shard<f32>>,
    grads: ParamGradients<f32>,
    pub timings: PhaseTimings,
    pub network_evals: u64,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let params = FieldParams::init(cfg.arch.clone(), seed::derive_seed(cfg.seed, "field-init"))?;
        Self::resume(cfg, params, None)
    }

    /// Continue from saved parameters and optimizer state.
    pub fn resume(cfg: TrainConfig, params: FieldParams<f32>, adam: Option<AdamState<f32>>) -> Result<Self> {
        cfg.validate()?;
        if params.arch() != &cfg.arch {
            return Err(Error::Config(
                "checkpoint architecture does not match the configuration".into(),
            ));
        }
        let adam = adam.unwrap_or_else(|| AdamState::new(params.len()));
        if adam.m.len() != params.len() {
            return Err(Error::Checkpoint(
                "optimizer state does not match parameter count".into(),
            ));
        }
        Ok(Self {
            grads: ParamGradients::zeros_like(&params),
            shards: vec![Shard::default(); cfg.workers],
            cfg,
            params,
            adam,
            timings: PhaseTimings::default(),
            network_evals: 0,
        })
    }

    pub fn iter(&self) -> usize {
        self.adam.step as usize
    }

    /// One optimization step at iteration `self.iter()`.
    pub fn step(&mut self, ds: &RgbdDataset) -> Result<LossBreakdown> {
        let start = Instant::now();
        let iter = self.iter();
        let batch = sample_ray_batch(ds, self.cfg.batch_rays, self.cfg.seed, iter as u64)?;
        let samples = sample_batch(&batch, &self.cfg.sampling, self.cfg.seed, iter as u64);
        self.network_evals += samples.iter().map(|s| s.len() as u64).sum::<u64>();
        let sampled = Instant::now();
        for sh in &mut self.shards {
            sh.ws.times = PhaseTimes::default();
        }
        let losses = compute_gradients(
            &self.params,
            &batch,
            &samples,
            self.cfg.objective(),
            &mut self.shards,
            &mut self.grads,
        )?;
        let backward = Instant::now();
        adam_step(&mut self.params, &self.grads, &mut self.adam, self.cfg.lr_at(iter))?;
        let end = Instant::now();
        let t = &mut self.timings;
        t.sampling_s += (sampled - start).as_secs_f64();
        t.optimizer_s += (end - backward).as_secs_f64();
        for sh in &self.shards {
            t.field_s += sh.ws.times.field.as_secs_f64();
            t.composite_s += sh.ws.times.composite.as_secs_f64();
        }
        Ok(LossBreakdown {
            iter,
            loss_color: losses.color,
            loss_depth: losses.depth,
            loss_total: losses.total,
            psnr_batch: psnr_from_mse(losses.color),
            wall_ms: (end - start).as_secs_f64() * 1e3,
        })
    }
}

/// Held-out metrics recorded during training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub iter: usize,
    /// Training wall time up to this point, evaluation excluded.
    pub train_seconds: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub abs_rel: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: FieldParams<f32>,
    pub adam: AdamState<f32>,
    pub log: Vec<LossBreakdown>,
    pub evals: Vec<EvalPoint>,
    pub timings: PhaseTimings,
    /// Wall time of the optimization steps only.
    pub train_seconds: f64,
    pub eval_seconds: f64,
    pub network_evals: u64,
}

/// Where training writes its artifacts.
#[derive(Debug, Clone, Default)]
pub struct TrainOutput {
    pub dir: Option<PathBuf>,
}

pub const MODEL_FILE: &str = "model.nrdf";
pub const ADAM_FILE: &str = "model.adam";
pub const LOG_FILE: &str = "train_log.ndjson";
pub const EVAL_LOG_FILE: &str = "eval_log.ndjson";

/// Run header written as the first log line.
#[derive(Debug, Clone, Serialize)]
struct RunHeader<'a> {
    run: &'a TrainConfig,
    lr_final_ratio: f64,
    adam: [f64; 3],
    start_iter: usize,
}

fn write_model(dir: &Path, params: &FieldParams<f32>, adam: &AdamState<f32>) -> Result<()> {
    save_checkpoint(params, &dir.join(MODEL_FILE))?;
    save_adam(adam, &dir.join(ADAM_FILE))
}

/// Load `model.nrdf` and its optimizer sidecar from a training directory.
pub fn load_training_state(dir: &Path) -> Result<(FieldParams<f32>, AdamState<f32>)> {
    Ok((
        load_checkpoint(&dir.join(MODEL_FILE))?,
        load_adam(&dir.join(ADAM_FILE))?,
    ))
}

/// Train from scratch.
pub fn train(ds: &RgbdDataset, cfg: &TrainConfig, out: &TrainOutput) -> Result<TrainOutcome> {
    run(ds, Trainer::new(cfg.clone())?, out)
}

/// Train until `cfg.iters` starting from a saved state.
pub fn train_resumed(
    ds: &RgbdDataset,
    cfg: &TrainConfig,
    params: FieldParams<f32>,
    adam: AdamState<f32>,
    out: &TrainOutput,
) -> Result<TrainOutcome> {
    run(ds, Trainer::resume(cfg.clone(), params, Some(adam))?, out)
}

fn run(ds: &RgbdDataset, mut trainer: Trainer, out: &TrainOutput) -> Result<TrainOutcome> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(trainer.cfg.workers)
        .build()
        .map_err(|e| Error::Config(format!("cannot start {} workers: {e}", trainer.cfg.workers)))?;
    let progress = pool.install(|| run_in_pool(ds, &mut trainer, out))?;
    Ok(TrainOutcome {
        params: trainer.params,
        adam: trainer.adam,
        log: progress.log,
        evals: progress.evals,
        timings: trainer.timings,
        train_seconds: progress.train.as_secs_f64(),
        eval_seconds: progress.eval.as_secs_f64(),
        network_evals: trainer.network_evals,
    })
}

#[derive(Default)]
struct Progress {
    log: Vec<LossBreakdown>,
    evals: Vec<EvalPoint>,
    train: Duration,
    eval: Duration,
}

fn ndjson<S: Serialize>(w: &mut impl Write, path: &Path, record: &S) -> Result<()> {
    let line = serde_json::to_string(record).expect("record serializes");
    writeln!(w, "{line}").map_err(|e| Error::io(path, e))
}

fn run_in_pool(ds: &RgbdDataset, trainer: &mut Trainer, out: &TrainOutput) -> Result<Progress> {
    let mut ds_local;
    let ds = if trainer.cfg.sampling.strategy == SamplingStrategy::Adaptive && ds.error_maps.is_none() {
        ds_local = ds.clone();
        ds_local.error_maps = Some(ds.compute_error_maps(trainer.cfg.e_max_fill, DepthLookup::default()));
        &ds_local
    } else {
        ds
    };
    let cfg = trainer.cfg.clone();
    let has_test = !ds.indices(Split::Test).is_empty();
    let mut logs = match &out.dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let open = |name: &str| -> Result<(BufWriter<std::fs::File>, PathBuf)> {
                let path = dir.join(name);
                let f = std::fs::OpenOptions::new()
                    .create(true)
                    .append(trainer.iter() > 0)
                    .write(true)
                    .truncate(trainer.iter() == 0)
                    .open(&path)
                    .map_err(|e| Error::io(&path, e))?;
                Ok((BufWriter::new(f), path))
            };
            let (mut log, log_path) = open(LOG_FILE)?;
            let header = RunHeader {
                run: &cfg,
                lr_final_ratio: LR_FINAL_RATIO,
                adam: [ADAM_BETA1, ADAM_BETA2, ADAM_EPS],
                start_iter: trainer.iter(),
            };
            ndjson(&mut log, &log_path, &header)?;
            Some((log, log_path, open(EVAL_LOG_FILE)?))
        }
        None => None,
    };
    let mut p = Progress::default();
    let evaluate_now = |trainer: &Trainer, p: &mut Progress| -> Result<EvalPoint> {
        let clock = Instant::now();
        let renderer = FieldRenderer {
            params: &trainer.params,
            sampling: cfg.sampling,
        };
        let report = evaluate(&renderer, ds, Split::Test, None)?;
        p.eval += clock.elapsed();
        Ok(EvalPoint {
            iter: trainer.iter(),
            train_seconds: p.train.as_secs_f64(),
            psnr: report.psnr,
            ssim: report.ssim,
            abs_rel: report.abs_rel,
        })
    };
    while trainer.iter() < cfg.iters {
        let clock = Instant::now();
        let record = trainer.step(ds)?;
        p.train += clock.elapsed();
        p.log.push(record);
        let done = trainer.iter();
        if let Some((log, path, _)) = &mut logs {
            ndjson(log, path, &record)?;
        }
        if cfg.eval_every > 0 && has_test && (done.is_multiple_of(cfg.eval_every) || done == cfg.iters) {
            let point = evaluate_now(trainer, &mut p)?;
            if let Some((_, _, (elog, epath))) = &mut logs {
                ndjson(elog, epath, &point)?;
            }
            p.evals.push(point);
        }
        if let Some(dir) = &out.dir {
            if cfg.checkpoint_every > 0 && done.is_multiple_of(cfg.checkpoint_every) && done < cfg.iters {
                write_model(dir, &trainer.params, &trainer.adam)?;
            }
        }
    }
    if let Some((mut log, path, (mut elog, epath))) = logs {
        log.flush().map_err(|e| Error::io(&path, e))?;
        elog.flush().map_err(|e| Error::io(&epath, e))?;
    }
    if let Some(dir) = &out.dir {
        write_model(dir, &trainer.params, &trainer.adam)?;
    }
    Ok(p)
}
