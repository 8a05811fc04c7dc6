//! Command-line front end: resolved run configuration and subcommands.
//!
//! Settings resolve as built-in defaults, then a flat JSON config file, then
//! command-line flags. Every flag has exactly one config key with the same
//! name (dashes become underscores).

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::dataset::{self, png_io, GenerateOptions, RgbdDataset, SceneSpec, Split};
use crate::field::{load_checkpoint, EncodingConfig, FieldArch};
use crate::geometry::Camera;
use crate::metrics::{self, evaluate, EvalReport, FieldRenderer, ViewRenderer};
use crate::renderer::{render_image, RenderedImage};
use crate::sampling::{SamplingConfig, SamplingStrategy};
use crate::trainer::{self, train, train_resumed, TrainConfig, TrainOutcome, TrainOutput};
use crate::{Error, Result};

/// Fully resolved settings for every subcommand.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    /// Checkpoint for render/eval; defaults to `<out_dir>/model.nrdf`.
    pub checkpoint: Option<PathBuf>,
    pub scene: String,
    pub train_views: usize,
    pub test_views: usize,
    pub res: usize,
    pub fov: f64,
    pub radius: f64,
    pub elevation: f64,
    pub near: f64,
    pub far: f64,
    pub noise_sigma: f64,
    pub strategy: SamplingStrategy,
    pub n_samples: usize,
    pub delta: f64,
    pub sigma: f64,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub k_error: f64,
    pub e_max_fill: f32,
    pub perturb: bool,
    pub lambda_depth: f64,
    pub acc_mask_threshold: f64,
    pub iters: usize,
    pub batch_rays: usize,
    pub lr: f64,
    pub seed: u64,
    pub eval_every: usize,
    pub checkpoint_every: usize,
    pub resume: bool,
    pub workers: usize,
    pub l_pos: usize,
    pub l_dir: usize,
    pub hidden: usize,
    pub layers: usize,
    /// Samples per ray for the global row of `bench`.
    pub baseline_samples: usize,
    /// Depth-loss weight for the global row of `bench`.
    pub baseline_lambda_depth: f64,
    /// Dataset frame to render; ignored when `orbit` > 0.
    pub view: usize,
    /// Render this many poses on the dataset orbit instead of a dataset view.
    pub orbit: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let g = GenerateOptions::default();
        let s = SamplingConfig::default();
        let t = TrainConfig::default();
        let a = FieldArch::default();
        Self {
            data_dir: "data".into(),
            out_dir: "run".into(),
            checkpoint: None,
            scene: "cube".into(),
            train_views: g.n_train,
            test_views: g.n_test,
            res: g.resolution,
            fov: g.fov_deg,
            radius: g.radius,
            elevation: g.elevation_deg,
            near: g.near,
            far: g.far,
            noise_sigma: g.noise_sigma,
            strategy: s.strategy,
            n_samples: s.n_samples,
            delta: s.delta,
            sigma: s.sigma_fixed,
            sigma_min: s.sigma_min,
            sigma_max: s.sigma_max,
            k_error: s.k_error,
            e_max_fill: t.e_max_fill,
            perturb: s.perturb,
            lambda_depth: t.lambda_depth,
            acc_mask_threshold: t.acc_mask_threshold,
            iters: t.iters,
            batch_rays: t.batch_rays,
            lr: t.lr,
            seed: t.seed,
            eval_every: t.eval_every,
            checkpoint_every: t.checkpoint_every,
            resume: false,
            workers: default_workers(),
            l_pos: a.encoding.l_pos,
            l_dir: a.encoding.l_dir,
            hidden: a.hidden(),
            layers: a.trunk.len(),
            baseline_samples: 64,
            baseline_lambda_depth: 0.0,
            view: 0,
            orbit: 0,
        }
    }
}

pub fn default_workers() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

impl RunConfig {
    pub fn generate_options(&self) -> GenerateOptions {
        GenerateOptions {
            n_train: self.train_views,
            n_test: self.test_views,
            radius: self.radius,
            elevation_deg: self.elevation,
            resolution: self.res,
            fov_deg: self.fov,
            near: self.near,
            far: self.far,
            noise_sigma: self.noise_sigma,
            seed: self.seed,
        }
    }

    pub fn sampling(&self) -> SamplingConfig {
        SamplingConfig {
            strategy: self.strategy,
            n_samples: self.n_samples,
            delta: self.delta,
            sigma_fixed: self.sigma,
            sigma_min: self.sigma_min,
            sigma_max: self.sigma_max,
            k_error: self.k_error,
            perturb: self.perturb,
        }
    }

    pub fn arch(&self) -> FieldArch {
        FieldArch {
            encoding: EncodingConfig {
                l_pos: self.l_pos,
                l_dir: self.l_dir,
                include_input: true,
            },
            trunk: vec![self.hidden; self.layers],
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            iters: self.iters,
            batch_rays: self.batch_rays,
            lr: self.lr,
            lambda_depth: self.lambda_depth,
            acc_mask_threshold: self.acc_mask_threshold,
            seed: self.seed,
            eval_every: self.eval_every,
            checkpoint_every: self.checkpoint_every,
            workers: self.workers,
            e_max_fill: self.e_max_fill,
            sampling: self.sampling(),
            arch: self.arch(),
        }
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.checkpoint
            .clone()
            .unwrap_or_else(|| self.out_dir.join(trainer::MODEL_FILE))
    }

    /// Check every key against the invariants of the module that owns it.
    pub fn validate(&self) -> Result<()> {
        let scene = self.scene_spec()?;
        self.generate_options().validate(&scene)?;
        self.train_config().validate()?;
        if self.baseline_samples < 2 {
            return Err(Error::Config("baseline_samples must be >= 2".into()));
        }
        if !(self.baseline_lambda_depth.is_finite() && self.baseline_lambda_depth >= 0.0) {
            return Err(Error::Config("baseline_lambda_depth must be finite and >= 0".into()));
        }
        Ok(())
    }

    /// A preset name or a path to a JSON scene description.
    pub fn scene_spec(&self) -> Result<SceneSpec> {
        let path = Path::new(&self.scene);
        if path.extension().is_some_and(|e| e == "json") {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let scene: SceneSpec =
                serde_json::from_str(&text).map_err(|e| Error::Config(format!("scene {}: {e}", path.display())))?;
            scene.validate()?;
            Ok(scene)
        } else {
            SceneSpec::preset(&self.scene)
        }
    }
}

/// Flag overrides; each maps to the `RunConfig` key of the same name.
#[derive(Debug, Clone, Default, Args, Serialize)]
pub struct Overrides {
    /// Dataset directory [default: data]
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data_dir: Option<PathBuf>,
    /// Output directory for checkpoints, logs, renders and reports [default: run]
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    /// Checkpoint to render or evaluate [default: <out_dir>/model.nrdf]
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    /// Scene preset (empty, cube, spheres, glossy-cube) or scene JSON file [default: cube]
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scene: Option<String>,
    /// Training views on the orbit [default: 8]
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_views: Option<usize>,
    /// Held-out views, offset by half an azimuth step [default: 4]
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_views: Option<usize>,
    /// Image width and height in pixels [default: 100]
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub res: Option<usize>,
    /// Horizontal field of view in degrees [default: 55]
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fov: Option<f64>,
    /// Orbit radius [default: 3]
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub radius: Option<f64>,
    /// Orbit elevation in degrees [default: 30]
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub elevation: Option<f64>,
    /// Near ray bound [default: 0.5]
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub near: Option<f64>,
    /// Far ray bound [default: 6]
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub far: Option<f64>,
    /// Std-dev of Gaussian noise added to generated depth [default: 0]
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub noise_sigma: Option<f64>,
    /// Sampling strategy: global, stratified, gaussian, adaptive [default: gaussian]
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub strategy: Option<SamplingStrategy>,
    /// Samples per ray [default: 16]
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_samples: Option<usize>,
    /// Half-width of the local stratified interval [default: 0.15]
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub delta: Option<f64>,
    /// Std-dev of the Gaussian strategy [default: 0.05]
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sigma: Option<f64>,
    /// Adaptive sigma lower bound [default: 0.01]
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sigma_min: Option<f64>,
    /// Adaptive sigma upper bound [default: 0.5]
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sigma_max: Option<f64>,
    /// Adaptive sigma gain per unit of depth error [default: 1]
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k_error: Option<f64>,
    /// Error assigned to pixels no other view observes [default: 1]
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub e_max_fill: Option<f32>,
    /// Jitter samples during training [default: true]
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub perturb: Option<bool>,
    /// Depth-loss weight [default: 0.1]
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda_depth: Option<f64>,
    /// Minimum opacity for a ray to receive depth loss [default: 0]
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub acc_mask_threshold: Option<f64>,
    /// Training iterations [default: 20000]
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub iters: Option<usize>,
    /// Rays per training step [default: 1024]
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch_rays: Option<usize>,
    /// Initial learning rate, decayed to a tenth over the run [default: 0.0005]
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr: Option<f64>,
    /// Seed for all randomness [default: 0]
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Evaluate held-out views every N iterations, 0 disables [default: 0]
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval_every: Option<usize>,
    /// Checkpoint every N iterations, 0 writes only the final model [default: 0]
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint_every: Option<usize>,
    /// Continue training from the model in out_dir [default: false]
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub resume: Option<bool>,
    /// Worker threads [default: available cores]
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub workers: Option<usize>,
    /// Positional-encoding frequencies for positions [default: 6]
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub l_pos: Option<usize>,
    /// Positional-encoding frequencies for directions [default: 4]
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub l_dir: Option<usize>,
    /// Trunk width [default: 128]
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hidden: Option<usize>,
    /// Trunk depth [default: 4]
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub layers: Option<usize>,
    /// Samples per ray of the global row in bench [default: 64]
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub baseline_samples: Option<usize>,
    /// Depth-loss weight of the global row in bench [default: 0]
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub baseline_lambda_depth: Option<f64>,
    /// Dataset frame to render [default: 0]
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub view: Option<usize>,
    /// Render N evenly spaced orbit poses instead of a dataset frame [default: 0]
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub orbit: Option<usize>,
}

#[derive(Debug, Parser)]
#[command(
    name = "depth-nerf",
    version,
    about = "Train and benchmark radiance fields with depth-guided ray sampling"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Flat JSON file of config keys, applied before flags
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Print the resolved configuration as JSON and exit
    #[arg(long, global = true)]
    pub print_config: bool,
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a procedural RGB-D dataset to data_dir
    Generate(Common),
    /// Train a field on data_dir, writing to out_dir
    Train(Common),
    /// Render color, depth and a depth visualization from a checkpoint
    Render(Common),
    /// Evaluate a checkpoint on the held-out views
    Eval(Common),
    /// Train every sampling strategy with one budget and tabulate the results
    Bench(Common),
}

impl Command {
    pub fn common(&self) -> &Common {
        match self {
            Command::Generate(c) | Command::Train(c) | Command::Render(c) | Command::Eval(c) | Command::Bench(c) => c,
        }
    }
}

/// Defaults, then the config file, then flags.
pub fn resolve(config_file: Option<&Path>, overrides: &Overrides) -> Result<RunConfig> {
    let mut merged = match serde_json::to_value(RunConfig::default()).expect("config serializes") {
        Value::Object(m) => m,
        _ => unreachable!("struct serializes to an object"),
    };
    if let Some(path) = config_file {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: Map<String, Value> = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: expected a flat JSON object: {e}", path.display())))?;
        for (k, v) in file {
            if !merged.contains_key(&k) {
                return Err(Error::Config(format!("{}: unknown key {k:?}", path.display())));
            }
            merged.insert(k, v);
        }
    }
    if let Value::Object(flags) = serde_json::to_value(overrides).expect("overrides serialize") {
        merged.extend(flags);
    }
    let cfg: RunConfig =
        serde_json::from_value(Value::Object(merged)).map_err(|e| Error::Config(format!("config: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn cmd_generate(cfg: &RunConfig) -> Result<RgbdDataset> {
    let ds = dataset::generate_dataset(&cfg.scene_spec()?, &cfg.generate_options(), &cfg.data_dir)?;
    println!(
        "wrote {} frames ({} train, {} test) and {}",
        ds.frames.len(),
        ds.indices(Split::Train).len(),
        ds.indices(Split::Test).len(),
        cfg.data_dir.join(dataset::MANIFEST).display()
    );
    Ok(ds)
}

fn load_for(cfg: &RunConfig, sampling: &SamplingConfig) -> Result<RgbdDataset> {
    let mut ds = dataset::load_dataset(&cfg.data_dir)?;
    if sampling.strategy == SamplingStrategy::Adaptive {
        ds.ensure_error_maps(&cfg.data_dir, cfg.e_max_fill)?;
    }
    Ok(ds)
}

pub fn cmd_train(cfg: &RunConfig) -> Result<TrainOutcome> {
    let tc = cfg.train_config();
    let ds = load_for(cfg, &tc.sampling)?;
    let out = TrainOutput {
        dir: Some(cfg.out_dir.clone()),
    };
    let outcome = if cfg.resume {
        let (params, adam) = trainer::load_training_state(&cfg.out_dir)?;
        train_resumed(&ds, &tc, params, adam, &out)?
    } else {
        train(&ds, &tc, &out)?
    };
    match outcome.log.last() {
        Some(l) => println!(
            "iter {}: loss {:.6} (color {:.6}, depth {:.6}), batch psnr {:.2} dB",
            l.iter + 1,
            l.loss_total,
            l.loss_color,
            l.loss_depth,
            l.psnr_batch
        ),
        None => println!("no iterations run"),
    }
    let t = outcome.timings;
    println!(
        "trained in {:.1} s (sampling {:.1} s, field {:.1} s, composite {:.1} s, optimizer {:.1} s), {} network evaluations",
        outcome.train_seconds, t.sampling_s, t.field_s, t.composite_s, t.optimizer_s, outcome.network_evals
    );
    if let Some(e) = outcome.evals.last() {
        println!(
            "held-out psnr {:.2} dB, ssim {:.4}, abs_rel {:.4}",
            e.psnr, e.ssim, e.abs_rel
        );
    }
    println!("model written to {}", cfg.out_dir.join(trainer::MODEL_FILE).display());
    Ok(outcome)
}

fn write_render(dir: &Path, stem: &str, img: &RenderedImage, near: f64, far: f64) -> Result<()> {
    png_io::write_rgb(&dir.join(format!("{stem}.png")), &img.color)?;
    dataset::pfm::write_depth(&dir.join(format!("{stem}_depth.pfm")), &img.depth)?;
    png_io::write_depth_vis(&dir.join(format!("{stem}_depth.png")), &img.depth, near, far)
}

/// Returns the rendered images in output order.
pub fn cmd_render(cfg: &RunConfig) -> Result<Vec<RenderedImage>> {
    let params = load_checkpoint(&cfg.checkpoint_path())?;
    let sampling = cfg.sampling();
    let dir = cfg.out_dir.join("render");
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut images = Vec::new();
    if cfg.orbit > 0 {
        // novel poses have no sensor depth; local strategies fall back to global
        let cams: Vec<Camera> = dataset::orbit_cameras(cfg.orbit, 0.0, &cfg.generate_options())?;
        for (i, cam) in cams.iter().enumerate() {
            let img = render_image(&params, cam, None, &sampling, cfg.near, cfg.far)?;
            write_render(&dir, &format!("orbit_{i:04}"), &img, cfg.near, cfg.far)?;
            images.push(img);
        }
        println!("rendered {} orbit views to {}", cams.len(), dir.display());
    } else {
        let ds = load_for(cfg, &sampling)?;
        if cfg.view >= ds.frames.len() {
            return Err(Error::Config(format!(
                "view {} out of range ({} frames)",
                cfg.view,
                ds.frames.len()
            )));
        }
        let r = FieldRenderer {
            params: &params,
            sampling,
        };
        let img = r.render_view(&ds, cfg.view)?;
        let m = metrics::evaluate_view(&img, &ds, cfg.view)?;
        write_render(&dir, &format!("view_{:04}", cfg.view), &img, ds.near, ds.far)?;
        println!(
            "view {} ({}): psnr {:.2} dB, ssim {:.4}, abs_rel {:.4}; written to {}",
            cfg.view,
            ds.frames[cfg.view].split,
            m.psnr,
            m.ssim,
            m.abs_rel,
            dir.display()
        );
        images.push(img);
    }
    Ok(images)
}

pub fn cmd_eval(cfg: &RunConfig) -> Result<EvalReport> {
    let params = load_checkpoint(&cfg.checkpoint_path())?;
    let sampling = cfg.sampling();
    let ds = load_for(cfg, &sampling)?;
    let dir = cfg.out_dir.join("eval");
    let report = evaluate(
        &FieldRenderer {
            params: &params,
            sampling,
        },
        &ds,
        Split::Test,
        Some(&dir),
    )?;
    report.write(&cfg.out_dir, "eval")?;
    println!(
        "{} views: psnr {:.2} dB, ssim {:.4}, abs_rel {:.4}, lpips n/a ({:.1} s)",
        report.views.len(),
        report.psnr,
        report.ssim,
        report.abs_rel,
        report.wall_seconds
    );
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub strategy: String,
    pub n_samples: usize,
    pub lambda_depth: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub abs_rel: f64,
    pub wall_time: f64,
    pub network_evals: u64,
    pub error: Option<String>,
}

pub const BENCH_HEADER: &str = "strategy,psnr,ssim,abs_rel,wall_time,network_evals";

impl BenchRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{:.6},{:.6},{:.6},{:.3},{}",
            self.strategy, self.psnr, self.ssim, self.abs_rel, self.wall_time, self.network_evals
        )
    }
}

/// Row order of the strategy benchmark.
pub const BENCH_ORDER: [SamplingStrategy; 4] = [
    SamplingStrategy::StratifiedLocal,
    SamplingStrategy::Gaussian,
    SamplingStrategy::Adaptive,
    SamplingStrategy::GlobalStratified,
];

/// Training config for one benchmark row; the global row uses the baseline
/// sample count and depth weight.
pub fn bench_config(cfg: &RunConfig, strategy: SamplingStrategy) -> TrainConfig {
    let mut tc = cfg.train_config();
    tc.sampling.strategy = strategy;
    tc.eval_every = 0;
    tc.checkpoint_every = 0;
    if strategy == SamplingStrategy::GlobalStratified {
        tc.sampling.n_samples = cfg.baseline_samples;
        tc.lambda_depth = cfg.baseline_lambda_depth;
    }
    tc
}

fn bench_row(ds: &RgbdDataset, cfg: &RunConfig, strategy: SamplingStrategy) -> Result<BenchRow> {
    let tc = bench_config(cfg, strategy);
    let out = TrainOutput {
        dir: Some(cfg.out_dir.join(format!("bench_{}", strategy.name()))),
    };
    let run = train(ds, &tc, &out)?;
    let report = evaluate(
        &FieldRenderer {
            params: &run.params,
            sampling: tc.sampling,
        },
        ds,
        Split::Test,
        None,
    )?;
    Ok(BenchRow {
        strategy: strategy.name().into(),
        n_samples: tc.sampling.n_samples,
        lambda_depth: tc.lambda_depth,
        psnr: report.psnr,
        ssim: report.ssim,
        abs_rel: report.abs_rel,
        wall_time: run.train_seconds,
        network_evals: run.network_evals,
        error: None,
    })
}

/// Train all four strategies with the same seed, iterations and batch size.
/// Failed rows are kept with their error and NaN metrics.
pub fn cmd_bench(cfg: &RunConfig) -> Result<Vec<BenchRow>> {
    let mut ds = dataset::load_dataset(&cfg.data_dir)?;
    ds.ensure_error_maps(&cfg.data_dir, cfg.e_max_fill)?;
    let mut rows = Vec::new();
    for s in BENCH_ORDER {
        let row = bench_row(&ds, cfg, s).unwrap_or_else(|e| {
            eprintln!("bench row {s} failed: {e}");
            BenchRow {
                strategy: s.name().into(),
                n_samples: bench_config(cfg, s).sampling.n_samples,
                lambda_depth: bench_config(cfg, s).lambda_depth,
                psnr: f64::NAN,
                ssim: f64::NAN,
                abs_rel: f64::NAN,
                wall_time: f64::NAN,
                network_evals: 0,
                error: Some(e.to_string()),
            }
        });
        println!("{}", row.csv_line());
        rows.push(row);
    }
    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
    let path = cfg.out_dir.join("bench.csv");
    let mut csv = format!("{BENCH_HEADER}\n");
    for r in &rows {
        csv += &r.csv_line();
        csv.push('\n');
    }
    std::fs::write(&path, csv).map_err(|e| Error::io(&path, e))?;
    let json = cfg.out_dir.join("bench.json");
    let text = serde_json::to_string_pretty(&rows).expect("rows serialize");
    std::fs::write(&json, text + "\n").map_err(|e| Error::io(&json, e))?;
    let failed = rows.iter().filter(|r| r.error.is_some()).count();
    if failed > 0 {
        return Err(Error::Domain(format!("{failed} of {} bench rows failed", rows.len())));
    }
    Ok(rows)
}
