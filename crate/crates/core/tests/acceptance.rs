//! Acceptance suite: one PASS/FAIL line per criterion and a summary line.
//! Failures only change the exit status with `ACCEPTANCE_STRICT=1`, so the
//! rest of `cargo test` still runs. Pass criterion numbers as arguments to run
//! a subset.

mod common;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use depth_nerf::cli::default_workers;
use depth_nerf::dataset::{generate_dataset, load_dataset, synthesize, GenerateOptions, RgbdDataset, SceneSpec, Split};
use depth_nerf::field::{checkpoint_from_bytes, write_checkpoint, FieldArch};
use depth_nerf::metrics::{abs_rel, evaluate, psnr, psnr_from_mse, ssim, EvalReport, FieldRenderer};
use depth_nerf::raster::{DepthMap, RgbImage};
use depth_nerf::renderer::composite;
use depth_nerf::sampling::{sample_gaussian, sample_ray, sigma_from_error, SamplingConfig, SamplingStrategy};
use depth_nerf::seed::rng_for;
use depth_nerf::trainer::{
    load_adam, sample_batch, sample_ray_batch, save_adam, train, TrainConfig, TrainOutcome, TrainOutput, Trainer,
};
use rand::Rng;

type Check = Result<String, String>;

fn require(ok: bool, detail: String) -> Check {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn scratch(name: &str) -> PathBuf {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance").join(name);
    let _ = std::fs::remove_dir_all(&dir);
    dir
}

fn gradient_correctness() -> Check {
    let e2e = common::end_to_end_gradient_error();
    let (field_bad, field_n) = common::field_gradient_failures();
    let (comp_bad, comp_n) = common::composite_gradient_failures();
    require(
        e2e < 1e-3 && field_bad == 0 && comp_bad == 0,
        format!(
            "end-to-end max rel err {e2e:.2e} (< 1e-3); field {field_bad}/{field_n} and composite \
             {comp_bad}/{comp_n} params outside 1e-4"
        ),
    )
}

fn compositing_invariants() -> Check {
    let mut rng = rng_for(2, &[]);
    let mut worst_sum = 0.0f64;
    let mut violations = 0;
    for _ in 0..10_000 {
        let n = rng.gen_range(1..32);
        let mut t: Vec<f64> = (0..n).map(|_| rng.gen_range(0.5..6.0)).collect();
        t.sort_by(f64::total_cmp);
        let sigma: Vec<f64> = (0..n)
            .map(|_| {
                if rng.gen_bool(0.2) {
                    0.0
                } else {
                    rng.gen_range(0.0..100.0)
                }
            })
            .collect();
        let rgb: Vec<f64> = (0..3 * n).map(|_| rng.gen()).collect();
        let r = composite(&t, &sigma, &rgb, 6.0).map_err(err)?;
        let mut trans = r.transmittance.clone();
        trans.push(r.t_final);
        let monotone = trans.windows(2).all(|w| w[1] <= w[0]) && trans.iter().all(|v| (0.0..=1.0).contains(v));
        let sum = r.weights.iter().sum::<f64>() + r.t_final;
        worst_sum = worst_sum.max((sum - 1.0).abs());
        let depth_ok = r.acc <= 1e-6 || (r.depth >= t[0] && r.depth <= t[n - 1]);
        violations += usize::from(!(monotone && depth_ok));
    }
    let ln2 = 2f64.ln();
    let r = composite(&[1.0, 2.0], &[ln2, ln2], &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0], 3.0).map_err(err)?;
    let fixture = (r.color[0] - 0.5).abs() < 1e-6
        && (r.color[1] - 0.25).abs() < 1e-6
        && r.color[2].abs() < 1e-6
        && (r.depth - 4.0 / 3.0).abs() < 1e-6;
    require(
        violations == 0 && worst_sum <= 1e-5 && fixture,
        format!(
            "10^4 rays: {violations} monotonicity/depth violations, max |Σw + T - 1| = {worst_sum:.1e}; \
             two-sample fixture color {:?} depth {:.6}",
            r.color, r.depth
        ),
    )
}

fn sampling_properties() -> Check {
    let mut rng = rng_for(3, &[]);
    let strategies = [
        SamplingStrategy::GlobalStratified,
        SamplingStrategy::StratifiedLocal,
        SamplingStrategy::Gaussian,
        SamplingStrategy::Adaptive,
    ];
    let ds = common::small_cube(16, 2, 0);
    let cam = ds.frames[0].camera;
    let mut bad = 0;
    for case in 0..10_000 {
        let strategy = strategies[case % 4];
        let near = rng.gen_range(0.01..2.0);
        let far = near + rng.gen_range(0.01..6.0);
        let ray = cam
            .generate_ray(rng.gen_range(0.0..16.0), rng.gen_range(0.0..16.0), near, far)
            .map_err(err)?;
        let depth = match rng.gen_range(0..4) {
            0 => None,
            1 => Some(rng.gen_range(-1.0..10.0)),
            _ => Some(rng.gen_range(near..far)),
        };
        let cfg = SamplingConfig {
            strategy,
            n_samples: rng.gen_range(2..64),
            delta: rng.gen_range(0.001..2.0),
            sigma_fixed: rng.gen_range(0.0..1.0),
            perturb: rng.gen_bool(0.8),
            ..SamplingConfig::default()
        };
        let s = sample_ray(&ray, depth, Some(rng.gen_range(0.0..2.0)), &cfg, &mut rng);
        bad += usize::from(s.len() != cfg.n_samples || !s.is_sorted_within(ray.t_near, ray.t_far));
    }
    let (mu, sd, n) = (3.0, 0.05, 100_000);
    let draws = sample_gaussian(mu, sd, n, 0.0, 100.0, true, &mut rng).t;
    let mean = draws.iter().sum::<f64>() / n as f64;
    let std = (draws.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
    let moments = (mean - mu).abs() <= 0.02 * mu && (std - sd).abs() <= 0.02 * sd;
    let cfg = SamplingConfig::default();
    let grid: Vec<f64> = (0..=1000).map(|i| sigma_from_error(i as f64 * 1e-3, &cfg)).collect();
    let monotone = grid.windows(2).all(|w| w[0] <= w[1]);
    let clean = common::small_cube(100, 8, 0);
    let (e_mean, e_n) = common::covisible_error(&clean, &SceneSpec::cube());
    require(
        bad == 0 && moments && monotone && e_mean <= 1e-3,
        format!(
            "{bad}/10^4 unsorted or out of bounds; gaussian mean {mean:.5} (target {mu}) std {std:.5} \
             (target {sd}); sigma_from_error monotone: {monotone}; clean error-map mean {e_mean:.2e} over \
             {e_n} co-visible pixels"
        ),
    )
}

fn cube_dataset(n_train: usize, n_test: usize) -> Result<RgbdDataset, String> {
    let opts = GenerateOptions {
        n_train,
        n_test,
        resolution: 100,
        ..GenerateOptions::default()
    };
    synthesize(&SceneSpec::cube(), &opts).map_err(err)
}

fn run_config(strategy: SamplingStrategy, n_samples: usize, iters: usize) -> TrainConfig {
    TrainConfig {
        iters,
        workers: default_workers(),
        sampling: SamplingConfig {
            strategy,
            n_samples,
            ..SamplingConfig::default()
        },
        ..TrainConfig::default()
    }
}

fn held_out(ds: &RgbdDataset, run: &TrainOutcome, cfg: &TrainConfig, dir: Option<&Path>) -> Result<EvalReport, String> {
    let renderer = FieldRenderer {
        params: &run.params,
        sampling: cfg.sampling,
    };
    evaluate(&renderer, ds, Split::Test, dir).map_err(err)
}

fn desk_scale_quality() -> Check {
    let ds = cube_dataset(8, 4)?;
    let cfg = run_config(SamplingStrategy::Gaussian, 16, 20_000);
    let dir = scratch("quality");
    let start = Instant::now();
    let run = train(&ds, &cfg, &TrainOutput { dir: Some(dir.clone()) }).map_err(err)?;
    let report = held_out(&ds, &run, &cfg, Some(&dir.join("eval")))?;
    let minutes = start.elapsed().as_secs_f64() / 60.0;
    report.write(&dir, "eval").map_err(err)?;
    require(
        report.psnr >= 25.0 && report.ssim >= 0.85 && report.abs_rel <= 0.05 && minutes <= 30.0,
        format!(
            "held-out psnr {:.2} dB (>= 25), ssim {:.4} (>= 0.85), abs_rel {:.4} (<= 0.05), \
             {minutes:.1} min train+eval on {} worker(s) (<= 30)",
            report.psnr, report.ssim, report.abs_rel, cfg.workers
        ),
    )
}

/// Shared iteration and batch budget for the strategy comparison.
const COMPARE_ITERS: usize = 1500;
const COMPARE_BATCH: usize = 512;

fn strategy_comparison() -> Check {
    let mut ds = cube_dataset(8, 4)?;
    ds.error_maps = Some(ds.compute_error_maps(1.0, Default::default()));
    let mut notes = Vec::new();
    let mut ok = true;

    // (a) network evaluations per ray for one step of each strategy
    let per_ray = |strategy, n| -> Result<u64, String> {
        let mut cfg = run_config(strategy, n, 1);
        cfg.batch_rays = COMPARE_BATCH;
        let mut t = Trainer::new(cfg).map_err(err)?;
        t.step(&ds).map_err(err)?;
        Ok(t.network_evals)
    };
    let dense = per_ray(SamplingStrategy::GlobalStratified, 256)?;
    for s in [
        SamplingStrategy::StratifiedLocal,
        SamplingStrategy::Gaussian,
        SamplingStrategy::Adaptive,
    ] {
        let evals = per_ray(s, 16)?;
        ok &= dense == 16 * evals;
        notes.push(format!("(a) {s}: {dense}/{evals} evals"));
    }

    // (b), (c) equal iteration and batch budgets
    let budget = |strategy, n, lambda_depth, eval_every| {
        let mut cfg = run_config(strategy, n, COMPARE_ITERS);
        cfg.batch_rays = COMPARE_BATCH;
        cfg.lambda_depth = lambda_depth;
        cfg.eval_every = eval_every;
        cfg
    };
    let global_cfg = budget(SamplingStrategy::GlobalStratified, 64, 0.0, 0);
    let global = train(&ds, &global_cfg, &TrainOutput::default()).map_err(err)?;
    let global_eval = held_out(&ds, &global, &global_cfg, None)?;
    notes.push(format!(
        "global 64 (lambda 0): psnr {:.2} abs_rel {:.4} in {:.0} s",
        global_eval.psnr, global_eval.abs_rel, global.train_seconds
    ));

    for s in [
        SamplingStrategy::Gaussian,
        SamplingStrategy::StratifiedLocal,
        SamplingStrategy::Adaptive,
    ] {
        let cfg = budget(s, 16, 0.1, COMPARE_ITERS / 30);
        let run = train(&ds, &cfg, &TrainOutput::default()).map_err(err)?;
        let last = run.evals.last().ok_or("no eval points")?;
        let ratio = global_eval.abs_rel / last.abs_rel;
        ok &= ratio >= 5.0;
        let mut line = format!(
            "{s}: psnr {:.2} abs_rel {:.4} ({ratio:.1}x lower) in {:.0} s",
            last.psnr, last.abs_rel, run.train_seconds
        );
        if s == SamplingStrategy::Gaussian {
            match run.evals.iter().find(|e| e.psnr >= global_eval.psnr) {
                Some(e) => {
                    let speedup = global.train_seconds / e.train_seconds;
                    ok &= speedup >= 2.0;
                    line += &format!(
                        ", reached global psnr at iter {} after {:.0} s ({speedup:.1}x)",
                        e.iter, e.train_seconds
                    );
                }
                None => {
                    ok = false;
                    line += ", never reached global psnr";
                }
            }
        }
        notes.push(line);
    }
    require(ok, notes.join("; "))
}

fn metrics_conformance() -> Check {
    let (w, h) = (32, 32);
    let gt = RgbImage::from_vec(
        w,
        h,
        (0..w * h * 3)
            .map(|i| {
                let (p, c) = (i / 3, i % 3);
                let (x, y) = (p % w, p / w);
                0.1 + 0.8 * ((x / 4 + y / 4) % 2) as f32 + 0.03 * c as f32
            })
            .collect(),
    )
    .map_err(err)?;
    let inv = RgbImage::from_vec(w, h, gt.data.iter().map(|v| 1.0 - v).collect()).map_err(err)?;
    let wave = RgbImage::from_vec(
        w,
        h,
        (0..w * h * 3)
            .map(|i| {
                let (p, c) = (i / 3, i % 3);
                let (x, y) = ((p % w) as f32, (p / w) as f32);
                0.5 + 0.4 * (0.3 * x + 0.2 * y + c as f32).sin()
            })
            .collect(),
    )
    .map_err(err)?;
    // reference values: Gaussian-window SSIM (sigma 1.5, 11x11, data range 1)
    let s_inv = ssim(&inv, &gt).map_err(err)?;
    let s_wave = ssim(&wave, &gt).map_err(err)?;
    let s_self = ssim(&gt, &gt).map_err(err)?;
    let shifted = RgbImage::from_vec(w, h, gt.data.iter().map(|v| v + 0.1).collect()).map_err(err)?;
    let p = psnr(&shifted, &gt).map_err(err)?;
    let mut d_gt = DepthMap::new(8, 8);
    let mut d_pred = DepthMap::new(8, 8);
    for y in 0..8 {
        for x in 0..8 {
            d_gt.set(x, y, 1.0 + (x + y) as f32 * 0.25);
            d_pred.set(x, y, 1.1 * (1.0 + (x + y) as f32 * 0.25));
        }
    }
    let a = abs_rel(&d_pred, &d_gt).map_err(err)?;
    let ok = (p - 20.0).abs() < 1e-4
        && (psnr_from_mse(0.01) - 20.0).abs() < 1e-12
        && (s_self - 1.0).abs() < 1e-9
        && (a - 0.1).abs() < 1e-6
        && (s_inv + 0.922_942_929_235_301_1).abs() < 1e-4
        && (s_wave - 0.006_906_771_136_722_473_5).abs() < 1e-4;
    require(
        ok,
        format!(
            "psnr {p:.4} dB at mse 0.01; ssim self {s_self:.6}, inverted {s_inv:.6} (ref -0.922943), \
             wave {s_wave:.6} (ref 0.006907); abs_rel {a:.6}"
        ),
    )
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<_> = std::fs::read_dir(dir)
        .into_iter()
        .flatten()
        .flatten()
        .map(|e| {
            (
                e.file_name().to_string_lossy().into_owned(),
                std::fs::read(e.path()).unwrap_or_default(),
            )
        })
        .collect();
    out.sort();
    out
}

fn determinism_and_persistence() -> Check {
    let mut notes = Vec::new();
    let mut ok = true;

    let opts = GenerateOptions {
        n_train: 3,
        n_test: 2,
        resolution: 24,
        noise_sigma: 0.01,
        seed: 7,
        ..GenerateOptions::default()
    };
    let (a, b) = (scratch("gen_a"), scratch("gen_b"));
    let ds = generate_dataset(&SceneSpec::cube(), &opts, &a).map_err(err)?;
    generate_dataset(&SceneSpec::cube(), &opts, &b).map_err(err)?;
    let same = files(&a) == files(&b) && !files(&a).is_empty();
    ok &= same;
    notes.push(format!("generate identical: {same}"));

    let loaded = load_dataset(&a).map_err(err)?;
    let mut depth_exact = true;
    let mut color_err = 0.0f32;
    for (x, y) in ds.frames.iter().zip(&loaded.frames) {
        depth_exact &= x
            .depth
            .data
            .iter()
            .zip(&y.depth.data)
            .all(|(p, q)| p.to_bits() == q.to_bits());
        depth_exact &= x.camera == y.camera && x.split == y.split;
        for (p, q) in x.color.data.iter().zip(&y.color.data) {
            color_err = color_err.max((p - q).abs());
        }
    }
    let color_ok = color_err <= 1.0 / 510.0 + 1e-7;
    ok &= depth_exact && color_ok;
    notes.push(format!(
        "dataset roundtrip depth/cameras exact: {depth_exact}, color max err {color_err:.5}"
    ));

    let cfg = TrainConfig {
        iters: 30,
        batch_rays: 64,
        seed: 5,
        workers: 1,
        arch: FieldArch {
            trunk: vec![16, 16],
            ..FieldArch::default()
        },
        ..TrainConfig::default()
    };
    let r1 = train(&ds, &cfg, &TrainOutput::default()).map_err(err)?;
    let r2 = train(&ds, &cfg, &TrainOutput::default()).map_err(err)?;
    let bits = |r: &TrainOutcome| r.params.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    let losses = |r: &TrainOutcome| r.log.iter().map(|l| l.loss_total.to_bits()).collect::<Vec<_>>();
    let train_same = bits(&r1) == bits(&r2) && losses(&r1) == losses(&r2);
    ok &= train_same;
    notes.push(format!("train identical: {train_same}"));

    let e1 = held_out(&ds, &r1, &cfg, None)?;
    let e2 = held_out(&ds, &r2, &cfg, None)?;
    let eval_same = e1.to_csv() == e2.to_csv();
    ok &= eval_same;
    notes.push(format!("eval identical: {eval_same}"));

    let mut bytes = Vec::new();
    write_checkpoint(&r1.params, &mut bytes).map_err(err)?;
    let back = checkpoint_from_bytes(&bytes).map_err(err)?;
    let ckpt =
        bits(&r1) == back.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>() && back.arch() == r1.params.arch();
    let adam_path = scratch("adam").with_extension("adam");
    save_adam(&r1.adam, &adam_path).map_err(err)?;
    let adam = load_adam(&adam_path).map_err(err)? == r1.adam;
    ok &= ckpt && adam;
    notes.push(format!("checkpoint roundtrip exact: {ckpt}, optimizer state: {adam}"));

    let batch = sample_ray_batch(&ds, 32, 9, 4).map_err(err)?;
    let s1 = sample_batch(&batch, &cfg.sampling, 9, 4);
    let s2 = sample_batch(&sample_ray_batch(&ds, 32, 9, 4).map_err(err)?, &cfg.sampling, 9, 4);
    let samples_same = s1 == s2;
    ok &= samples_same;
    notes.push(format!("sample sets identical: {samples_same}"));
    require(ok, notes.join("; "))
}

fn main() -> ExitCode {
    type Criterion = (&'static str, fn() -> Check);
    let criteria: [Criterion; 7] = [
        ("gradient correctness", gradient_correctness),
        ("compositing invariants", compositing_invariants),
        ("sampling properties", sampling_properties),
        ("desk-scale quality", desk_scale_quality),
        ("strategy comparison", strategy_comparison),
        ("metrics conformance", metrics_conformance),
        ("determinism and persistence", determinism_and_persistence),
    ];
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let (mut ran, mut failed) = (0, 0);
    for (i, (name, check)) in criteria.iter().enumerate() {
        let id = i + 1;
        if !selected.is_empty() && !selected.contains(&id) {
            continue;
        }
        ran += 1;
        let start = Instant::now();
        let result = check();
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("PASS {id} {name}: {detail} [{secs:.1} s]"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {id} {name}: {detail} [{secs:.1} s]");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", ran - failed);
    let strict = std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    if failed > 0 && strict {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
