#![allow(dead_code)]

use depth_nerf::dataset::{intersect_scene, synthesize, GenerateOptions, RgbdDataset, SceneSpec, Split};
use depth_nerf::field::{field_backward, field_forward, EncodingConfig, FieldArch, FieldParams, ParamGradients};
use depth_nerf::geometry::{Camera, Projection, Vec3};
use depth_nerf::renderer::{composite, composite_backward, RenderCotangent};
use depth_nerf::sampling::{SamplingConfig, SamplingStrategy};
use depth_nerf::seed::rng_for;
use depth_nerf::trainer::{compute_gradients, sample_batch, sample_ray_batch, Objective, Shard};
use rand::Rng;

pub fn tiny_arch() -> FieldArch {
    FieldArch {
        encoding: EncodingConfig {
            l_pos: 2,
            l_dir: 1,
            include_input: true,
        },
        trunk: vec![8, 8],
    }
}

pub fn small_cube(res: usize, n_train: usize, n_test: usize) -> RgbdDataset {
    let opts = GenerateOptions {
        n_train,
        n_test,
        resolution: res,
        ..Default::default()
    };
    synthesize(&SceneSpec::cube(), &opts).unwrap()
}

/// Worst relative error between the analytic gradient of the full training
/// loss and central differences, over every parameter of a tiny field on a
/// 2-ray, 4-sample batch.
pub fn end_to_end_gradient_error() -> f64 {
    let ds = small_cube(16, 4, 0);
    let cfg = SamplingConfig {
        strategy: SamplingStrategy::Gaussian,
        n_samples: 4,
        sigma_fixed: 0.3,
        ..SamplingConfig::default()
    };
    // rays that hit the cube so the depth term is active
    let batch: Vec<_> = sample_ray_batch(&ds, 64, 5, 0)
        .unwrap()
        .into_iter()
        .filter(|r| r.valid)
        .take(2)
        .collect();
    assert_eq!(batch.len(), 2);
    let samples = sample_batch(&batch, &cfg, 5, 0);
    let obj = Objective {
        lambda_depth: 0.1,
        acc_mask_threshold: 0.0,
    };
    let mut params = FieldParams::<f64>::init(tiny_arch(), 11).unwrap();
    // nonzero biases so no unit sits exactly on a ReLU kink
    let n = params.len();
    for (i, p) in params.data_mut().iter_mut().enumerate() {
        *p += 0.05 * ((i as f64 * 0.7).sin());
    }
    let mut shards = vec![Shard::default()];
    let mut grads = ParamGradients::zeros_like(&params);
    compute_gradients(&params, &batch, &samples, obj, &mut shards, &mut grads).unwrap();
    let mut loss_at = |p: &FieldParams<f64>| {
        let mut g = ParamGradients::zeros_like(p);
        compute_gradients(p, &batch, &samples, obj, &mut shards, &mut g)
            .unwrap()
            .total
    };
    let h = 1e-6;
    let mut worst = 0.0f64;
    for i in 0..n {
        let mut plus = params.clone();
        plus.data_mut()[i] += h;
        let mut minus = params.clone();
        minus.data_mut()[i] -= h;
        let numeric = (loss_at(&plus) - loss_at(&minus)) / (2.0 * h);
        let analytic = grads.data[i];
        let scale = analytic.abs().max(numeric.abs());
        if scale > 1e-7 {
            worst = worst.max((analytic - numeric).abs() / scale);
        }
    }
    worst
}

/// Mean multiview error over pixels whose surface point is unoccluded in
/// every training view it projects into. Visibility comes from ray tracing
/// the scene, independently of the depth maps.
pub fn covisible_error(ds: &RgbdDataset, scene: &SceneSpec) -> (f64, usize) {
    let maps = ds.compute_error_maps(1.0, Default::default());
    let train = ds.indices(Split::Train);
    let visible_from = |cam: &Camera, p: &depth_nerf::geometry::Vec3| -> Option<bool> {
        match cam.project(p) {
            Projection::Visible { u, v, .. } => {
                let ray = cam.generate_ray(u, v, ds.near, ds.far).ok()?;
                let hit = intersect_scene(&ray, scene)?;
                Some((hit.point - p).norm() < 1e-4)
            }
            _ => None,
        }
    };
    let (mut sum, mut n) = (0.0, 0usize);
    for &i in &train {
        let f = &ds.frames[i];
        for y in 0..f.depth.height {
            for x in 0..f.depth.width {
                let d = f64::from(f.depth.get(x, y));
                if d <= 0.0 {
                    continue;
                }
                let p = f.camera.backproject(x as f64 + 0.5, y as f64 + 0.5, d).unwrap();
                let vis: Vec<bool> = train
                    .iter()
                    .filter(|&&j| j != i)
                    .filter_map(|&j| visible_from(&ds.frames[j].camera, &p))
                    .collect();
                if !vis.is_empty() && vis.iter().all(|&v| v) {
                    sum += f64::from(maps[i].get(x, y));
                    n += 1;
                }
            }
        }
    }
    (sum / n.max(1) as f64, n)
}

fn within(analytic: f64, numeric: f64, rel: f64, abs: f64) -> bool {
    let err = (analytic - numeric).abs();
    err <= abs || err <= rel * analytic.abs().max(numeric.abs())
}

/// Fraction of field parameters whose analytic gradient misses central
/// differences by more than 1e-4 relative, over a few random instances.
pub fn field_gradient_failures() -> (usize, usize) {
    let h = 1e-4;
    let (mut bad, mut total) = (0, 0);
    for trial in 0..3u64 {
        let mut rng = rng_for(trial, &[41]);
        let mut p = FieldParams::<f64>::init(tiny_arch(), 100 + trial).unwrap();
        for v in p.data_mut() {
            *v += rng.gen_range(-0.1..0.1);
        }
        let pos: Vec<[f64; 3]> = (0..6).map(|_| [0; 3].map(|_| rng.gen_range(-1.0..1.0))).collect();
        let dirs: Vec<[f64; 3]> = (0..6)
            .map(|_| {
                let d = Vec3::from([0; 3].map(|_| rng.gen_range(-1.0..1.0))).normalize();
                [d.x, d.y, d.z]
            })
            .collect();
        let wd: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let wc: Vec<f64> = (0..18).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let objective = |p: &FieldParams<f64>| {
            let (out, _) = field_forward(p, &pos, &dirs).unwrap();
            out.density.iter().zip(&wd).map(|(a, b)| a * b).sum::<f64>()
                + out.rgb.iter().zip(&wc).map(|(a, b)| a * b).sum::<f64>()
        };
        let (_, mut cache) = field_forward(&p, &pos, &dirs).unwrap();
        let g = field_backward(&p, &mut cache, &wd, &wc).unwrap();
        for i in 0..p.len() {
            let orig = p.data()[i];
            p.data_mut()[i] = orig + h;
            let up = objective(&p);
            p.data_mut()[i] = orig - h;
            let down = objective(&p);
            p.data_mut()[i] = orig;
            total += 1;
            if !within(g.data[i], (up - down) / (2.0 * h), 1e-4, 1e-7) {
                bad += 1;
            }
        }
    }
    (bad, total)
}

/// Same check for compositing w.r.t. per-sample density and color.
pub fn composite_gradient_failures() -> (usize, usize) {
    let mut rng = rng_for(9, &[42]);
    let h = 1e-6;
    let (mut bad, mut total) = (0, 0);
    for _ in 0..50 {
        let mut t: Vec<f64> = (0..8).map(|_| rng.gen_range(0.5..6.0)).collect();
        t.sort_by(f64::total_cmp);
        let mut sigma: Vec<f64> = (0..8).map(|_| rng.gen_range(0.0..3.0)).collect();
        let mut rgb: Vec<f64> = (0..24).map(|_| rng.gen_range(0.0..1.0)).collect();
        let cot = RenderCotangent {
            color: [0; 3].map(|_| rng.gen_range(-1.0..1.0)),
            depth: rng.gen_range(-1.0..1.0),
            acc: rng.gen_range(-1.0..1.0),
        };
        let objective = |sigma: &[f64], rgb: &[f64]| {
            let r = composite(&t, sigma, rgb, 6.0).unwrap();
            (0..3).map(|c| cot.color[c] * r.color[c]).sum::<f64>() + cot.depth * r.depth + cot.acc * r.acc
        };
        let fwd = composite(&t, &sigma, &rgb, 6.0).unwrap();
        let (dd, dc) = composite_backward(&t, &sigma, &rgb, 6.0, &fwd, &cot).unwrap();
        for i in 0..8 {
            let s0 = sigma[i];
            sigma[i] = s0 + h;
            let up = objective(&sigma, &rgb);
            sigma[i] = s0 - h;
            let down = objective(&sigma, &rgb);
            sigma[i] = s0;
            total += 1;
            bad += usize::from(!within(dd[i], (up - down) / (2.0 * h), 1e-4, 1e-8));
        }
        for i in 0..24 {
            let c0 = rgb[i];
            rgb[i] = c0 + h;
            let up = objective(&sigma, &rgb);
            rgb[i] = c0 - h;
            let down = objective(&sigma, &rgb);
            rgb[i] = c0;
            total += 1;
            bad += usize::from(!within(dc[i], (up - down) / (2.0 * h), 1e-4, 1e-8));
        }
    }
    (bad, total)
}
