//! Image and depth quality metrics, and held-out view evaluation.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::dataset::{png_io, RgbdDataset, Split};
use crate::field::FieldParams;
use crate::raster::{is_valid_depth, DepthMap, RgbImage};
use crate::renderer::{render_image, DepthSource, RenderedImage};
use crate::sampling::SamplingConfig;
use crate::{Error, Result};

pub const PSNR_CAP: f64 = 99.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn same_dims(a: (usize, usize), b: (usize, usize), what: &str) -> Result<()> {
    if a != b {
        return Err(Error::Shape(format!("{what}: {}x{} vs {}x{}", a.0, a.1, b.0, b.1)));
    }
    Ok(())
}

/// `10 log10(1 / MSE)` over all pixels and channels, capped at 99 dB.
pub fn psnr(pred: &RgbImage, gt: &RgbImage) -> Result<f64> {
    same_dims((pred.width, pred.height), (gt.width, gt.height), "psnr")?;
    Ok(psnr_from_mse(mse(&pred.data, &gt.data)))
}

pub fn mse(a: &[f32], b: &[f32]) -> f64 {
    let sum: f64 = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = f64::from(x) - f64::from(y);
            d * d
        })
        .sum();
    sum / a.len().max(1) as f64
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        return PSNR_CAP;
    }
    (-10.0 * mse.log10()).min(PSNR_CAP)
}

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let r = (SSIM_WINDOW / 2) as f64;
    let mut k = [0.0; SSIM_WINDOW];
    for (i, v) in k.iter_mut().enumerate() {
        let x = i as f64 - r;
        *v = (-0.5 * x * x / (SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.map(|v| v / s)
}

/// Separable Gaussian filter keeping only fully-covered window positions.
fn filter_valid(img: &[f64], w: usize, h: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (ow, oh) = (w + 1 - SSIM_WINDOW, h + 1 - SSIM_WINDOW);
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..SSIM_WINDOW).map(|i| k[i] * img[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..SSIM_WINDOW).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean SSIM of one channel.
pub fn ssim_channel(a: &[f64], b: &[f64], w: usize, h: usize) -> Result<f64> {
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::Shape(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {w}x{h}"
        )));
    }
    if a.len() != w * h || b.len() != w * h {
        return Err(Error::Shape("ssim channel length does not match dimensions".into()));
    }
    let k = gaussian_kernel();
    let prod = |f: fn(f64, f64) -> f64| a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect::<Vec<_>>();
    let mu_a = filter_valid(a, w, h, &k);
    let mu_b = filter_valid(b, w, h, &k);
    let aa = filter_valid(&prod(|x, _| x * x), w, h, &k);
    let bb = filter_valid(&prod(|_, y| y * y), w, h, &k);
    let ab = filter_valid(&prod(|x, y| x * y), w, h, &k);
    let n = mu_a.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = aa[i] - ma * ma;
            let vb = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2)) / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2))
        })
        .sum();
    Ok(total / n as f64)
}

/// Single-scale SSIM (11x11 Gaussian window, sigma 1.5, data range 1),
/// averaged over channels.
pub fn ssim(pred: &RgbImage, gt: &RgbImage) -> Result<f64> {
    same_dims((pred.width, pred.height), (gt.width, gt.height), "ssim")?;
    let mut sum = 0.0;
    for c in 0..3 {
        sum += ssim_channel(&pred.channel(c), &gt.channel(c), pred.width, pred.height)?;
    }
    Ok(sum / 3.0)
}

/// Mean `|pred - gt| / gt` over pixels with valid ground-truth depth.
pub fn abs_rel(pred: &DepthMap, gt: &DepthMap) -> Result<f64> {
    let (sum, n) = abs_rel_parts(pred, gt)?;
    if n == 0 {
        return Err(Error::Domain("abs_rel: ground truth has no valid depth".into()));
    }
    Ok(sum / n as f64)
}

fn abs_rel_parts(pred: &DepthMap, gt: &DepthMap) -> Result<(f64, usize)> {
    same_dims((pred.width, pred.height), (gt.width, gt.height), "abs_rel")?;
    let mut sum = 0.0;
    let mut n = 0;
    for (&p, &g) in pred.data.iter().zip(&gt.data) {
        let g = f64::from(g);
        if is_valid_depth(g) {
            sum += (f64::from(p) - g).abs() / g;
            n += 1;
        }
    }
    Ok((sum, n))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewMetrics {
    /// Frame index in the dataset.
    pub view: usize,
    pub psnr: f64,
    pub ssim: f64,
    pub abs_rel: f64,
    pub valid_depth_pixels: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub views: Vec<ViewMetrics>,
    pub psnr: f64,
    pub ssim: f64,
    pub abs_rel: f64,
    pub valid_depth_pixels: usize,
    pub wall_seconds: f64,
    pub lpips: String,
}

impl EvalReport {
    pub fn from_views(views: Vec<ViewMetrics>, wall_seconds: f64) -> Result<Self> {
        if views.is_empty() {
            return Err(Error::Domain("no views evaluated".into()));
        }
        let n = views.len() as f64;
        let mean = |f: fn(&ViewMetrics) -> f64| views.iter().map(f).sum::<f64>() / n;
        Ok(Self {
            psnr: mean(|v| v.psnr),
            ssim: mean(|v| v.ssim),
            abs_rel: mean(|v| v.abs_rel),
            valid_depth_pixels: views.iter().map(|v| v.valid_depth_pixels).sum(),
            views,
            wall_seconds,
            lpips: "n/a".into(),
        })
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("view,psnr,ssim,abs_rel\n");
        for v in &self.views {
            s += &format!("{},{:.6},{:.6},{:.6}\n", v.view, v.psnr, v.ssim, v.abs_rel);
        }
        s + &format!("mean,{:.6},{:.6},{:.6}\n", self.psnr, self.ssim, self.abs_rel)
    }

    /// Write `<stem>.json` and `<stem>.csv` into `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json = dir.join(format!("{stem}.json"));
        let text = serde_json::to_string_pretty(self).expect("report serializes");
        std::fs::write(&json, text + "\n").map_err(|e| Error::io(&json, e))?;
        let csv = dir.join(format!("{stem}.csv"));
        std::fs::write(&csv, self.to_csv()).map_err(|e| Error::io(&csv, e))
    }
}

/// Produces a color and depth image for a dataset frame.
pub trait ViewRenderer {
    fn render_view(&self, dataset: &RgbdDataset, frame: usize) -> Result<RenderedImage>;
}

/// Renders a trained field, sampling around the frame's sensor depth for
/// local strategies.
#[derive(Debug, Clone)]
pub struct FieldRenderer<'a> {
    pub params: &'a FieldParams<f32>,
    pub sampling: SamplingConfig,
}

impl ViewRenderer for FieldRenderer<'_> {
    fn render_view(&self, ds: &RgbdDataset, frame: usize) -> Result<RenderedImage> {
        let f = &ds.frames[frame];
        let source = self.sampling.strategy.is_local().then(|| DepthSource {
            depth: &f.depth,
            error: ds.error_map(frame),
        });
        render_image(self.params, &f.camera, source, &self.sampling, ds.near, ds.far)
    }
}

/// Returns the dataset's own images; useful to check the evaluation path.
#[derive(Debug, Clone, Copy, Default)]
pub struct GroundTruthRenderer;

impl ViewRenderer for GroundTruthRenderer {
    fn render_view(&self, ds: &RgbdDataset, frame: usize) -> Result<RenderedImage> {
        let f = &ds.frames[frame];
        Ok(RenderedImage {
            color: f.color.clone(),
            depth: f.depth.clone(),
            acc: f.depth.data.iter().map(|&d| if d > 0.0 { 1.0 } else { 0.0 }).collect(),
        })
    }
}

pub fn evaluate_view(rendered: &RenderedImage, ds: &RgbdDataset, frame: usize) -> Result<ViewMetrics> {
    let f = &ds.frames[frame];
    let (sum, n) = abs_rel_parts(&rendered.depth, &f.depth)?;
    Ok(ViewMetrics {
        view: frame,
        psnr: psnr(&rendered.color, &f.color)?,
        ssim: ssim(&rendered.color, &f.color)?,
        // views without foreground carry no depth error
        abs_rel: if n == 0 { 0.0 } else { sum / n as f64 },
        valid_depth_pixels: n,
    })
}

/// Render and score every frame of `split`. With `out_dir`, predictions are
/// written as `pred_####.png` and `pred_depth_####.png`.
pub fn evaluate(
    renderer: &impl ViewRenderer,
    ds: &RgbdDataset,
    split: Split,
    out_dir: Option<&Path>,
) -> Result<EvalReport> {
    let frames = ds.indices(split);
    if frames.is_empty() {
        return Err(Error::Domain(format!("dataset has no {split} frames")));
    }
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let start = Instant::now();
    let mut views = Vec::with_capacity(frames.len());
    for &i in &frames {
        let rendered = renderer.render_view(ds, i)?;
        views.push(evaluate_view(&rendered, ds, i)?);
        if let Some(dir) = out_dir {
            png_io::write_rgb(&dir.join(format!("pred_{i:04}.png")), &rendered.color)?;
            png_io::write_depth_vis(
                &dir.join(format!("pred_depth_{i:04}.png")),
                &rendered.depth,
                ds.near,
                ds.far,
            )?;
        }
    }
    EvalReport::from_views(views, start.elapsed().as_secs_f64())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{synthesize, GenerateOptions, SceneSpec};
    use crate::seed;
    use approx::assert_abs_diff_eq;
    use rand::Rng;
    use rand_distr::{Distribution, Normal};

    fn constant(w: usize, h: usize, v: f32) -> RgbImage {
        RgbImage::from_vec(w, h, vec![v; w * h * 3]).unwrap()
    }

    fn random_image(w: usize, h: usize, rng: &mut impl Rng) -> RgbImage {
        RgbImage::from_vec(w, h, (0..w * h * 3).map(|_| rng.gen::<f32>()).collect()).unwrap()
    }

    #[test]
    fn psnr_examples() {
        let a = constant(8, 8, 0.3);
        assert_eq!(psnr(&a, &a).unwrap(), 99.0);
        assert_abs_diff_eq!(
            psnr(&constant(8, 8, 0.2), &constant(8, 8, 0.3)).unwrap(),
            20.0,
            epsilon = 1e-5
        );
        assert_abs_diff_eq!(
            psnr(&constant(8, 8, 0.0), &constant(8, 8, 0.5)).unwrap(),
            6.0206,
            epsilon = 1e-4
        );
        assert!(psnr(&constant(8, 8, 0.0), &constant(8, 9, 0.0)).is_err());
    }

    #[test]
    fn psnr_is_symmetric_and_falls_with_noise() {
        let mut rng = seed::rng_for(1, &[]);
        let gt = random_image(32, 32, &mut rng);
        let mut last = f64::INFINITY;
        for sigma in [0.01, 0.05, 0.1] {
            let n = Normal::new(0.0, sigma).unwrap();
            let noisy =
                RgbImage::from_vec(32, 32, gt.data.iter().map(|&v| v + n.sample(&mut rng) as f32).collect()).unwrap();
            let p = psnr(&noisy, &gt).unwrap();
            assert_eq!(p, psnr(&gt, &noisy).unwrap());
            assert!(p < last);
            last = p;
        }
    }

    #[test]
    fn ssim_examples() {
        let mut rng = seed::rng_for(2, &[]);
        let a = random_image(16, 16, &mut rng);
        assert_abs_diff_eq!(ssim(&a, &a).unwrap(), 1.0, epsilon = 1e-9);
        let want = (2.0 * 0.5 * 0.6 + 1e-4) / (0.25 + 0.36 + 1e-4);
        assert_abs_diff_eq!(
            ssim(&constant(12, 12, 0.6), &constant(12, 12, 0.5)).unwrap(),
            want,
            epsilon = 1e-6
        );
        assert!(ssim(&constant(10, 20, 0.5), &constant(10, 20, 0.5)).is_err());
    }

    fn fixture(f: impl Fn(usize, usize, usize) -> f64) -> RgbImage {
        let data = (0..32 * 32 * 3).map(|i| f(i / 3 % 32, i / 96, i % 3) as f32).collect();
        RgbImage::from_vec(32, 32, data).unwrap()
    }

    // reference values from scikit-image 0.25 structural_similarity with
    // gaussian_weights, sigma 1.5, population covariance, data_range 1
    #[test]
    fn ssim_matches_reference_fixture() {
        let gt = fixture(|x, y, c| 0.1 + 0.8 * ((x / 4 + y / 4) % 2) as f64 + 0.03 * c as f64);
        let inv = RgbImage::from_vec(32, 32, gt.data.iter().map(|v| 1.0 - v).collect()).unwrap();
        let wave = fixture(|x, y, c| 0.5 + 0.4 * (0.3 * x as f64 + 0.2 * y as f64 + c as f64).sin());
        let s_inv = ssim(&inv, &gt).unwrap();
        assert_abs_diff_eq!(s_inv, -0.922_942_929_235_301_1, epsilon = 1e-4);
        assert!(s_inv < 0.5);
        assert_abs_diff_eq!(ssim(&wave, &gt).unwrap(), 0.006_906_771_136_722_473_5, epsilon = 1e-4);
    }

    #[test]
    fn ssim_is_bounded() {
        let mut rng = seed::rng_for(3, &[]);
        for _ in 0..1000 {
            let s = ssim(&random_image(11, 11, &mut rng), &random_image(11, 11, &mut rng)).unwrap();
            assert!((-1.0..=1.0).contains(&s));
        }
    }

    #[test]
    fn abs_rel_examples() {
        let gt = DepthMap::from_vec(2, 2, vec![1.0, 2.0, 0.0, 4.0]).unwrap();
        assert_eq!(abs_rel(&gt, &gt).unwrap(), 0.0);
        let scaled = DepthMap::from_vec(2, 2, gt.data.iter().map(|d| d * 1.1).collect()).unwrap();
        assert_abs_diff_eq!(abs_rel(&scaled, &gt).unwrap(), 0.1, epsilon = 1e-7);
        assert!(abs_rel(&gt, &DepthMap::new(2, 2)).is_err());
    }

    #[test]
    fn ground_truth_scores_perfectly() {
        let opts = GenerateOptions {
            n_train: 2,
            n_test: 2,
            resolution: 16,
            ..Default::default()
        };
        let ds = synthesize(&SceneSpec::cube(), &opts).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let report = evaluate(&GroundTruthRenderer, &ds, Split::Test, Some(dir.path())).unwrap();
        assert_eq!(report.views.len(), 2);
        assert_eq!(report.psnr, 99.0);
        assert_abs_diff_eq!(report.ssim, 1.0, epsilon = 1e-9);
        assert_eq!(report.abs_rel, 0.0);
        assert!(dir.path().join("pred_0003.png").exists());
        report.write(dir.path(), "eval").unwrap();
        let csv = std::fs::read_to_string(dir.path().join("eval.csv")).unwrap();
        assert!(csv.starts_with("view,psnr,ssim,abs_rel\n2,"));
        let json: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("eval.json")).unwrap()).unwrap();
        assert_eq!(json["lpips"], "n/a");
    }

    #[test]
    fn report_means_are_arithmetic() {
        let views = (0..3)
            .map(|i| ViewMetrics {
                view: i,
                psnr: 20.0 + i as f64,
                ssim: 0.5 + 0.1 * i as f64,
                abs_rel: 0.01 * i as f64,
                valid_depth_pixels: 10,
            })
            .collect();
        let r = EvalReport::from_views(views, 0.0).unwrap();
        assert_abs_diff_eq!(r.psnr, 21.0, epsilon = 1e-9);
        assert_abs_diff_eq!(r.ssim, 0.6, epsilon = 1e-9);
        assert_abs_diff_eq!(r.abs_rel, 0.01, epsilon = 1e-9);
        assert_eq!(r.valid_depth_pixels, 30);
    }
}
