//! Randomised finite-difference suite over every differentiable operation.
//!
//! Each case draws fresh random inputs, computes the analytic gradient of a
//! random linear functional of the operation's output, and compares a few
//! randomly chosen coordinates against branch-aware central differences.
//! Cases where no probe step keeps a coordinate on one smooth branch are
//! redrawn.

use std::hash::{DefaultHasher, Hash, Hasher};
use std::sync::OnceLock;

use nalgebra::{Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use super::fd::{central_difference, grad_close, relative_error, Probe};
use super::scenes::{random_adjoint, random_gaussians, random_unit_quat, test_camera};
use crate::camera::Camera;
use crate::error::Result;
use crate::gaussian::{flatten_grads, unflatten_grads, GaussianSet};
use crate::image::Image;
use crate::losses::{
    image_loss_signature, loss_euclidean_rgb, loss_euclidean_rgb_grad, loss_jitter, loss_jitter_grad,
    loss_opacity_bias, loss_opacity_bias_grad, loss_opacity_mean, loss_opacity_mean_grad, loss_perceptual_surrogate,
    loss_perceptual_surrogate_grad, loss_scale_reg, loss_scale_reg_grad,
};
use crate::rasterizer::{render_backward, render_with, RasterConfig, RenderAdjoint, RenderOutput};
use crate::roi::{gaussians_to_source_frame, gaussians_to_source_frame_backward};
use crate::rotation::axis_angle;
use crate::splatter::{
    color_sample_signature, decode, decode_backward, direct_color_sample, direct_color_sample_backward, DecodeConfig,
    SplatterImage, CH_LOGSCALE, RAW_CHANNELS,
};
use crate::synthgen::{generate_sample, DatasetConfig, MultiViewSample};
use crate::training::{apply_scale, apply_scale_backward, solve_scale, solve_scale_grad, FitConfig, FitProblem, ScaleCorrection};

/// Every operation the suite covers, in report order.
pub const OPERATIONS: &[&str] = &[
    "rasterizer",
    "decode",
    "direct_color_sample",
    "source_frame",
    "loss_euclidean",
    "loss_perceptual",
    "loss_opacity_mean",
    "loss_opacity_bias",
    "loss_scale_reg",
    "loss_jitter",
    "solve_scale",
    "apply_scale",
    "end_to_end",
];

/// Coordinates compared per case.
pub const COORDS_PER_CASE: usize = 4;
/// Redraws allowed per requested case before the operation is reported short.
const MAX_DRAWS_PER_CASE: usize = 4;

#[derive(Clone, Debug)]
pub struct SuiteConfig {
    pub cases: usize,
    pub rel_tol: f64,
    pub abs_tol: f64,
    pub step: f64,
    pub seed: u64,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            cases: 100,
            rel_tol: 1e-3,
            abs_tol: 1e-6,
            step: 1e-4,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct OpReport {
    pub op: String,
    /// Cases where at least one coordinate was compared.
    pub checked: usize,
    pub passed: usize,
    /// Draws discarded because no coordinate stayed on one branch.
    pub redrawn: usize,
    pub coordinates: usize,
    pub max_rel_error: f64,
    pub failures: Vec<String>,
}

impl OpReport {
    pub fn ok(&self, cases: usize) -> bool {
        self.checked >= cases && self.passed == self.checked
    }
}

/// One random instance: a scalar function of a flat parameter vector and
/// its analytic gradient at `params`.
struct Case {
    params: Vec<f64>,
    analytic: Vec<f64>,
    eval: Box<dyn Fn(&[f64]) -> Probe + Send + Sync>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn random_vec(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

fn random_image(rng: &mut ChaCha8Rng, w: usize, h: usize) -> Image {
    Image::from_vec(w, h, 3, random_vec(rng, w * h * 3, 0.0, 1.0)).expect("sized")
}

fn smooth(value: f64) -> Probe {
    Probe { value, signature: 0 }
}

fn render_scalar(out: &RenderOutput, adj: &RenderAdjoint) -> f64 {
    dot(out.color.data(), &adj.color)
        + dot(out.alpha.data(), &adj.alpha)
        + dot(out.depth_premul.data(), &adj.depth_premul)
        + dot(out.depth_norm.data(), &adj.depth_norm)
}

fn case_rasterizer(rng: &mut ChaCha8Rng) -> Result<Case> {
    let cam = test_camera(16, 16, 14.0);
    let count = rng.random_range(1..=8);
    let gs = random_gaussians(rng, count, &cam);
    let adj = random_adjoint(rng, 16, 16);
    let analytic = flatten_grads(&render_backward(&gs, &cam, &adj)?);
    let cfg = RasterConfig::default();
    Ok(Case {
        params: gs.params(),
        analytic,
        eval: Box::new(move |p| {
            let out = render_with(&GaussianSet::from_flat(p), &cam, &cfg).expect("render");
            Probe {
                value: render_scalar(&out, &adj),
                signature: out.stats.signature,
            }
        }),
    })
}

fn case_decode(rng: &mut ChaCha8Rng) -> Result<Case> {
    let (h, w, k) = (3, 4, 2);
    let cam = Camera::new(
        axis_angle(&Vector3::new(0.2, 1.0, -0.3), rng.random_range(-1.0..1.0)),
        Vector3::new(rng.random_range(-0.2..0.2), 0.1, -0.5),
        6.0,
        Vector2::new(2.0, 1.5),
        w as u32,
        h as u32,
    )?;
    let cfg = DecodeConfig::default();
    let mut raw = random_vec(rng, h * w * k * RAW_CHANNELS, -1.5, 1.5);
    for g in raw.chunks_mut(RAW_CHANNELS) {
        for c in 0..3 {
            g[CH_LOGSCALE + c] = rng.random_range(cfg.logscale_min - 1.0..cfg.logscale_max + 1.0);
        }
    }
    let sp = SplatterImage::from_raw(h, w, k, raw.clone())?;
    let weights = random_vec(rng, h * w * k * crate::gaussian::GAUSSIAN_PARAMS, -1.0, 1.0);
    let analytic = decode_backward(&sp, &cam, &cfg, &unflatten_grads(&weights))?;
    Ok(Case {
        params: raw,
        analytic,
        eval: Box::new(move |p| {
            let sp = SplatterImage::from_raw(h, w, k, p.to_vec()).expect("sized");
            let mut sig = DefaultHasher::new();
            for g in p.chunks(RAW_CHANNELS) {
                for c in 0..3 {
                    let v = g[CH_LOGSCALE + c];
                    (v < cfg.logscale_min, v > cfg.logscale_max).hash(&mut sig);
                }
            }
            Probe {
                value: dot(&decode(&sp, &cam, &cfg).expect("decode").params(), &weights),
                signature: sig.finish(),
            }
        }),
    })
}

fn case_direct_color_sample(rng: &mut ChaCha8Rng) -> Result<Case> {
    let cam = test_camera(12, 10, 11.0);
    let count = rng.random_range(1..=6);
    let gs = random_gaussians(rng, count, &cam);
    let image = random_image(rng, 12, 10);
    let cfg = DecodeConfig {
        color_mix: rng.random_range(0.1..1.0),
        ..DecodeConfig::default()
    };
    let weights = random_vec(rng, gs.params().len(), -1.0, 1.0);
    let analytic = flatten_grads(&direct_color_sample_backward(&gs, &image, &cam, &cfg, &unflatten_grads(&weights))?);
    Ok(Case {
        params: gs.params(),
        analytic,
        eval: Box::new(move |p| {
            let gs = GaussianSet::from_flat(p);
            Probe {
                value: dot(&direct_color_sample(&gs, &image, &cam, &cfg).expect("sample").params(), &weights),
                signature: color_sample_signature(&gs, &cam),
            }
        }),
    })
}

fn case_source_frame(rng: &mut ChaCha8Rng) -> Result<Case> {
    let center = Vector3::new(0.1, -0.3, 0.2);
    let src = Camera::new(axis_angle(&Vector3::new(1.0, 0.4, 0.0), 0.3), center, 20.0, Vector2::new(8.0, 8.0), 16, 16)?;
    let roi = src.with_pose(axis_angle(&Vector3::new(0.1, 1.0, 0.5), rng.random_range(-0.8..0.8)), center)?;
    let mut gs = random_gaussians(rng, 3, &src);
    for g in &mut gs.gaussians {
        g.rotation = random_unit_quat(rng);
    }
    let weights = random_vec(rng, gs.params().len(), -1.0, 1.0);
    let analytic = flatten_grads(&gaussians_to_source_frame_backward(&roi, &src, &unflatten_grads(&weights))?);
    Ok(Case {
        params: gs.params(),
        analytic,
        eval: Box::new(move |p| {
            let out = gaussians_to_source_frame(&GaussianSet::from_flat(p), &roi, &src).expect("shared center");
            smooth(dot(&out.params(), &weights))
        }),
    })
}

fn image_pair_case(
    rng: &mut ChaCha8Rng,
    loss: fn(&Image, &Image) -> Result<f64>,
    grad: fn(&Image, &Image) -> Result<(f64, Vec<f64>)>,
) -> Result<Case> {
    let (w, h) = (6, 5);
    let x = random_image(rng, w, h);
    let y = random_image(rng, w, h);
    let analytic = grad(&x, &y)?.1;
    Ok(Case {
        params: x.data().to_vec(),
        analytic,
        eval: Box::new(move |p| {
            let x = Image::from_vec(w, h, 3, p.to_vec()).expect("sized");
            Probe {
                value: loss(&x, &y).expect("loss"),
                signature: image_loss_signature(&x, &y),
            }
        }),
    })
}

fn case_loss_opacity_mean(rng: &mut ChaCha8Rng) -> Result<Case> {
    let layers = rng.random_range(1..=4);
    let means = random_vec(rng, layers, 0.0, 0.2);
    let tau = 50.0;
    Ok(Case {
        analytic: loss_opacity_mean_grad(&means, tau).1,
        params: means,
        eval: Box::new(move |p| smooth(loss_opacity_mean(p, tau))),
    })
}

fn case_loss_opacity_bias(rng: &mut ChaCha8Rng) -> Result<Case> {
    let layers = rng.random_range(1..=4);
    let means = random_vec(rng, layers, 0.0, 1.0);
    Ok(Case {
        analytic: loss_opacity_bias_grad(&means).1,
        params: means,
        eval: Box::new(move |p| smooth(loss_opacity_bias(p))),
    })
}

fn case_loss_scale_reg(rng: &mut ChaCha8Rng) -> Result<Case> {
    let s = rng.random_range(0.2..5.0);
    Ok(Case {
        params: vec![s],
        analytic: vec![loss_scale_reg_grad(s)?.1],
        eval: Box::new(move |p| smooth(loss_scale_reg(p[0]).expect("positive"))),
    })
}

fn case_loss_jitter(rng: &mut ChaCha8Rng) -> Result<Case> {
    let (w, h, views) = (5, 4, rng.random_range(1..=3));
    let a: Vec<Image> = (0..views).map(|_| random_image(rng, w, h)).collect();
    let b: Vec<Image> = (0..views).map(|_| random_image(rng, w, h)).collect();
    let (_, ga) = loss_jitter_grad(&a, &b)?;
    let n = w * h * 3;
    let mut params: Vec<f64> = a.iter().flat_map(|i| i.data().to_vec()).collect();
    params.extend(b.iter().flat_map(|i| i.data().to_vec()));
    let mut analytic: Vec<f64> = ga.concat();
    analytic.extend(ga.concat().iter().map(|g| -g));
    Ok(Case {
        params,
        analytic,
        eval: Box::new(move |p| {
            let img = |k: usize| Image::from_vec(w, h, 3, p[k * n..(k + 1) * n].to_vec()).expect("sized");
            let a: Vec<Image> = (0..views).map(img).collect();
            let b: Vec<Image> = (views..2 * views).map(img).collect();
            smooth(loss_jitter(&a, &b).expect("loss"))
        }),
    })
}

fn case_solve_scale(rng: &mut ChaCha8Rng) -> Result<Case> {
    let (w, h) = (5, 4);
    let pred = random_vec(rng, w * h, 0.3, 1.5);
    let gt = Image::from_vec(w, h, 1, random_vec(rng, w * h, 0.3, 1.5))?;
    let alpha = Image::from_vec(w, h, 1, random_vec(rng, w * h, 0.0, 1.0))?;
    let mask = Image::from_vec(w, h, 1, (0..w * h).map(|i| if i % 5 == 0 { 0.0 } else { 1.0 }).collect())?;
    let (_, analytic) = solve_scale_grad(&Image::from_vec(w, h, 1, pred.clone())?, &alpha, &gt, &mask)?;
    Ok(Case {
        params: pred,
        analytic,
        eval: Box::new(move |p| {
            let d = Image::from_vec(w, h, 1, p.to_vec()).expect("sized");
            smooth(solve_scale(&d, &alpha, &gt, &mask).expect("overlap").s)
        }),
    })
}

fn case_apply_scale(rng: &mut ChaCha8Rng) -> Result<Case> {
    let cam = test_camera(16, 16, 14.0);
    let gs = random_gaussians(rng, 3, &cam);
    let corr = ScaleCorrection {
        s: rng.random_range(0.3..3.0),
        pivot: Vector3::new(rng.random_range(-1.0..1.0), 0.2, -0.3),
        overlap_count: 1,
    };
    let weights = random_vec(rng, gs.params().len(), -1.0, 1.0);
    let (d_in, d_s) = apply_scale_backward(&gs, &corr, &unflatten_grads(&weights));
    let mut params = gs.params();
    params.push(corr.s);
    let mut analytic = flatten_grads(&d_in);
    analytic.push(d_s);
    Ok(Case {
        params,
        analytic,
        eval: Box::new(move |p| {
            let (g, s) = p.split_at(p.len() - 1);
            let c = ScaleCorrection { s: s[0], ..corr.clone() };
            smooth(dot(&apply_scale(&GaussianSet::from_flat(g), &c).params(), &weights))
        }),
    })
}

/// Small sample shared by every end-to-end case.
fn end_to_end_sample() -> &'static MultiViewSample {
    static SAMPLE: OnceLock<MultiViewSample> = OnceLock::new();
    SAMPLE.get_or_init(|| {
        let cfg = DatasetConfig {
            input_width: 48,
            input_height: 32,
            view_size: 24,
            n_views: 4,
            ..DatasetConfig::default()
        };
        generate_sample(&cfg, 0).expect("toy sample").0
    })
}

/// Fit configuration of the end-to-end cases: a small grid and one held-out
/// view, everything else at defaults.
pub fn end_to_end_config() -> FitConfig {
    FitConfig {
        grid_size: 8,
        layers: 2,
        holdout: 1,
        ..FitConfig::default()
    }
}

fn case_end_to_end(rng: &mut ChaCha8Rng) -> Result<Case> {
    let sample = end_to_end_sample();
    let cfg = end_to_end_config();
    let problem = FitProblem::new(sample, &cfg)?;
    let mut grid = problem.initial_grid();
    for v in grid.raw_mut() {
        *v += rng.random_range(-0.5..0.5);
    }
    let iteration = rng.random_range(0..cfg.iterations);
    let ev = problem.evaluate(&grid, iteration)?;
    let (h, w, k) = (grid.height(), grid.width(), grid.layers());
    Ok(Case {
        params: grid.raw().to_vec(),
        analytic: ev.grad,
        eval: Box::new(move |p| {
            let problem = FitProblem::new(sample, &cfg).expect("valid problem");
            let sp = SplatterImage::from_raw(h, w, k, p.to_vec()).expect("sized");
            let ev = problem.evaluate(&sp, iteration).expect("evaluate");
            Probe {
                value: ev.loss.total,
                signature: ev.signature,
            }
        }),
    })
}

fn draw_case(op: &str, rng: &mut ChaCha8Rng) -> Result<Case> {
    match op {
        "rasterizer" => case_rasterizer(rng),
        "decode" => case_decode(rng),
        "direct_color_sample" => case_direct_color_sample(rng),
        "source_frame" => case_source_frame(rng),
        "loss_euclidean" => image_pair_case(rng, loss_euclidean_rgb, loss_euclidean_rgb_grad),
        "loss_perceptual" => image_pair_case(rng, loss_perceptual_surrogate, loss_perceptual_surrogate_grad),
        "loss_opacity_mean" => case_loss_opacity_mean(rng),
        "loss_opacity_bias" => case_loss_opacity_bias(rng),
        "loss_scale_reg" => case_loss_scale_reg(rng),
        "loss_jitter" => case_loss_jitter(rng),
        "solve_scale" => case_solve_scale(rng),
        "apply_scale" => case_apply_scale(rng),
        "end_to_end" => case_end_to_end(rng),
        other => Err(crate::error::Error::InvalidConfig(format!("unknown gradcheck operation {other:?}"))),
    }
}

/// Runs `cfg.cases` checked cases of one operation.
pub fn run_operation(op: &str, cfg: &SuiteConfig) -> Result<OpReport> {
    let op_index = OPERATIONS.iter().position(|o| *o == op).unwrap_or(OPERATIONS.len()) as u64;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ op_index.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let mut report = OpReport {
        op: op.to_string(),
        checked: 0,
        passed: 0,
        redrawn: 0,
        coordinates: 0,
        max_rel_error: 0.0,
        failures: Vec::new(),
    };
    let mut draws = 0;
    while report.checked < cfg.cases && draws < cfg.cases * MAX_DRAWS_PER_CASE {
        draws += 1;
        let case = draw_case(op, &mut rng)?;
        let n = case.params.len();
        let coords: Vec<usize> = if n <= COORDS_PER_CASE {
            (0..n).collect()
        } else {
            rand::seq::index::sample(&mut rng, n, COORDS_PER_CASE).into_vec()
        };
        let results: Vec<(usize, Option<f64>)> = coords
            .par_iter()
            .map(|&k| {
                let numeric = central_difference(
                    |delta| {
                        let mut p = case.params.clone();
                        p[k] += delta;
                        (case.eval)(&p)
                    },
                    cfg.step,
                );
                (k, numeric)
            })
            .collect();
        if results.iter().all(|(_, n)| n.is_none()) {
            report.redrawn += 1;
            continue;
        }
        report.checked += 1;
        let mut case_ok = true;
        for (k, numeric) in results {
            let Some(numeric) = numeric else { continue };
            report.coordinates += 1;
            let analytic = case.analytic[k];
            report.max_rel_error = report.max_rel_error.max(relative_error(analytic, numeric, cfg.abs_tol));
            if !grad_close(analytic, numeric, cfg.rel_tol, cfg.abs_tol) {
                case_ok = false;
                if report.failures.len() < 10 {
                    report
                        .failures
                        .push(format!("case {} coordinate {k}: analytic {analytic:e}, numeric {numeric:e}", report.checked - 1));
                }
            }
        }
        if case_ok {
            report.passed += 1;
        }
    }
    Ok(report)
}

/// Runs every operation in [`OPERATIONS`].
pub fn run_suite(cfg: &SuiteConfig) -> Result<Vec<OpReport>> {
    OPERATIONS.iter().map(|op| run_operation(op, cfg)).collect()
}
