//! Direct fitting of a splatter image to one multi-view sample.
//!
//! Every iteration runs the reconstruction pipeline forward:
//!
//! 1. build the ROI camera from the face box and warp the input frame
//!    (the premultiplied input view, with no background behind it);
//! 2. decode the raw grid in the canonical ROI frame and mix in colours
//!    sampled from the warped input;
//! 3. rotate into the world, render depth in the input view, and fit a
//!    global scale about the input camera center to the ground-truth depth;
//! 4. render the input and supervision views over the sample's background
//!    and evaluate the objective.
//!
//! With jitter pairing, a twin pipeline runs from a perturbed face box
//! through the same raw grid; it only enters the objective through the
//! difference between its renders and the base renders. The gradient of
//! the total loss flows back through every step, including the scale.

use std::hash::{DefaultHasher, Hash, Hasher};

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::gaussian::{add_grads, Gaussian3D, GaussianGrad, GaussianSet};
use crate::image::Image;
use crate::losses::{
    composite, composite_alpha_grad, image_loss_signature, loss_euclidean_rgb_grad, loss_jitter_grad,
    loss_opacity_bias_grad, loss_opacity_mean_grad, loss_perceptual_surrogate_grad, loss_scale_reg_grad, total_loss,
    LossBreakdown, LossParts, LossWeights, TraceRecord,
};
use crate::rasterizer::{RasterConfig, RenderAdjoint, RenderPass};
use crate::roi::{build_roi_camera, gaussians_to_source_frame, gaussians_to_source_frame_backward, warp_image, FaceBox, RoiMapping};
use crate::splatter::{
    color_sample_signature, decode, decode_backward, direct_color_sample, direct_color_sample_backward, init_params,
    layer_mean_opacity, DecodeConfig, SplatterImage,
};
use crate::synthgen::noise::splitmix;
use crate::synthgen::MultiViewSample;

/// Rendered alpha above which a pixel belongs to the predicted depth mask.
pub const DEPTH_MASK_THRESHOLD: f64 = 0.5;

#[derive(Clone, Debug, PartialEq)]
pub struct ScaleCorrection {
    pub s: f64,
    pub pivot: Vector3<f64>,
    pub overlap_count: usize,
}

impl ScaleCorrection {
    pub fn identity(pivot: Vector3<f64>) -> Self {
        Self {
            s: 1.0,
            pivot,
            overlap_count: 0,
        }
    }
}

fn overlap(alpha_pred: &Image, depth_gt: &Image, mask_gt: &Image) -> Vec<bool> {
    alpha_pred
        .data()
        .iter()
        .zip(mask_gt.data())
        .zip(depth_gt.data())
        .map(|((&a, &m), &d)| a > DEPTH_MASK_THRESHOLD && m > 0.5 && d > 0.0)
        .collect()
}

/// Least-squares scale `s` minimising `Σ (s·d_pred − d_gt)²` over the
/// overlap of the rendered and ground-truth masks, with its gradient
/// w.r.t. every predicted depth pixel. The pivot is left at the origin.
pub fn solve_scale_grad(
    depth_pred: &Image,
    alpha_pred: &Image,
    depth_gt: &Image,
    mask_gt: &Image,
) -> Result<(ScaleCorrection, Vec<f64>)> {
    let shapes = [alpha_pred, depth_gt, mask_gt];
    if depth_pred.channels() != 1 || shapes.iter().any(|i| !i.same_shape(depth_pred)) {
        return Err(Error::DimensionMismatch("scale solve needs four equally sized one-channel images".into()));
    }
    let m = overlap(alpha_pred, depth_gt, mask_gt);
    let (mut num, mut den, mut count) = (0.0, 0.0, 0usize);
    for ((&inside, &p), &g) in m.iter().zip(depth_pred.data()).zip(depth_gt.data()) {
        if inside {
            num += p * g;
            den += p * p;
            count += 1;
        }
    }
    if count == 0 || !(den > 0.0) {
        return Err(Error::EmptyOverlap);
    }
    let s = num / den;
    if !(s > 0.0 && s.is_finite()) {
        return Err(Error::NonPositiveScale(s));
    }
    let grad = m
        .iter()
        .zip(depth_pred.data())
        .zip(depth_gt.data())
        .map(|((&inside, &p), &g)| if inside { (g - 2.0 * s * p) / den } else { 0.0 })
        .collect();
    Ok((
        ScaleCorrection {
            s,
            pivot: Vector3::zeros(),
            overlap_count: count,
        },
        grad,
    ))
}

pub fn solve_scale(depth_pred: &Image, alpha_pred: &Image, depth_gt: &Image, mask_gt: &Image) -> Result<ScaleCorrection> {
    Ok(solve_scale_grad(depth_pred, alpha_pred, depth_gt, mask_gt)?.0)
}

/// Scales the set about `corr.pivot`: seen from the pivot, footprints are
/// unchanged while depths scale by `s`.
pub fn apply_scale(gs: &GaussianSet, corr: &ScaleCorrection) -> GaussianSet {
    GaussianSet::new(
        gs.gaussians
            .iter()
            .map(|g| Gaussian3D {
                mean: corr.pivot + (g.mean - corr.pivot) * corr.s,
                scales: g.scales * corr.s,
                ..g.clone()
            })
            .collect(),
    )
}

/// Adjoint of [`apply_scale`]: gradients w.r.t. the input set and `s`.
pub fn apply_scale_backward(gs: &GaussianSet, corr: &ScaleCorrection, grads: &[GaussianGrad]) -> (Vec<GaussianGrad>, f64) {
    let mut d_s = 0.0;
    let out = gs
        .gaussians
        .iter()
        .zip(grads)
        .map(|(g, d)| {
            d_s += d.mean.dot(&(g.mean - corr.pivot)) + d.scales.dot(&g.scales);
            GaussianGrad {
                mean: d.mean * corr.s,
                scales: d.scales * corr.s,
                ..d.clone()
            }
        })
        .collect();
    (out, d_s)
}

/// Shifts the box center by up to `magnitude·size` per axis and rescales it
/// by a factor in `1 ± magnitude`.
pub fn perturb_face_box(face: &FaceBox, magnitude: f64, seed: u64) -> FaceBox {
    if magnitude == 0.0 {
        return *face;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shift = magnitude * face.size;
    FaceBox {
        center: [
            face.center[0] + rng.random_range(-shift..=shift),
            face.center[1] + rng.random_range(-shift..=shift),
        ],
        size: face.size * rng.random_range(1.0 - magnitude..=1.0 + magnitude),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    /// Learning rate reached at the last iteration by cosine decay.
    pub learning_rate_final: f64,
    pub weights: LossWeights,
    /// Gaussians per pixel.
    pub layers: usize,
    /// Side of the square splatter image and ROI.
    pub grid_size: u32,
    pub jitter_pairing: bool,
    /// Face-box perturbation as a fraction of the box size.
    pub perturbation: f64,
    pub seed: u64,
    /// Supervision views (taken from the end) excluded from fitting.
    pub holdout: usize,
    pub decode: DecodeConfig,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            iterations: 2000,
            learning_rate: 1e-2,
            learning_rate_final: 1e-3,
            weights: LossWeights::default(),
            layers: 2,
            grid_size: 64,
            jitter_pairing: true,
            perturbation: 0.02,
            seed: 0,
            holdout: 2,
            decode: DecodeConfig::default(),
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidConfig(format!("fit config: {what}")));
        if self.iterations == 0 {
            return bad("iterations must be at least 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate_final > 0.0) {
            return bad("learning rates must be positive");
        }
        if self.layers == 0 || self.grid_size == 0 {
            return bad("grid size and layer count must be positive");
        }
        if !(self.perturbation >= 0.0 && self.perturbation < 0.5) {
            return bad("perturbation must lie in [0, 0.5)");
        }
        self.weights.validate()?;
        self.decode.validate()
    }

    /// Whether a twin pipeline runs at all.
    pub fn pairing_active(&self) -> bool {
        self.jitter_pairing && self.weights.lambda_j > 0.0
    }

    /// Cosine decay from `learning_rate` to `learning_rate_final`.
    pub fn learning_rate_at(&self, iteration: usize) -> f64 {
        if self.iterations <= 1 {
            return self.learning_rate;
        }
        let t = iteration.min(self.iterations - 1) as f64 / (self.iterations - 1) as f64;
        self.learning_rate_final + 0.5 * (self.learning_rate - self.learning_rate_final) * (1.0 + (std::f64::consts::PI * t).cos())
    }

    pub fn twin_seed(&self, iteration: usize) -> u64 {
        splitmix(self.seed ^ splitmix(TWIN_SALT ^ iteration as u64))
    }
}

const TWIN_SALT: u64 = 0x6a09_e667_f3bc_c908;

/// Bias-corrected adaptive moment estimation.
#[derive(Clone, Debug)]
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
        }
    }
}

/// World-space Gaussians produced from a raw grid for one face box.
#[derive(Clone, Debug)]
pub struct Reconstruction {
    pub gaussians: GaussianSet,
    pub scale: ScaleCorrection,
    pub mapping: RoiMapping,
}

/// Forward state of one pipeline branch, kept for the backward pass.
struct Branch {
    mapping: RoiMapping,
    decode_cam: Camera,
    roi_image: Image,
    decoded: GaussianSet,
    world: GaussianSet,
    input_pass: RenderPass,
    scale: ScaleCorrection,
    /// d s / d depth_norm of the input render; empty when the overlap is empty.
    scale_grad: Vec<f64>,
    scaled: GaussianSet,
    /// Supervision passes, in training-view order.
    view_passes: Vec<RenderPass>,
    /// Composited renders; index 0 is the input view.
    composites: Vec<Image>,
}

/// Value, gradient and branch signature of the objective at one raw grid.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub loss: LossBreakdown,
    pub grad: Vec<f64>,
    pub signature: u64,
    pub scale: f64,
}

/// A sample prepared for fitting.
pub struct FitProblem<'a> {
    sample: &'a MultiViewSample,
    cfg: FitConfig,
    raster: RasterConfig,
    background: [f64; 3],
    train_views: Vec<usize>,
    /// Ground truth over the background; index 0 is the input view.
    targets: Vec<Image>,
    base_mapping: RoiMapping,
    base_roi: Image,
    /// Premultiplied input frame; colours are sampled without the background.
    input_frame: Image,
}

impl<'a> FitProblem<'a> {
    pub fn new(sample: &'a MultiViewSample, cfg: &FitConfig) -> Result<Self> {
        cfg.validate()?;
        if cfg.holdout >= sample.views.len() {
            return Err(Error::InvalidConfig(format!(
                "holding out {} of {} supervision views leaves none to fit",
                cfg.holdout,
                sample.views.len()
            )));
        }
        let background = sample.background();
        let train_views: Vec<usize> = (0..sample.views.len() - cfg.holdout).collect();
        let mut targets = vec![composite(&sample.input.color(), &sample.input.alpha(), &background)?];
        for &v in &train_views {
            let view = &sample.views[v];
            targets.push(composite(&view.color(), &view.alpha(), &background)?);
        }
        let base_mapping = build_roi_camera(&sample.input.camera, &sample.face_box, cfg.grid_size)?;
        let input_frame = sample.input.rgba.clone();
        let base_roi = warp_image(&input_frame, &base_mapping, cfg.grid_size as usize);
        Ok(Self {
            sample,
            cfg: cfg.clone(),
            raster: RasterConfig::default(),
            background,
            train_views,
            targets,
            base_mapping,
            base_roi,
            input_frame,
        })
    }

    pub fn config(&self) -> &FitConfig {
        &self.cfg
    }

    pub fn base_mapping(&self) -> &RoiMapping {
        &self.base_mapping
    }

    pub fn background(&self) -> [f64; 3] {
        self.background
    }

    /// Indices (into `sample.views`) of the supervision views being fitted.
    pub fn train_views(&self) -> &[usize] {
        &self.train_views
    }

    /// Supervision views excluded from fitting.
    pub fn held_out_views(&self) -> Vec<usize> {
        (self.train_views.len()..self.sample.views.len()).collect()
    }

    pub fn initial_grid(&self) -> SplatterImage {
        let n = self.cfg.grid_size as usize;
        init_params(n, n, self.cfg.layers, self.cfg.seed, self.base_mapping.cam_roi.focal(), &self.cfg.decode)
    }

    /// The perturbed face box of the twin branch at `iteration`.
    pub fn twin_box(&self, iteration: usize) -> FaceBox {
        perturb_face_box(&self.sample.face_box, self.cfg.perturbation, self.cfg.twin_seed(iteration))
    }

    fn check_grid(&self, sp: &SplatterImage) -> Result<()> {
        let n = self.cfg.grid_size as usize;
        if sp.height() != n || sp.width() != n || sp.layers() != self.cfg.layers {
            return Err(Error::DimensionMismatch(format!(
                "grid is {}x{}x{}, fit expects {n}x{n}x{}",
                sp.height(),
                sp.width(),
                sp.layers(),
                self.cfg.layers
            )));
        }
        Ok(())
    }

    /// Steps 1-3 of the pipeline: world-space, scale-corrected Gaussians.
    pub fn reconstruct(&self, sp: &SplatterImage, face: &FaceBox) -> Result<Reconstruction> {
        self.check_grid(sp)?;
        let mapping = build_roi_camera(&self.sample.input.camera, face, self.cfg.grid_size)?;
        let roi = warp_image(&self.input_frame, &mapping, self.cfg.grid_size as usize);
        let branch = self.forward_branch(sp, mapping, roi, false)?;
        Ok(Reconstruction {
            gaussians: branch.scaled,
            scale: branch.scale,
            mapping: branch.mapping,
        })
    }

    fn forward_branch(&self, sp: &SplatterImage, mapping: RoiMapping, roi_image: Image, with_views: bool) -> Result<Branch> {
        let input = &self.sample.input;
        let decode_cam = mapping.decode_camera();
        let decoded = decode(sp, &decode_cam, &self.cfg.decode)?;
        let sampled = direct_color_sample(&decoded, &roi_image, &decode_cam, &self.cfg.decode)?;
        let world = gaussians_to_source_frame(&sampled, &mapping.cam_roi, &input.camera)?;
        let input_pass = RenderPass::forward(&world, &input.camera, &self.raster)?;
        let out = input_pass.output();
        let (scale, scale_grad) = match solve_scale_grad(&out.depth_norm, &out.alpha, &input.depth, &input.mask) {
            Ok((mut corr, grad)) => {
                corr.pivot = *input.camera.center();
                (corr, grad)
            }
            Err(Error::EmptyOverlap) => {
                log::warn!("rendered and ground-truth depth masks do not overlap; scale step skipped");
                (ScaleCorrection::identity(*input.camera.center()), Vec::new())
            }
            Err(e) => return Err(e),
        };
        let scaled = apply_scale(&world, &scale);
        let mut view_passes = Vec::new();
        let mut composites = Vec::new();
        if with_views {
            view_passes = self
                .train_views
                .par_iter()
                .map(|&v| RenderPass::forward(&scaled, &self.sample.views[v].camera, &self.raster))
                .collect::<Result<Vec<_>>>()?;
            // Seen from its own center the scaled set renders the same colours,
            // so the input view reuses the unscaled pass.
            composites.push(composite(&out.color, &out.alpha, &self.background)?);
            for pass in &view_passes {
                composites.push(composite(&pass.output().color, &pass.output().alpha, &self.background)?);
            }
        }
        Ok(Branch {
            mapping,
            decode_cam,
            roi_image,
            decoded,
            world,
            input_pass,
            scale,
            scale_grad,
            scaled,
            view_passes,
            composites,
        })
    }

    /// Gradient w.r.t. the raw grid given adjoints of the composites, of `s`
    /// and of the decoded Gaussians.
    fn backward_branch(
        &self,
        sp: &SplatterImage,
        b: &Branch,
        d_composites: &[Vec<f64>],
        d_scale: f64,
        d_decoded: Option<&[GaussianGrad]>,
    ) -> Result<Vec<f64>> {
        let adjoint_for = |d: &[f64], w: usize, h: usize| {
            let mut adj = RenderAdjoint::zeros(w, h);
            adj.color.copy_from_slice(d);
            adj.alpha = composite_alpha_grad(d, &self.background);
            adj
        };
        let per_view: Vec<Vec<GaussianGrad>> = b
            .view_passes
            .par_iter()
            .zip(&d_composites[1..])
            .map(|(pass, d)| {
                let cam = pass.camera();
                pass.backward(&b.scaled, &adjoint_for(d, cam.width() as usize, cam.height() as usize))
            })
            .collect();
        let mut d_scaled = b.scaled.zero_grads();
        for g in &per_view {
            add_grads(&mut d_scaled, g);
        }
        let (mut d_world, d_s_views) = apply_scale_backward(&b.world, &b.scale, &d_scaled);
        let d_s = d_s_views + d_scale;

        let cam = &self.sample.input.camera;
        let mut adj = adjoint_for(&d_composites[0], cam.width() as usize, cam.height() as usize);
        if !b.scale_grad.is_empty() {
            for (a, g) in adj.depth_norm.iter_mut().zip(&b.scale_grad) {
                *a = d_s * g;
            }
        }
        add_grads(&mut d_world, &b.input_pass.backward(&b.world, &adj));

        let d_sampled = gaussians_to_source_frame_backward(&b.mapping.cam_roi, cam, &d_world)?;
        let mut d_dec = direct_color_sample_backward(&b.decoded, &b.roi_image, &b.decode_cam, &self.cfg.decode, &d_sampled)?;
        if let Some(extra) = d_decoded {
            add_grads(&mut d_dec, extra);
        }
        decode_backward(sp, &b.decode_cam, &self.cfg.decode, &d_dec)
    }

    fn branch_signature(&self, b: &Branch, h: &mut DefaultHasher) {
        b.input_pass.output().stats.signature.hash(h);
        for p in &b.view_passes {
            p.output().stats.signature.hash(h);
        }
        color_sample_signature(&b.decoded, &b.decode_cam).hash(h);
        let out = b.input_pass.output();
        overlap(&out.alpha, &self.sample.input.depth, &self.sample.input.mask).hash(h);
    }

    /// Total loss, its gradient w.r.t. the raw grid and a signature of the
    /// smooth branch taken, at `iteration` (which selects the twin box).
    pub fn evaluate(&self, sp: &SplatterImage, iteration: usize) -> Result<Evaluation> {
        self.check_grid(sp)?;
        let w = &self.cfg.weights;
        let base = self.forward_branch(sp, self.base_mapping.clone(), self.base_roi.clone(), true)?;
        let twin = if self.cfg.pairing_active() {
            let mapping = build_roi_camera(&self.sample.input.camera, &self.twin_box(iteration), self.cfg.grid_size)?;
            let roi = warp_image(&self.input_frame, &mapping, self.cfg.grid_size as usize);
            Some(self.forward_branch(sp, mapping, roi, true)?)
        } else {
            None
        };

        let n_views = base.composites.len() as f64;
        let mut sig = DefaultHasher::new();
        let mut parts = LossParts::default();
        let mut d_base: Vec<Vec<f64>> = Vec::with_capacity(base.composites.len());
        for (render, target) in base.composites.iter().zip(&self.targets) {
            let (le, ge) = loss_euclidean_rgb_grad(render, target)?;
            let (lp, gp) = loss_perceptual_surrogate_grad(render, target)?;
            parts.l_e += le / n_views;
            parts.l_p += lp / n_views;
            d_base.push(ge.iter().zip(&gp).map(|(a, b)| (a + w.lambda_p * b) / n_views).collect());
            image_loss_signature(render, target).hash(&mut sig);
        }

        let mut d_twin = Vec::new();
        if let Some(t) = &twin {
            let (lj, gj) = loss_jitter_grad(&base.composites, &t.composites)?;
            parts.l_j = lj;
            for (db, g) in d_base.iter_mut().zip(&gj) {
                for (a, b) in db.iter_mut().zip(g) {
                    *a += w.lambda_j * b;
                }
            }
            d_twin = gj.iter().map(|g| g.iter().map(|v| -w.lambda_j * v).collect()).collect();
        }

        let layers = sp.layers();
        let means = layer_mean_opacity(&base.decoded, layers);
        let (lm, gm) = loss_opacity_mean_grad(&means, w.tau);
        let (ls, gs) = loss_opacity_bias_grad(&means);
        parts.l_m = lm;
        parts.l_sigma = ls;
        let per_layer = (sp.height() * sp.width()) as f64;
        let mut d_decoded = base.decoded.zero_grads();
        for (i, d) in d_decoded.iter_mut().enumerate() {
            let k = i % layers;
            d.opacity = (w.lambda_m * gm[k] + w.lambda_sigma * gs[k]) / per_layer;
        }

        let mut d_scale = 0.0;
        if !base.scale_grad.is_empty() {
            let (lc, dc) = loss_scale_reg_grad(base.scale.s)?;
            parts.l_c = lc;
            d_scale = w.lambda_c * dc;
        }
        let loss = total_loss(&parts, w).map_err(|e| match e {
            Error::NonFiniteLoss { what, .. } => Error::NonFiniteLoss { iteration, what },
            other => other,
        })?;

        let mut grad = self.backward_branch(sp, &base, &d_base, d_scale, Some(&d_decoded))?;
        self.branch_signature(&base, &mut sig);
        if let Some(t) = &twin {
            let g = self.backward_branch(sp, t, &d_twin, 0.0, None)?;
            for (a, b) in grad.iter_mut().zip(g) {
                *a += b;
            }
            self.branch_signature(t, &mut sig);
        }
        if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFiniteLoss {
                iteration,
                what: format!("gradient entry {i} is not finite"),
            });
        }
        Ok(Evaluation {
            loss,
            grad,
            signature: sig.finish(),
            scale: base.scale.s,
        })
    }
}

pub struct FitResult {
    pub grid: SplatterImage,
    pub trace: Vec<TraceRecord>,
    pub reconstruction: Reconstruction,
}

/// Fits a raw grid to `sample`, calling `progress` after every iteration.
pub fn fit_with_progress(
    sample: &MultiViewSample,
    cfg: &FitConfig,
    mut progress: impl FnMut(&TraceRecord),
) -> Result<FitResult> {
    let problem = FitProblem::new(sample, cfg)?;
    let mut grid = problem.initial_grid();
    let mut adam = Adam::new(grid.raw().len());
    let mut trace = Vec::with_capacity(cfg.iterations);
    for it in 0..cfg.iterations {
        let ev = problem.evaluate(&grid, it)?;
        let record = TraceRecord {
            iteration: it,
            loss: ev.loss,
        };
        progress(&record);
        trace.push(record);
        adam.step(grid.raw_mut(), &ev.grad, cfg.learning_rate_at(it));
    }
    let reconstruction = problem.reconstruct(&grid, &sample.face_box)?;
    Ok(FitResult {
        grid,
        trace,
        reconstruction,
    })
}

pub fn fit(sample: &MultiViewSample, cfg: &FitConfig) -> Result<FitResult> {
    fit_with_progress(sample, cfg, |_| {})
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::fd::{central_difference, grad_close, Probe};
    use crate::gradcheck::scenes::{random_gaussians, test_camera};
    use crate::rasterizer::render;
    use crate::synthgen::{generate_sample, DatasetConfig};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn tiny_sample() -> MultiViewSample {
        let cfg = DatasetConfig {
            input_width: 48,
            input_height: 32,
            view_size: 24,
            n_views: 4,
            ..DatasetConfig::default()
        };
        generate_sample(&cfg, 0).unwrap().0
    }

    fn tiny_config() -> FitConfig {
        FitConfig {
            iterations: 5,
            grid_size: 8,
            layers: 1,
            holdout: 1,
            ..FitConfig::default()
        }
    }

    fn one_channel(w: usize, h: usize, v: &[f64]) -> Image {
        Image::from_vec(w, h, 1, v.to_vec()).unwrap()
    }

    #[test]
    fn scale_of_uniformly_scaled_depth() {
        let pred = one_channel(3, 1, &[1.0, 2.0, 3.0]);
        let gt = pred.map(|d| 2.5 * d);
        let ones = Image::filled(3, 1, 1, 1.0);
        let c = solve_scale(&pred, &ones, &gt, &ones).unwrap();
        assert!((c.s - 2.5).abs() < 1e-12);
        assert_eq!(c.overlap_count, 3);
    }

    #[test]
    fn scale_ignores_pixels_outside_the_overlap() {
        let pred = one_channel(4, 1, &[1.0, 1.0, 1.0, 1.0]);
        let gt = one_channel(4, 1, &[2.0, 9.0, 9.0, 0.0]);
        let alpha = one_channel(4, 1, &[1.0, 0.4, 1.0, 1.0]);
        let mask = one_channel(4, 1, &[1.0, 1.0, 0.0, 1.0]);
        let c = solve_scale(&pred, &alpha, &gt, &mask).unwrap();
        assert_eq!(c.overlap_count, 1);
        assert!((c.s - 2.0).abs() < 1e-12);
    }

    #[test]
    fn scale_matches_a_line_search() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..5 {
            let pred: Vec<f64> = (0..30).map(|_| rng.random_range(0.3..1.2)).collect();
            let gt: Vec<f64> = (0..30).map(|_| rng.random_range(0.3..1.2)).collect();
            let ones = Image::filled(30, 1, 1, 1.0);
            let s = solve_scale(&one_channel(30, 1, &pred), &ones, &one_channel(30, 1, &gt), &ones).unwrap().s;
            let cost = |s: f64| pred.iter().zip(&gt).map(|(p, g)| (s * p - g).powi(2)).sum::<f64>();
            let (mut best, mut best_cost) = (0.0, f64::INFINITY);
            for k in 0..=4_000_000 {
                let c = 0.5 + k as f64 * 1e-6;
                let v = cost(c);
                if v < best_cost {
                    best = c;
                    best_cost = v;
                }
            }
            assert!((s - best).abs() < 1e-5, "{s} vs {best}");
        }
    }

    #[test]
    fn scale_examples() {
        let gt = one_channel(3, 1, &[0.5, 0.7, 0.9]);
        let ones = Image::filled(3, 1, 1, 1.0);
        assert!((solve_scale(&gt, &ones, &gt, &ones).unwrap().s - 1.0).abs() < 1e-15);
        let pred = gt.map(|d| 2.0 * d);
        assert!((solve_scale(&pred, &ones, &gt, &ones).unwrap().s - 0.5).abs() < 1e-15);
        let pivot = Vector3::new(0.3, 0.1, -0.4);
        let g = Gaussian3D {
            mean: pivot + Vector3::<f64>::z(),
            rotation: [0.9, 0.1, 0.0, 0.2],
            scales: Vector3::new(0.01, 0.02, 0.03),
            opacity: 0.4,
            color: Vector3::new(0.1, 0.2, 0.3),
        };
        let gs = GaussianSet::new(vec![g.clone()]);
        let one = ScaleCorrection { s: 1.0, pivot, overlap_count: 1 };
        assert_eq!(apply_scale(&gs, &one).gaussians[0], g);
        let two = ScaleCorrection { s: 2.0, ..one };
        let out = &apply_scale(&gs, &two).gaussians[0];
        assert!((out.mean - (pivot + 2.0 * Vector3::<f64>::z())).norm() < 1e-15);
        assert_eq!(out.scales, g.scales * 2.0);
        assert_eq!((out.rotation, out.opacity, out.color), (g.rotation, g.opacity, g.color));
    }

    #[test]
    fn empty_overlap_is_an_error() {
        let pred = one_channel(2, 1, &[1.0, 1.0]);
        let zero = Image::new(2, 1, 1);
        let ones = Image::filled(2, 1, 1, 1.0);
        assert!(matches!(solve_scale(&pred, &zero, &ones, &ones), Err(Error::EmptyOverlap)));
        assert!(matches!(solve_scale(&pred, &ones, &zero, &ones), Err(Error::EmptyOverlap)));
    }

    #[test]
    fn scale_gradient_matches_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pred: Vec<f64> = (0..12).map(|_| rng.random_range(0.2..1.5)).collect();
        let gt: Vec<f64> = (0..12).map(|_| rng.random_range(0.2..1.5)).collect();
        let ones = Image::filled(4, 3, 1, 1.0);
        let gt = one_channel(4, 3, &gt);
        let (_, grad) = solve_scale_grad(&one_channel(4, 3, &pred), &ones, &gt, &ones).unwrap();
        for i in 0..12 {
            let fd = central_difference(
                |h| {
                    let mut p = pred.clone();
                    p[i] += h;
                    Probe {
                        value: solve_scale(&one_channel(4, 3, &p), &ones, &gt, &ones).unwrap().s,
                        signature: 0,
                    }
                },
                1e-4,
            )
            .unwrap();
            assert!(grad_close(grad[i], fd, 1e-6, 1e-9), "{i}: {} vs {fd}", grad[i]);
        }
    }

    #[test]
    fn scaling_about_the_camera_center_keeps_its_image() {
        let cam = test_camera(24, 20, 30.0);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let gs = random_gaussians(&mut rng, 12, &cam);
        let corr = ScaleCorrection {
            s: 1.7,
            pivot: *cam.center(),
            overlap_count: 1,
        };
        let a = render(&gs, &cam).unwrap();
        let b = render(&apply_scale(&gs, &corr), &cam).unwrap();
        for (x, y) in a.color.data().iter().zip(b.color.data()) {
            assert!((x - y).abs() < 1e-9);
        }
        for (x, y) in a.depth_norm.data().iter().zip(b.depth_norm.data()) {
            assert!((1.7 * x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn apply_scale_adjoint() {
        let cam = test_camera(16, 16, 20.0);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let gs = random_gaussians(&mut rng, 5, &cam);
        let weights: Vec<f64> = (0..gs.len() * crate::gaussian::GAUSSIAN_PARAMS).map(|_| rng.random_range(-1.0..1.0)).collect();
        let objective = |s: f64| -> f64 {
            let corr = ScaleCorrection {
                s,
                pivot: Vector3::new(0.1, -0.2, 0.3),
                overlap_count: 1,
            };
            apply_scale(&gs, &corr).params().iter().zip(&weights).map(|(p, w)| p * w).sum()
        };
        let corr = ScaleCorrection {
            s: 1.3,
            pivot: Vector3::new(0.1, -0.2, 0.3),
            overlap_count: 1,
        };
        let grads: Vec<GaussianGrad> = weights
            .chunks(crate::gaussian::GAUSSIAN_PARAMS)
            .map(|c| {
                let g = Gaussian3D::from_params(c);
                GaussianGrad {
                    mean: g.mean,
                    rotation: g.rotation,
                    scales: g.scales,
                    opacity: g.opacity,
                    color: g.color,
                }
            })
            .collect();
        let (_, d_s) = apply_scale_backward(&gs, &corr, &grads);
        let fd = (objective(1.3 + 1e-5) - objective(1.3 - 1e-5)) / 2e-5;
        assert!(grad_close(d_s, fd, 1e-6, 1e-9), "{d_s} vs {fd}");
    }

    proptest! {
        #[test]
        fn perturbed_boxes_stay_within_bounds(seed in any::<u64>(), mag in 0.0f64..0.2) {
            let face = FaceBox::new(nalgebra::Vector2::new(30.0, 20.0), 16.0);
            let p = perturb_face_box(&face, mag, seed);
            prop_assert!((p.center[0] - 30.0).abs() <= mag * 16.0 + 1e-12);
            prop_assert!((p.center[1] - 20.0).abs() <= mag * 16.0 + 1e-12);
            prop_assert!((p.size / 16.0 - 1.0).abs() <= mag + 1e-12);
            prop_assert_eq!(p, perturb_face_box(&face, mag, seed));
        }
    }

    #[test]
    fn adam_first_step_has_learning_rate_magnitude() {
        let mut adam = Adam::new(3);
        let mut p = vec![0.0, 1.0, 2.0];
        adam.step(&mut p, &[0.5, -3.0, 1e-3], 0.1);
        for (x, want) in p.iter().zip([-0.1, 1.1, 1.9]) {
            assert!((x - want).abs() < 1e-6, "{x} vs {want}");
        }
    }

    #[test]
    fn adam_minimises_a_quadratic() {
        let mut adam = Adam::new(2);
        let mut p = vec![3.0, -2.0];
        for _ in 0..2000 {
            let g = [2.0 * (p[0] - 1.0), 2.0 * (p[1] + 0.5)];
            adam.step(&mut p, &g, 0.05);
        }
        assert!((p[0] - 1.0).abs() < 1e-3 && (p[1] + 0.5).abs() < 1e-3);
    }

    #[test]
    fn cosine_schedule_endpoints() {
        let cfg = FitConfig::default();
        assert!((cfg.learning_rate_at(0) - 1e-2).abs() < 1e-15);
        assert!((cfg.learning_rate_at(cfg.iterations - 1) - 1e-3).abs() < 1e-15);
        let mid = cfg.learning_rate_at((cfg.iterations - 1) / 2);
        assert!((mid - 5.5e-3).abs() < 1e-5);
    }

    #[test]
    fn fit_config_json() {
        let cfg = FitConfig::default();
        let back: FitConfig = serde_json::from_str(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
        let partial: FitConfig = serde_json::from_str(r#"{"iterations": 7}"#).unwrap();
        assert_eq!(partial.iterations, 7);
        assert!(serde_json::from_str::<FitConfig>(r#"{"iters": 7}"#).is_err());
        let bad = FitConfig {
            holdout: 10,
            ..tiny_config()
        };
        assert!(matches!(FitProblem::new(&tiny_sample(), &bad), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn jitter_term_vanishes_without_pairing() {
        let sample = tiny_sample();
        let cfg = FitConfig {
            jitter_pairing: false,
            ..tiny_config()
        };
        let problem = FitProblem::new(&sample, &cfg).unwrap();
        let ev = problem.evaluate(&problem.initial_grid(), 0).unwrap();
        assert_eq!(ev.loss.l_j, 0.0);
        let paired = FitProblem::new(&sample, &tiny_config()).unwrap();
        let ev2 = paired.evaluate(&paired.initial_grid(), 0).unwrap();
        assert!(ev2.loss.l_j > 0.0);
        assert_eq!(ev.loss.l_e, ev2.loss.l_e);
    }

    #[test]
    fn objective_gradient_matches_differences() {
        let sample = tiny_sample();
        let cfg = tiny_config();
        let problem = FitProblem::new(&sample, &cfg).unwrap();
        let mut grid = problem.initial_grid();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for v in grid.raw_mut() {
            *v += rng.random_range(-0.3..0.3);
        }
        let ev = problem.evaluate(&grid, 3).unwrap();
        assert!(ev.scale > 0.0);
        let (mut checked, mut skipped) = (0, 0);
        for _ in 0..40 {
            let i = rng.random_range(0..grid.raw().len());
            let fd = central_difference(
                |h| {
                    let mut g = grid.clone();
                    g.raw_mut()[i] += h;
                    let e = problem.evaluate(&g, 3).unwrap();
                    Probe {
                        value: e.loss.total,
                        signature: e.signature,
                    }
                },
                1e-4,
            );
            match fd {
                Some(fd) => {
                    checked += 1;
                    assert!(grad_close(ev.grad[i], fd, 1e-3, 1e-6), "entry {i}: {} vs {fd}", ev.grad[i]);
                }
                None => skipped += 1,
            }
        }
        assert!(checked >= 30, "checked {checked}, skipped {skipped}");
    }

    #[test]
    fn fitting_reduces_the_loss() {
        let sample = tiny_sample();
        let cfg = FitConfig {
            iterations: 30,
            learning_rate: 0.05,
            learning_rate_final: 0.01,
            ..tiny_config()
        };
        let mut seen = 0;
        let result = fit_with_progress(&sample, &cfg, |_| seen += 1).unwrap();
        assert_eq!(seen, 30);
        assert_eq!(result.trace.len(), 30);
        let first = result.trace[0].loss.total;
        let last = result.trace[29].loss.total;
        assert!(last < 0.8 * first, "{first} -> {last}");
        assert_eq!(result.reconstruction.gaussians.len(), 64);
    }

    #[test]
    fn fitting_is_deterministic() {
        let sample = tiny_sample();
        let a = fit(&sample, &tiny_config()).unwrap();
        let b = fit(&sample, &tiny_config()).unwrap();
        assert_eq!(a.grid.raw(), b.grid.raw());
    }
}
