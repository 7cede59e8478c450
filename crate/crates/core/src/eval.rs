//! Image-quality and stability metrics, and shaded geometry renders.

use nalgebra::{Vector2, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::gaussian::GaussianSet;
use crate::image::Image;
use crate::losses::composite;
use crate::rasterizer::render;
use crate::splatter::SplatterImage;
use crate::synthgen::MultiViewSample;
use crate::training::{perturb_face_box, FitConfig, FitProblem};

/// Returned for identical images.
pub const PSNR_CAP: f64 = 99.0;
const MSE_FLOOR: f64 = 1e-10;
const SSIM_RADIUS: usize = 5;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;
/// Scale inflation applied before rendering geometry.
pub const GEOMETRY_INFLATION: f64 = 1.5;
/// Shade = `GLOSS_LINEAR·c + GLOSS_QUADRATIC·c²` with `c` the cosine to the camera.
pub const GLOSS_LINEAR: f64 = 0.35;
pub const GLOSS_QUADRATIC: f64 = 0.65;

fn check_rgb_pair(x: &Image, y: &Image) -> Result<()> {
    if !x.same_shape(y) || x.channels() != 3 {
        return Err(Error::DimensionMismatch(format!(
            "metric needs two equally sized RGB images, got {}x{}x{} and {}x{}x{}",
            x.width(),
            x.height(),
            x.channels(),
            y.width(),
            y.height(),
            y.channels()
        )));
    }
    Ok(())
}

/// Peak signal-to-noise ratio for peak value 1, over pixels where the
/// optional one-channel mask exceeds 0.5.
pub fn psnr(x: &Image, y: &Image, mask: Option<&Image>) -> Result<f64> {
    check_rgb_pair(x, y)?;
    if let Some(m) = mask {
        if !m.same_size(x) || m.channels() != 1 {
            return Err(Error::DimensionMismatch("mask must be one channel at image size".into()));
        }
    }
    let (mut sum, mut count) = (0.0, 0usize);
    for p in 0..x.pixel_count() {
        if mask.is_some_and(|m| m.data()[p] <= 0.5) {
            continue;
        }
        for c in 0..3 {
            let d = x.data()[3 * p + c] - y.data()[3 * p + c];
            sum += d * d;
        }
        count += 3;
    }
    if count == 0 {
        return Err(Error::EmptyMask);
    }
    let mse = sum / count as f64;
    if mse < MSE_FLOOR {
        return Ok(PSNR_CAP);
    }
    Ok(10.0 * (1.0 / mse).log10())
}

fn luma(x: &Image) -> Vec<f64> {
    x.data().chunks(3).map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]).collect()
}

/// Separable Gaussian blur; weights are renormalised where the window
/// leaves the image.
fn gaussian_blur(v: &[f64], w: usize, h: usize) -> Vec<f64> {
    let kernel: Vec<f64> = (0..=2 * SSIM_RADIUS)
        .map(|i| {
            let d = i as f64 - SSIM_RADIUS as f64;
            (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
        })
        .collect();
    let pass = |src: &[f64], len: usize, stride: usize, count: usize, step: usize| {
        let mut out = vec![0.0; src.len()];
        for line in 0..count {
            for i in 0..len {
                let (mut acc, mut norm) = (0.0, 0.0);
                for (k, &wk) in kernel.iter().enumerate() {
                    let j = i as isize + k as isize - SSIM_RADIUS as isize;
                    if j >= 0 && (j as usize) < len {
                        acc += wk * src[line * step + j as usize * stride];
                        norm += wk;
                    }
                }
                out[line * step + i * stride] = acc / norm;
            }
        }
        out
    };
    let rows = pass(v, w, 1, h, w);
    pass(&rows, h, w, w, 1)
}

/// Mean structural similarity of the luma channels, 11×11 Gaussian window
/// with σ = 1.5 and dynamic range 1.
pub fn ssim(x: &Image, y: &Image) -> Result<f64> {
    check_rgb_pair(x, y)?;
    let (w, h) = (x.width(), x.height());
    let (a, b) = (luma(x), luma(y));
    let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(u, v)| u * v).collect::<Vec<_>>();
    let mu_a = gaussian_blur(&a, w, h);
    let mu_b = gaussian_blur(&b, w, h);
    let aa = gaussian_blur(&prod(&a, &a), w, h);
    let bb = gaussian_blur(&prod(&b, &b), w, h);
    let ab = gaussian_blur(&prod(&a, &b), w, h);
    let mut total = 0.0;
    for i in 0..w * h {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = aa[i] - ma * ma;
        let vb = bb[i] - mb * mb;
        let cov = ab[i] - ma * mb;
        total += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2)) / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
    }
    Ok(total / (w * h) as f64)
}

/// Mean per-pixel norm of `(I_t − I_{t−1}) − (R_t − R_{t−1})`, averaged over
/// frame pairs within a sequence and then over sequences (views or
/// subjects).
pub fn jitter_metric(frames_gt: &[Vec<Image>], frames_rd: &[Vec<Image>]) -> Result<f64> {
    if frames_gt.len() != frames_rd.len() || frames_gt.is_empty() {
        return Err(Error::ShapeMismatch(format!(
            "{} ground-truth sequences vs {} rendered",
            frames_gt.len(),
            frames_rd.len()
        )));
    }
    let mut total = 0.0;
    for (gt, rd) in frames_gt.iter().zip(frames_rd) {
        if gt.len() != rd.len() || gt.len() < 2 {
            return Err(Error::ShapeMismatch("each sequence needs at least two aligned frames".into()));
        }
        let first = &gt[0];
        if gt.iter().chain(rd).any(|f| !f.same_shape(first)) {
            return Err(Error::ShapeMismatch("frames within a sequence differ in shape".into()));
        }
        let ch = first.channels();
        let mut seq = 0.0;
        for t in 1..gt.len() {
            let (i1, i0, r1, r0) = (gt[t].data(), gt[t - 1].data(), rd[t].data(), rd[t - 1].data());
            let mut sum = 0.0;
            for p in 0..first.pixel_count() {
                let mut sq = 0.0;
                for c in p * ch..(p + 1) * ch {
                    let d = (i1[c] - i0[c]) - (r1[c] - r0[c]);
                    sq += d * d;
                }
                sum += sq.sqrt();
            }
            seq += sum / first.pixel_count() as f64;
        }
        total += seq / (gt.len() - 1) as f64;
    }
    Ok(total / frames_gt.len() as f64)
}

/// Camera-frame unit normals of the surface implied by the rendered depth of
/// the set with inflated scales, for pixels with alpha above 0.5, and the
/// alpha of that render.
pub fn geometry_normals(gs: &GaussianSet, cam: &Camera) -> Result<(Vec<Option<Vector3<f64>>>, Image)> {
    let inflated = GaussianSet::new(
        gs.gaussians
            .iter()
            .map(|g| {
                let mut g = g.clone();
                g.scales *= GEOMETRY_INFLATION;
                g
            })
            .collect(),
    );
    let out = render(&inflated, cam)?;
    let (w, h) = (cam.width() as usize, cam.height() as usize);
    let point = |row: usize, col: usize, depth: f64| {
        let r = cam.ray_camera(&Camera::pixel_center(row, col));
        r * (depth / r.z)
    };
    let valid = |row: usize, col: usize| out.alpha.get(row, col, 0) > 0.5;
    let normals: Vec<Option<Vector3<f64>>> = (0..w * h)
        .into_par_iter()
        .map(|idx| {
            let (row, col) = (idx / w, idx % w);
            if !valid(row, col) {
                return None;
            }
            let z = out.depth_norm.get(row, col, 0);
            let here = point(row, col, z);
            // Central difference along an axis when both neighbours are on the
            // surface, one-sided otherwise, fronto-parallel as a last resort.
            let tangent = |prev: Option<(usize, usize)>, next: Option<(usize, usize)>, flat: Vector2<f64>| {
                let at = |p: Option<(usize, usize)>| {
                    p.filter(|&(r, c)| valid(r, c)).map(|(r, c)| point(r, c, out.depth_norm.get(r, c, 0)))
                };
                match (at(prev), at(next)) {
                    (Some(a), Some(b)) => (b - a) / 2.0,
                    (None, Some(b)) => b - here,
                    (Some(a), None) => here - a,
                    (None, None) => {
                        let px = Camera::pixel_center(row, col) + flat;
                        let r = cam.ray_camera(&px);
                        r * (z / r.z) - here
                    }
                }
            };
            let tx = tangent(
                col.checked_sub(1).map(|c| (row, c)),
                (col + 1 < w).then_some((row, col + 1)),
                Vector2::x(),
            );
            let ty = tangent(
                row.checked_sub(1).map(|r| (r, col)),
                (row + 1 < h).then_some((row + 1, col)),
                Vector2::y(),
            );
            let mut n = tx.cross(&ty);
            if !(n.norm() > 0.0) {
                n = -Vector3::z();
            }
            n.normalize_mut();
            if n.dot(&here) > 0.0 {
                n = -n;
            }
            Some(n)
        })
        .collect();
    Ok((normals, out.alpha))
}

/// Glossy grey shading of [`geometry_normals`]. RGBA output; RGB is zero
/// where alpha ≤ 0.5.
pub fn geometry_render(gs: &GaussianSet, cam: &Camera) -> Result<Image> {
    let (normals, alpha) = geometry_normals(gs, cam)?;
    let (w, h) = (cam.width() as usize, cam.height() as usize);
    let mut img = Image::new(w, h, 4);
    for (idx, n) in normals.iter().enumerate() {
        let (row, col) = (idx / w, idx % w);
        if let Some(n) = n {
            let c = (-n.z).max(0.0);
            let shade = (GLOSS_LINEAR * c + GLOSS_QUADRATIC * c * c).clamp(0.0, 1.0);
            for ch in 0..3 {
                img.set(row, col, ch, shade);
            }
        }
        img.set(row, col, 3, alpha.get(row, col, 0));
    }
    Ok(img)
}

/// Novel-view sweep angles, degrees.
pub const SWEEP_ANGLES_DEG: [f64; 5] = [-40.0, -20.0, 0.0, 20.0, 40.0];

/// Camera orbiting `center` at `distance`: the direction from `center` to
/// the input camera, rotated by `angle_deg` about the input camera's
/// vertical axis, looking back at `center` with the input camera's roll.
pub fn orbit_camera(
    input: &Camera,
    center: &Vector3<f64>,
    distance: f64,
    angle_deg: f64,
    focal: f64,
    width: u32,
    height: u32,
) -> Result<Camera> {
    let down = input.rotation().column(1).into_owned();
    let dir = crate::rotation::axis_angle(&down, angle_deg.to_radians()) * (input.center() - center).normalize();
    Camera::look_at(center + dir * distance, *center, down, focal, width, height)
}

/// The [`SWEEP_ANGLES_DEG`] cameras of a sample: the orbit is centred on
/// the world origin (the head center of generated samples) at the
/// distance and intrinsics of the first supervision view.
pub fn sweep_cameras(sample: &MultiViewSample) -> Result<Vec<(f64, Camera)>> {
    let reference = sample
        .views
        .first()
        .map(|v| &v.camera)
        .ok_or_else(|| Error::Validation("sample has no supervision views".into()))?;
    let distance = reference.center().norm();
    SWEEP_ANGLES_DEG
        .iter()
        .map(|&a| {
            let cam = orbit_camera(
                &sample.input.camera,
                &Vector3::zeros(),
                distance,
                a,
                reference.focal(),
                reference.width(),
                reference.height(),
            )?;
            Ok((a, cam))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewMetrics {
    /// `input` or `view_k` with `k` counted from 1.
    pub view: String,
    pub held_out: bool,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub views: Vec<ViewMetrics>,
    pub input_psnr: f64,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub held_out_mean_psnr: Option<f64>,
    pub held_out_mean_ssim: Option<f64>,
    pub jitter: Option<f64>,
    pub config: FitConfig,
    pub renders: Vec<String>,
}

/// Renders of a fitted grid in the input view (index 0) and every
/// supervision view, composited over the sample background.
pub struct EvalRenders {
    pub renders: Vec<Image>,
    pub targets: Vec<Image>,
}

fn render_views(problem: &FitProblem, sample: &MultiViewSample, gs: &GaussianSet) -> Result<Vec<Image>> {
    let bg = problem.background();
    std::iter::once(&sample.input)
        .chain(&sample.views)
        .collect::<Vec<_>>()
        .par_iter()
        .map(|v| {
            let out = render(gs, &v.camera)?;
            composite(&out.color, &out.alpha, &bg)
        })
        .collect()
}

pub fn eval_renders(sample: &MultiViewSample, cfg: &FitConfig, grid: &SplatterImage) -> Result<EvalRenders> {
    let problem = FitProblem::new(sample, cfg)?;
    let rec = problem.reconstruct(grid, &sample.face_box)?;
    let bg = problem.background();
    let renders = render_views(&problem, sample, &rec.gaussians)?;
    let targets = std::iter::once(&sample.input)
        .chain(&sample.views)
        .map(|v| composite(&v.color(), &v.alpha(), &bg))
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalRenders { renders, targets })
}

/// Seed of the face-box perturbation at evaluation frame `frame`; disjoint
/// from the seeds used while fitting.
pub fn eval_frame_seed(cfg: &FitConfig, frame: usize) -> u64 {
    crate::synthgen::noise::splitmix(!cfg.seed ^ (frame as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

/// Jitter of held-out renders of a static sample when the face box is
/// re-detected with perturbations over `frames` frames. The ground truth
/// does not move, so only flicker of the reconstruction is measured.
pub fn jitter_eval(sample: &MultiViewSample, cfg: &FitConfig, grid: &SplatterImage, frames: usize) -> Result<f64> {
    let problem = FitProblem::new(sample, cfg)?;
    let views = problem.held_out_views();
    let views = if views.is_empty() { problem.train_views().to_vec() } else { views };
    let bg = problem.background();
    let mut rendered: Vec<Vec<Image>> = vec![Vec::with_capacity(frames); views.len()];
    for t in 0..frames {
        let face = perturb_face_box(&sample.face_box, cfg.perturbation, eval_frame_seed(cfg, t));
        let rec = problem.reconstruct(grid, &face)?;
        for (seq, &v) in rendered.iter_mut().zip(&views) {
            let out = render(&rec.gaussians, &sample.views[v].camera)?;
            seq.push(composite(&out.color, &out.alpha, &bg)?);
        }
    }
    let gt: Vec<Vec<Image>> = views
        .iter()
        .map(|&v| {
            let view = &sample.views[v];
            let img = composite(&view.color(), &view.alpha(), &bg)?;
            Ok(vec![img; frames])
        })
        .collect::<Result<_>>()?;
    jitter_metric(&gt, &rendered)
}

/// PSNR/SSIM of every view plus, when `jitter_frames ≥ 2`, the jitter metric.
pub fn metrics_report(
    sample: &MultiViewSample,
    cfg: &FitConfig,
    grid: &SplatterImage,
    jitter_frames: usize,
) -> Result<(MetricsReport, EvalRenders)> {
    let ev = eval_renders(sample, cfg, grid)?;
    let n_train = sample.views.len() - cfg.holdout.min(sample.views.len());
    let views: Vec<ViewMetrics> = ev
        .renders
        .par_iter()
        .zip(&ev.targets)
        .enumerate()
        .map(|(i, (r, t))| {
            Ok(ViewMetrics {
                view: if i == 0 { "input".into() } else { format!("view_{i}") },
                held_out: i > n_train,
                psnr: psnr(r, t, None)?,
                ssim: ssim(r, t)?,
            })
        })
        .collect::<Result<_>>()?;
    let mean = |vals: Vec<f64>| (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64);
    let held: Vec<&ViewMetrics> = views.iter().filter(|v| v.held_out).collect();
    let report = MetricsReport {
        input_psnr: views[0].psnr,
        mean_psnr: mean(views.iter().map(|v| v.psnr).collect()).unwrap_or(f64::NAN),
        mean_ssim: mean(views.iter().map(|v| v.ssim).collect()).unwrap_or(f64::NAN),
        held_out_mean_psnr: mean(held.iter().map(|v| v.psnr).collect()),
        held_out_mean_ssim: mean(held.iter().map(|v| v.ssim).collect()),
        jitter: if jitter_frames >= 2 {
            Some(jitter_eval(sample, cfg, grid, jitter_frames)?)
        } else {
            None
        },
        config: cfg.clone(),
        renders: Vec::new(),
        views,
    };
    Ok((report, ev))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussian::Gaussian3D;
    use crate::rotation::IDENTITY_QUAT;
    use nalgebra::Matrix3;
    use proptest::prelude::*;

    fn rgb(w: usize, h: usize, f: impl Fn(usize, usize, usize) -> f64) -> Image {
        Image::from_fn(w, h, 3, f)
    }

    #[test]
    fn orbit_keeps_distance_and_turns_by_the_angle() {
        let input = Camera::look_at(Vector3::new(0.2, -0.1, -0.7), Vector3::zeros(), Vector3::y(), 80.0, 96, 64).unwrap();
        for a in SWEEP_ANGLES_DEG {
            let cam = orbit_camera(&input, &Vector3::zeros(), 0.35, a, 60.0, 64, 64).unwrap();
            assert!((cam.center().norm() - 0.35).abs() < 1e-12);
            let cos = cam.center().normalize().dot(&input.center().normalize());
            assert!((cos.acos().to_degrees() - a.abs()).abs() < 1e-9);
            let (px, _) = cam.project(&Vector3::zeros()).unwrap();
            assert!((px - Vector2::new(32.0, 32.0)).norm() < 1e-9);
        }
    }

    #[test]
    fn psnr_examples() {
        let x = rgb(8, 6, |r, c, ch| ((r * 7 + c * 3 + ch) % 10) as f64 / 10.0);
        assert_eq!(psnr(&x, &x, None).unwrap(), 99.0);
        let y = x.map(|v| v + 0.1);
        assert!((psnr(&x, &y, None).unwrap() - 20.0).abs() < 1e-9);
        let y = x.map(|v| v - 0.01);
        assert!((psnr(&x, &y, None).unwrap() - 40.0).abs() < 1e-9);
    }

    #[test]
    fn psnr_mask_selects_pixels() {
        let x = Image::new(4, 1, 3);
        let y = rgb(4, 1, |_, c, _| if c < 2 { 0.1 } else { 0.5 });
        let mask = Image::from_vec(4, 1, 1, vec![1.0, 1.0, 0.0, 0.0]).unwrap();
        assert!((psnr(&x, &y, Some(&mask)).unwrap() - 20.0).abs() < 1e-9);
        let empty = Image::new(4, 1, 1);
        assert!(matches!(psnr(&x, &y, Some(&empty)), Err(Error::EmptyMask)));
        assert!(matches!(psnr(&x, &Image::new(3, 1, 3), None), Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn ssim_of_identical_images_is_one() {
        let x = rgb(20, 16, |r, c, ch| (((r * 13 + c * 7 + ch * 5) % 17) as f64 / 17.0).powi(2));
        assert!((ssim(&x, &x).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ssim_of_constant_images_is_luminance_term() {
        let x = Image::filled(16, 16, 3, 0.4);
        let y = Image::filled(16, 16, 3, 0.5);
        let (m1, m2) = (0.4, 0.5);
        let want = (2.0 * m1 * m2 + SSIM_C1) / (m1 * m1 + m2 * m2 + SSIM_C1);
        assert!((ssim(&x, &y).unwrap() - want).abs() < 1e-9);
    }

    #[test]
    fn ssim_of_inverted_edge_is_negative_locally() {
        let x = rgb(8, 8, |_, c, _| if c < 4 { 0.0 } else { 1.0 });
        let y = x.map(|v| 1.0 - v);
        assert!(ssim(&x, &y).unwrap() < 0.0);
    }

    #[test]
    fn jitter_examples() {
        let a = rgb(6, 5, |r, c, ch| (r + c + ch) as f64 / 20.0);
        let b = rgb(6, 5, |r, c, ch| (r * c + ch) as f64 / 40.0);
        let gt = vec![vec![a.clone(), b.clone()]];
        assert_eq!(jitter_metric(&gt, &gt).unwrap(), 0.0);
        let still = vec![vec![a.clone(), a.clone()]];
        let flicker = vec![vec![a.clone(), rgb(6, 5, |r, c, ch| a.get(r, c, ch) + if ch == 1 { 0.3 } else { 0.0 })]];
        assert!((jitter_metric(&still, &flicker).unwrap() - 0.3).abs() < 1e-12);
        assert!(matches!(jitter_metric(&still, &[vec![a.clone()]]), Err(Error::ShapeMismatch(_))));
        assert!(matches!(jitter_metric(&still, &[]), Err(Error::ShapeMismatch(_))));
    }

    fn image_strategy() -> impl Strategy<Value = Image> {
        proptest::collection::vec(0.0f64..1.0, 5 * 4 * 3).prop_map(|v| Image::from_vec(5, 4, 3, v).unwrap())
    }

    proptest! {
        #[test]
        fn metrics_are_symmetric(x in image_strategy(), y in image_strategy()) {
            prop_assert!((psnr(&x, &y, None).unwrap() - psnr(&y, &x, None).unwrap()).abs() <= 1e-12);
            prop_assert!((ssim(&x, &y).unwrap() - ssim(&y, &x).unwrap()).abs() <= 1e-12);
            let s = ssim(&x, &y).unwrap();
            prop_assert!((-1.0..=1.0).contains(&s));
        }

        #[test]
        fn jitter_ignores_static_offsets(
            frames in proptest::collection::vec(image_strategy(), 4),
            offset in image_strategy(),
        ) {
            let add = |x: &Image| Image::from_vec(5, 4, 3, x.data().iter().zip(offset.data()).map(|(a, b)| a + b).collect()).unwrap();
            let gt = vec![vec![frames[0].clone(), frames[1].clone()]];
            let rd = vec![vec![frames[2].clone(), frames[3].clone()]];
            let gt2 = vec![vec![add(&frames[0]), add(&frames[1])]];
            let rd2 = vec![vec![add(&frames[2]), add(&frames[3])]];
            let a = jitter_metric(&gt, &rd).unwrap();
            let b = jitter_metric(&gt2, &rd2).unwrap();
            prop_assert!((a - b).abs() <= 1e-9);
        }
    }

    fn plane(depth: f64, tilt: f64) -> GaussianSet {
        let mut gs = Vec::new();
        for i in -20..=20 {
            for j in -20..=20 {
                let (x, y) = (i as f64 * 0.01, j as f64 * 0.01);
                gs.push(Gaussian3D {
                    mean: Vector3::new(x, y, depth + tilt * x),
                    rotation: IDENTITY_QUAT,
                    scales: Vector3::new(0.008, 0.008, 0.0005),
                    opacity: 0.9,
                    color: Vector3::repeat(0.5),
                });
            }
        }
        GaussianSet::new(gs)
    }

    fn camera() -> Camera {
        Camera::symmetric(Matrix3::identity(), Vector3::zeros(), 40.0, 32, 32).unwrap()
    }

    #[test]
    fn fronto_parallel_plane_shades_white() {
        let cam = camera();
        let img = geometry_render(&plane(1.0, 0.0), &cam).unwrap();
        let (normals, _) = geometry_normals(&plane(1.0, 0.0), &cam).unwrap();
        for r in 8..24 {
            for c in 8..24 {
                assert!(img.get(r, c, 3) > 0.5);
                assert!((img.get(r, c, 0) - 1.0).abs() < 1e-3, "{}", img.get(r, c, 0));
                let n = normals[r * 32 + c].unwrap();
                assert!((n - Vector3::new(0.0, 0.0, -1.0)).norm() < 0.03);
            }
        }
    }

    #[test]
    fn empty_regions_shade_black_and_normals_are_unit() {
        let cam = camera();
        let gs = plane(1.0, 0.8);
        let img = geometry_render(&gs, &cam).unwrap();
        let (normals, alpha) = geometry_normals(&gs, &cam).unwrap();
        for (i, n) in normals.iter().enumerate() {
            match n {
                Some(n) => assert!((n.norm() - 1.0).abs() < 1e-6),
                None => {
                    assert!(alpha.data()[i] <= 0.5);
                    assert_eq!(img.data()[4 * i], 0.0);
                }
            }
        }
        let far = geometry_render(&GaussianSet::new(Vec::new()), &cam).unwrap();
        assert!(far.data().iter().all(|&v| v == 0.0));
        // A tilted plane faces the camera less and shades darker.
        assert!(img.get(16, 16, 0) < 0.95);
    }
}
