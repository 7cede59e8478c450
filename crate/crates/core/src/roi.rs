//! Face-centred virtual cameras.
//!
//! The ROI camera shares the source camera's optical center, is rotated to
//! look at the face, and has a field of view three times the face's angular
//! size. Because the centers coincide, source and ROI images are related by
//! a homography.
//!
//! Gaussians are decoded with the *canonical* ROI camera: ROI intrinsics but
//! the source camera's pose. Rotating them by `R_roi · R_src⁻¹` about the
//! shared center ([`gaussians_to_source_frame`]) places them where the real
//! ROI camera saw them.

use nalgebra::{Matrix3, Vector2, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::{look_rotation, Camera};
use crate::error::{Error, Result};
use crate::gaussian::{Gaussian3D, GaussianGrad, GaussianSet};
use crate::image::{BilinearTaps, Image};
use crate::rotation::{matrix_to_quat, quat_mul, quat_mul_left_backward};

const CENTER_TOL: f64 = 1e-9;
const FOV_PER_FACE: f64 = 3.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaceBox {
    pub center: [f64; 2],
    pub size: f64,
}

impl FaceBox {
    pub fn new(center: Vector2<f64>, size: f64) -> Self {
        Self {
            center: [center.x, center.y],
            size,
        }
    }

    pub fn center(&self) -> Vector2<f64> {
        Vector2::from(self.center)
    }

    pub fn validate(&self, cam: &Camera) -> Result<()> {
        if !(self.size.is_finite() && self.size > 0.0) {
            return Err(Error::InvalidBox(format!("size must be positive, got {}", self.size)));
        }
        if !self.center.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidBox("non-finite center".into()));
        }
        if !cam.contains_pixel(&self.center()) {
            return Err(Error::BoxOutsideFrustum);
        }
        Ok(())
    }

    pub fn read_json(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoiMapping {
    pub cam_roi: Camera,
    pub cam_src: Camera,
    /// Maps homogeneous ROI pixel coordinates to source pixel coordinates.
    pub homography: Matrix3<f64>,
    pub normalized_focal: f64,
}

impl RoiMapping {
    /// ROI intrinsics with the source camera's pose; the frame splatter
    /// images are decoded in.
    pub fn decode_camera(&self) -> Camera {
        self.cam_roi
            .with_pose(*self.cam_src.rotation(), *self.cam_src.center())
            .expect("source pose is valid")
    }

    /// Source pixel seen by ROI pixel coordinate `p`, or `None` when the ray
    /// points behind the source camera.
    pub fn roi_to_source(&self, p: &Vector2<f64>) -> Option<Vector2<f64>> {
        apply_homography(&self.homography, p)
    }

    pub fn source_to_roi(&self, p: &Vector2<f64>) -> Option<Vector2<f64>> {
        let inv = self.homography.try_inverse()?;
        apply_homography(&inv, p)
    }

    /// Angle between the optical axis and the image border, full width.
    pub fn fov(&self) -> f64 {
        2.0 * (self.cam_roi.width() as f64 / (2.0 * self.cam_roi.focal())).atan()
    }
}

fn apply_homography(h: &Matrix3<f64>, p: &Vector2<f64>) -> Option<Vector2<f64>> {
    let v = h * Vector3::new(p.x, p.y, 1.0);
    if !(v.z > 1e-12) {
        return None;
    }
    Some(Vector2::new(v.x / v.z, v.y / v.z))
}

/// Angular diameter of the face about its center ray.
pub fn face_angle(cam_src: &Camera, face: &FaceBox) -> f64 {
    2.0 * (face.size / (2.0 * cam_src.focal())).atan()
}

pub fn build_roi_camera(cam_src: &Camera, face: &FaceBox, out_size: u32) -> Result<RoiMapping> {
    face.validate(cam_src)?;
    if out_size == 0 {
        return Err(Error::InvalidConfig("ROI size must be positive".into()));
    }
    let fov = FOV_PER_FACE * face_angle(cam_src, face);
    if fov >= std::f64::consts::PI {
        return Err(Error::BoxOutsideFrustum);
    }
    let focal = (out_size as f64 / 2.0) / (fov / 2.0).tan();
    let forward = cam_src.ray(&face.center());
    let src_down = cam_src.rotation().column(1).into_owned();
    let rotation = look_rotation(&forward, &src_down).map_err(|_| Error::BoxOutsideFrustum)?;
    let cam_roi = Camera::symmetric(rotation, *cam_src.center(), focal, out_size, out_size)?;
    let homography =
        cam_src.intrinsics() * cam_src.rotation().transpose() * cam_roi.rotation() * cam_roi.intrinsics_inverse();
    if !(homography.determinant().abs() > 1e-12) {
        return Err(Error::InvalidCamera("degenerate ROI homography".into()));
    }
    Ok(RoiMapping {
        normalized_focal: cam_roi.normalized_focal(),
        cam_roi,
        cam_src: cam_src.clone(),
        homography,
    })
}

fn with_alpha_channels(channels: usize) -> usize {
    if channels == 3 {
        4
    } else {
        channels
    }
}

/// Samples `src` through the pixel map `map` (output pixel → source pixel).
/// RGB input gains an alpha channel; unmapped pixels are all zeros.
fn resample(src: &Image, width: usize, height: usize, map: impl Fn(&Vector2<f64>) -> Option<Vector2<f64>> + Sync) -> Image {
    let channels = with_alpha_channels(src.channels());
    let add_alpha = channels != src.channels();
    let (sw, sh) = (src.width() as f64, src.height() as f64);
    let mut data = vec![0.0; width * height * channels];
    data.par_chunks_mut(width * channels).enumerate().for_each(|(row, out)| {
        for col in 0..width {
            let Some(p) = map(&Camera::pixel_center(row, col)) else {
                continue;
            };
            if !(p.x >= 0.0 && p.y >= 0.0 && p.x <= sw && p.y <= sh) {
                continue;
            }
            let taps = BilinearTaps::new(p.x, p.y, src.width(), src.height());
            let px = &mut out[col * channels..(col + 1) * channels];
            for (c, v) in px.iter_mut().enumerate().take(src.channels()) {
                *v = taps.apply(|r, cc| src.get(r, cc, c));
            }
            if add_alpha {
                px[3] = 1.0;
            }
        }
    });
    Image::from_vec(width, height, channels, data).expect("sized")
}

/// Warps a source image into the ROI (`out_size × out_size`).
pub fn warp_image(src: &Image, mapping: &RoiMapping, out_size: usize) -> Image {
    resample(src, out_size, out_size, |p| {
        mapping.roi_to_source(&(p * (mapping.cam_roi.width() as f64 / out_size as f64)))
    })
}

/// Warps an ROI image back into a `width × height` source image.
pub fn warp_to_source(roi: &Image, mapping: &RoiMapping, width: usize, height: usize) -> Image {
    let scale = roi.width() as f64 / mapping.cam_roi.width() as f64;
    let inv = mapping.homography.try_inverse().expect("homography is invertible");
    resample(roi, width, height, |p| apply_homography(&inv, p).map(|q| q * scale))
}

/// Per-pixel ROI-frame ray directions plus the normalized focal length and
/// its inverse (channel 5 is zero).
pub fn conditioning_channels(mapping: &RoiMapping, out_size: usize) -> Image {
    let cam = &mapping.cam_roi;
    let scale = cam.width() as f64 / out_size as f64;
    let nf = mapping.normalized_focal;
    Image::from_fn(out_size, out_size, 6, |row, col, ch| match ch {
        0..=2 => cam.ray_camera(&(Camera::pixel_center(row, col) * scale))[ch],
        3 => nf,
        4 => 1.0 / nf,
        _ => 0.0,
    })
}

fn shared_center_rotation(cam_roi: &Camera, cam_src: &Camera) -> Result<Matrix3<f64>> {
    let gap = (cam_roi.center() - cam_src.center()).norm();
    if !(gap <= CENTER_TOL) {
        return Err(Error::CameraCenterMismatch(gap));
    }
    Ok(cam_roi.rotation() * cam_src.rotation().transpose())
}

fn rotate_about(gs: &GaussianSet, rot: &Matrix3<f64>, center: &Vector3<f64>) -> GaussianSet {
    let q = matrix_to_quat(rot);
    GaussianSet::new(
        gs.gaussians
            .iter()
            .map(|g| Gaussian3D {
                mean: center + rot * (g.mean - center),
                rotation: quat_mul(&q, &g.rotation),
                ..g.clone()
            })
            .collect(),
    )
}

/// Rotates Gaussians decoded in the canonical ROI frame (see
/// [`RoiMapping::decode_camera`]) into the world frame seen by `cam_src`.
pub fn gaussians_to_source_frame(gs: &GaussianSet, cam_roi: &Camera, cam_src: &Camera) -> Result<GaussianSet> {
    let rot = shared_center_rotation(cam_roi, cam_src)?;
    Ok(rotate_about(gs, &rot, cam_src.center()))
}

/// Inverse of [`gaussians_to_source_frame`].
pub fn gaussians_to_roi_frame(gs: &GaussianSet, cam_roi: &Camera, cam_src: &Camera) -> Result<GaussianSet> {
    let rot = shared_center_rotation(cam_roi, cam_src)?;
    Ok(rotate_about(gs, &rot.transpose(), cam_src.center()))
}

/// Adjoint of [`gaussians_to_source_frame`] w.r.t. its input set.
pub fn gaussians_to_source_frame_backward(
    cam_roi: &Camera,
    cam_src: &Camera,
    grads: &[GaussianGrad],
) -> Result<Vec<GaussianGrad>> {
    let rot = shared_center_rotation(cam_roi, cam_src)?;
    let q = matrix_to_quat(&rot);
    let rot_t = rot.transpose();
    Ok(grads
        .iter()
        .map(|d| GaussianGrad {
            mean: rot_t * d.mean,
            rotation: quat_mul_left_backward(&q, &d.rotation),
            ..d.clone()
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::scenes::random_gaussians;
    use crate::rasterizer::render;
    use crate::rotation::axis_angle;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn webcam() -> Camera {
        Camera::new(
            axis_angle(&Vector3::new(0.3, 1.0, 0.1), 0.4),
            Vector3::new(0.1, -0.2, 0.3),
            300.0,
            Vector2::new(158.0, 123.0),
            320,
            240,
        )
        .unwrap()
    }

    fn random_box(rng: &mut impl Rng, cam: &Camera) -> FaceBox {
        FaceBox::new(
            Vector2::new(
                rng.random_range(0.0..cam.width() as f64),
                rng.random_range(0.0..cam.height() as f64),
            ),
            rng.random_range(20.0..150.0),
        )
    }

    #[test]
    fn centered_box_is_a_crop() {
        let cam = webcam();
        let face = FaceBox::new(*cam.principal_point(), 60.0);
        let m = build_roi_camera(&cam, &face, 64).unwrap();
        assert!((m.cam_roi.rotation() - cam.rotation()).abs().max() < 1e-12);
        let h = m.homography / m.homography[(2, 2)];
        assert!(h[(0, 1)].abs() < 1e-12 && h[(1, 0)].abs() < 1e-12);
        assert!(h[(2, 0)].abs() < 1e-15 && h[(2, 1)].abs() < 1e-15);
        assert!((h[(0, 0)] - h[(1, 1)]).abs() < 1e-12);
    }

    #[test]
    fn third_rule_arithmetic() {
        let cam = webcam();
        let size = 2.0 * cam.focal() * 10f64.to_radians().tan();
        let m = build_roi_camera(&cam, &FaceBox::new(Vector2::new(40.0, 200.0), size), 64).unwrap();
        assert!((m.cam_roi.focal() - 32.0 / 30f64.to_radians().tan()).abs() < 1e-9);
        assert!((m.fov() - 60f64.to_radians()).abs() < 1e-12);
    }

    #[test]
    fn shared_center_third_rule_and_box_ray() {
        let cam = webcam();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let face = random_box(&mut rng, &cam);
            let m = build_roi_camera(&cam, &face, 64).unwrap();
            assert_eq!(m.cam_roi.center(), cam.center());
            assert_eq!(*m.cam_roi.principal_point(), Vector2::new(32.0, 32.0));
            assert!((face_angle(&cam, &face) / m.fov() - 1.0 / 3.0).abs() < 1e-9);
            let c = m.roi_to_source(&Vector2::new(32.0, 32.0)).unwrap();
            assert!((c - face.center()).norm() < 1e-6);
        }
    }

    #[test]
    fn homography_matches_ray_projection() {
        let cam = webcam();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = build_roi_camera(&cam, &random_box(&mut rng, &cam), 64).unwrap();
        for _ in 0..1000 {
            let p = Vector2::new(rng.random_range(0.0..64.0), rng.random_range(0.0..64.0));
            let (via_ray, _) = cam.project(&(cam.center() + m.cam_roi.ray(&p))).unwrap();
            assert!((via_ray - m.roi_to_source(&p).unwrap()).norm() < 1e-6);
        }
    }

    #[test]
    fn roll_keeps_source_down_pointing_down() {
        let cam = webcam();
        let m = build_roi_camera(&cam, &FaceBox::new(Vector2::new(300.0, 20.0), 40.0), 64).unwrap();
        let down_src = cam.rotation().column(1);
        let in_roi = m.cam_roi.rotation().transpose() * down_src;
        assert!(in_roi.y > 0.9 && in_roi.x.abs() < 1e-12);
    }

    #[test]
    fn invalid_boxes_are_rejected() {
        let cam = webcam();
        assert!(matches!(
            build_roi_camera(&cam, &FaceBox::new(Vector2::new(-5.0, 10.0), 40.0), 64),
            Err(Error::BoxOutsideFrustum)
        ));
        assert!(matches!(
            build_roi_camera(&cam, &FaceBox::new(Vector2::new(5.0, 10.0), 0.0), 64),
            Err(Error::InvalidBox(_))
        ));
        // A face spanning more than 60 degrees needs a field of view past 180.
        assert!(matches!(
            build_roi_camera(&cam, &FaceBox::new(Vector2::new(5.0, 10.0), 400.0), 64),
            Err(Error::BoxOutsideFrustum)
        ));
    }

    fn identity_mapping(w: u32, h: u32, f: f64) -> RoiMapping {
        let cam = Camera::symmetric(Matrix3::identity(), Vector3::zeros(), f, w, h).unwrap();
        RoiMapping {
            cam_roi: cam.clone(),
            cam_src: cam,
            homography: Matrix3::identity(),
            normalized_focal: f / w as f64,
        }
    }

    fn pattern(w: usize, h: usize) -> Image {
        Image::from_fn(w, h, 3, |r, c, ch| {
            0.5 + 0.4 * ((c as f64 * 0.11 + ch as f64).sin() * (r as f64 * 0.07).cos())
        })
    }

    #[test]
    fn identity_warp_reproduces_input() {
        let src = pattern(32, 32);
        let out = warp_image(&src, &identity_mapping(32, 32, 30.0), 32);
        assert_eq!(out.channels(), 4);
        for r in 0..32 {
            for c in 0..32 {
                for ch in 0..3 {
                    assert!((out.get(r, c, ch) - src.get(r, c, ch)).abs() < 1e-9);
                }
                assert_eq!(out.get(r, c, 3), 1.0);
            }
        }
    }

    #[test]
    fn scaled_warp_of_constant_is_constant() {
        let src = Image::filled(40, 40, 4, 0.37);
        let mut m = identity_mapping(20, 20, 15.0);
        m.homography = Matrix3::new(2.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0, 1.0);
        let out = warp_image(&src, &m, 20);
        assert!(out.data().iter().all(|&v| (v - 0.37).abs() < 1e-12));
    }

    #[test]
    fn outside_samples_are_transparent_black() {
        let src = Image::filled(10, 10, 3, 0.8);
        let mut m = identity_mapping(10, 10, 10.0);
        m.homography = Matrix3::new(1.0, 0.0, 50.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0);
        let out = warp_image(&src, &m, 10);
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    fn psnr(a: &Image, b: &Image, keep: impl Fn(usize, usize) -> bool) -> f64 {
        let mut se = 0.0;
        let mut n = 0usize;
        for r in 0..a.height() {
            for c in 0..a.width() {
                if keep(r, c) {
                    for ch in 0..3 {
                        se += (a.get(r, c, ch) - b.get(r, c, ch)).powi(2);
                        n += 1;
                    }
                }
            }
        }
        assert!(n > 0);
        10.0 * (1.0 / (se / n as f64)).log10()
    }

    #[test]
    fn warp_round_trip_of_smooth_pattern() {
        let src = Image::from_fn(160, 120, 3, |r, c, ch| {
            0.5 + 0.3 * ((c as f64 * 0.05 + ch as f64).sin() * (r as f64 * 0.04).cos())
        });
        let cam = Camera::new(Matrix3::identity(), Vector3::zeros(), 150.0, Vector2::new(80.0, 60.0), 160, 120).unwrap();
        let m = build_roi_camera(&cam, &FaceBox::new(Vector2::new(95.0, 55.0), 40.0), 192).unwrap();
        let roi = warp_image(&src, &m, 192);
        let back = warp_to_source(&roi, &m, 160, 120);
        // Keep pixels whose round trip stays well inside both images.
        let keep = |r: usize, c: usize| {
            let p = Camera::pixel_center(r, c);
            m.source_to_roi(&p)
                .is_some_and(|q| q.x > 2.0 && q.y > 2.0 && q.x < 190.0 && q.y < 190.0)
        };
        let value = psnr(&src, &back, keep);
        assert!(value >= 40.0, "{value}");
    }

    #[test]
    fn conditioning_channels_layout() {
        let cam = webcam();
        let m = build_roi_camera(&cam, &FaceBox::new(Vector2::new(100.0, 80.0), 50.0), 64).unwrap();
        let ch = conditioning_channels(&m, 65);
        assert!((ch.get(32, 32, 0)).abs() < 1e-12 && (ch.get(32, 32, 1)).abs() < 1e-12);
        assert!((ch.get(32, 32, 2) - 1.0).abs() < 1e-12);
        for v in ch.data().chunks(6) {
            assert!((v[3] * v[4] - 1.0).abs() < 1e-12);
            assert_eq!(v[5], 0.0);
        }
        let ch = conditioning_channels(&m, 64);
        let corner = m.cam_roi.ray_camera(&Vector2::new(0.5, 0.5));
        for k in 0..3 {
            assert!((ch.get(0, 0, k) - corner[k]).abs() < 1e-9);
        }
    }

    #[test]
    fn frame_transform_identity_inverse_and_center_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cam = webcam();
        let gs = random_gaussians(&mut rng, 20, &cam);
        let same = gaussians_to_source_frame(&gs, &cam, &cam).unwrap();
        for (a, b) in same.gaussians.iter().zip(&gs.gaussians) {
            assert!((a.mean - b.mean).norm() < 1e-12);
            for k in 0..4 {
                assert!((a.rotation[k] - b.rotation[k]).abs() < 1e-12);
            }
        }
        let m = build_roi_camera(&cam, &random_box(&mut rng, &cam), 64).unwrap();
        let there = gaussians_to_source_frame(&gs, &m.cam_roi, &cam).unwrap();
        let back = gaussians_to_roi_frame(&there, &m.cam_roi, &cam).unwrap();
        for (a, b) in back.params().iter().zip(gs.params()) {
            assert!((a - b).abs() < 1e-12);
        }
        let moved = cam.with_pose(*cam.rotation(), Vector3::new(1.0, 0.0, 0.0)).unwrap();
        assert!(matches!(
            gaussians_to_source_frame(&gs, &moved, &cam),
            Err(Error::CameraCenterMismatch(_))
        ));
    }

    #[test]
    fn cross_render_consistency() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cam = Camera::new(Matrix3::identity(), Vector3::zeros(), 120.0, Vector2::new(81.0, 59.0), 160, 120).unwrap();
        let m = build_roi_camera(&cam, &FaceBox::new(Vector2::new(110.0, 40.0), 45.0), 136).unwrap();
        let canon = m.decode_camera();
        // Large, smooth Gaussians so resampling error stays small.
        let mut gs = random_gaussians(&mut rng, 25, &canon);
        for g in &mut gs.gaussians {
            g.scales *= 3.0;
        }
        let direct = render(&gs, &canon).unwrap();
        let moved = gaussians_to_source_frame(&gs, &m.cam_roi, &cam).unwrap();
        let src_render = render(&moved, &cam).unwrap();
        let warped = warp_image(&src_render.color, &m, 136);
        let value = psnr(&direct.color, &warped, |r, c| {
            m.roi_to_source(&Camera::pixel_center(r, c))
                .is_some_and(|p| cam.contains_pixel(&p))
        });
        assert!(value >= 35.0, "{value}");
    }

    #[test]
    fn frame_transform_backward_is_the_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cam = webcam();
        let m = build_roi_camera(&cam, &random_box(&mut rng, &cam), 64).unwrap();
        let gs = random_gaussians(&mut rng, 5, &cam);
        let weights: Vec<f64> = (0..gs.len() * crate::gaussian::GAUSSIAN_PARAMS)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let objective = |p: &[f64]| {
            let out = gaussians_to_source_frame(&GaussianSet::from_flat(p), &m.cam_roi, &cam).unwrap();
            out.params().iter().zip(&weights).map(|(a, b)| a * b).sum::<f64>()
        };
        let adj: Vec<GaussianGrad> = weights
            .chunks(crate::gaussian::GAUSSIAN_PARAMS)
            .map(|w| {
                let g = Gaussian3D::from_params(w);
                GaussianGrad {
                    mean: g.mean,
                    rotation: g.rotation,
                    scales: g.scales,
                    opacity: g.opacity,
                    color: g.color,
                }
            })
            .collect();
        let analytic = crate::gaussian::flatten_grads(&gaussians_to_source_frame_backward(&m.cam_roi, &cam, &adj).unwrap());
        let base = gs.params();
        for k in 0..base.len() {
            let h = 1e-6;
            let mut p = base.clone();
            p[k] += h;
            let mut q = base.clone();
            q[k] -= h;
            let numeric = (objective(&p) - objective(&q)) / (2.0 * h);
            assert!((numeric - analytic[k]).abs() < 1e-7, "{k}: {numeric} vs {}", analytic[k]);
        }
    }
}
