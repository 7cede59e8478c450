//! Camera placement protocol for generated samples.

use nalgebra::{Matrix3, Vector2, Vector3};
use rand::Rng;

use super::scene::{face_axis, ProceduralScene};
use super::DatasetConfig;
use crate::camera::{look_rotation, Camera};
use crate::error::{Error, Result};
use crate::roi::{build_roi_camera, FaceBox};
use crate::rotation::rotation_between;

const MAX_ATTEMPTS: usize = 1000;
/// Margin applied to the projected head extent.
pub const FACE_BOX_MARGIN: f64 = 1.2;
/// Central fraction of the input frame the head center lands in.
pub const CENTRAL_FRACTION: f64 = 0.6;

/// Uniform direction within `max_angle` of unit vector `axis`.
pub fn sample_cap(rng: &mut impl Rng, axis: &Vector3<f64>, max_angle: f64) -> Vector3<f64> {
    let cos_t = rng.random_range(max_angle.cos()..=1.0);
    let sin_t = (1.0 - cos_t * cos_t).max(0.0).sqrt();
    let phi = rng.random_range(0.0..std::f64::consts::TAU);
    let helper = if axis.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
    let u = axis.cross(&helper).normalize();
    let v = axis.cross(&u);
    (axis * cos_t + (u * phi.cos() + v * phi.sin()) * sin_t).normalize()
}

/// Angle between two vectors, radians.
pub fn angle_between(a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    (a.dot(b) / (a.norm() * b.norm())).clamp(-1.0, 1.0).acos()
}

/// Bounding square of the head ellipsoid's projection, enlarged by
/// [`FACE_BOX_MARGIN`].
pub fn face_box(scene: &ProceduralScene, cam: &Camera) -> Result<FaceBox> {
    let head = scene.head();
    let (mut lo, mut hi) = (Vector2::repeat(f64::INFINITY), Vector2::repeat(f64::NEG_INFINITY));
    for i in 0..=32 {
        let theta = std::f64::consts::PI * i as f64 / 32.0;
        for j in 0..64 {
            let phi = std::f64::consts::TAU * j as f64 / 64.0;
            let local = Vector3::new(theta.sin() * phi.cos(), theta.sin() * phi.sin(), theta.cos());
            let p = head.center + head.rotation * local.component_mul(&head.semi_axes);
            let (px, _) = cam.project(&p)?;
            lo = lo.inf(&px);
            hi = hi.sup(&px);
        }
    }
    let size = (hi - lo).max() * FACE_BOX_MARGIN;
    Ok(FaceBox::new((lo + hi) / 2.0, size))
}

pub struct SampledCameras {
    pub input: Camera,
    pub views: Vec<Camera>,
    pub face_box: FaceBox,
}

fn input_camera(rng: &mut impl Rng, scene: &ProceduralScene, cfg: &DatasetConfig) -> Result<Camera> {
    let head = scene.head().center;
    let distance = rng.random_range(cfg.distance_min..=cfg.distance_max);
    let dir = sample_cap(rng, &face_axis(), cfg.face_angle_deg.to_radians());
    let center = head + dir * distance;
    let (w, h) = (cfg.input_width as f64, cfg.input_height as f64);
    let margin = (1.0 - CENTRAL_FRACTION) / 2.0;
    let target = Vector2::new(
        rng.random_range(margin * w..=(1.0 - margin) * w),
        rng.random_range(margin * h..=(1.0 - margin) * h),
    );
    let focal = (w / 2.0) / (cfg.input_fov_deg.to_radians() / 2.0).tan();
    let probe = Camera::symmetric(Matrix3::identity(), Vector3::zeros(), focal, cfg.input_width, cfg.input_height)?;
    let aim = look_rotation(&(head - center), &Vector3::y())?;
    // Rotate so the head center lands on `target` instead of the image center.
    let q = rotation_between(&Vector3::z(), &probe.ray_camera(&target));
    Camera::symmetric(aim * q.transpose(), center, focal, cfg.input_width, cfg.input_height)
}

pub fn sample_cameras(scene: &ProceduralScene, cfg: &DatasetConfig, rng: &mut impl Rng) -> Result<SampledCameras> {
    let head = scene.head().center;
    let view_focal = (cfg.view_size as f64 / 2.0) / (cfg.view_fov_deg.to_radians() / 2.0).tan();
    for _ in 0..MAX_ATTEMPTS {
        let input = input_camera(rng, scene, cfg)?;
        let Ok(face_box) = face_box(scene, &input) else {
            continue;
        };
        if build_roi_camera(&input, &face_box, cfg.view_size).is_err() {
            continue;
        }
        let axis = (input.center() - head).normalize();
        let mut views = Vec::with_capacity(cfg.n_views - 1);
        for _ in 1..cfg.n_views {
            let dir = sample_cap(rng, &axis, cfg.cap_angle_deg.to_radians());
            views.push(Camera::look_at(
                head + dir * cfg.view_distance,
                head,
                Vector3::y(),
                view_focal,
                cfg.view_size,
                cfg.view_size,
            )?);
        }
        return Ok(SampledCameras {
            input,
            views,
            face_box,
        });
    }
    Err(Error::RejectionExhausted(MAX_ATTEMPTS))
}
