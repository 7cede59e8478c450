//! Random inputs for gradient and equivalence checks.

use nalgebra::{Matrix3, Vector2, Vector3};
use rand::Rng;

use crate::camera::Camera;
use crate::gaussian::{Gaussian3D, GaussianSet};
use crate::rasterizer::RenderAdjoint;
use crate::rotation::quat_normalize;

/// Axis-aligned camera at the origin looking down +z.
pub fn test_camera(width: u32, height: u32, focal: f64) -> Camera {
    Camera::new(
        Matrix3::identity(),
        Vector3::zeros(),
        focal,
        Vector2::new(width as f64 / 2.0, height as f64 / 2.0),
        width,
        height,
    )
    .expect("valid test camera")
}

pub fn random_unit_quat(rng: &mut impl Rng) -> [f64; 4] {
    loop {
        let q = [
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        ];
        let n2: f64 = q.iter().map(|v| v * v).sum();
        if n2 > 0.05 && n2 <= 1.0 {
            return quat_normalize(&q);
        }
    }
}

/// `count` Gaussians inside the frustum of `cam`, between 1.5 and 3 m deep,
/// sized to cover a few pixels.
pub fn random_gaussians(rng: &mut impl Rng, count: usize, cam: &Camera) -> GaussianSet {
    let f = cam.focal();
    let gaussians = (0..count)
        .map(|_| {
            let z = rng.random_range(1.5..3.0);
            let px = Vector2::new(
                rng.random_range(0.1..0.9) * cam.width() as f64,
                rng.random_range(0.1..0.9) * cam.height() as f64,
            );
            let mean = cam.center() + cam.ray(&px) * z;
            // Footprint of 1-4 px standard deviation at depth z.
            let pix = z / f;
            Gaussian3D {
                mean,
                rotation: random_unit_quat(rng),
                scales: Vector3::new(
                    rng.random_range(1.0..4.0) * pix,
                    rng.random_range(1.0..4.0) * pix,
                    rng.random_range(1.0..4.0) * pix,
                ),
                opacity: rng.random_range(0.2..0.95),
                color: Vector3::new(rng.random_range(0.0..1.0), rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)),
            }
        })
        .collect();
    GaussianSet::new(gaussians)
}

/// Random output weights defining the scalar `Σ adjoint · output`.
pub fn random_adjoint(rng: &mut impl Rng, width: usize, height: usize) -> RenderAdjoint {
    let mut adj = RenderAdjoint::zeros(width, height);
    for v in adj.color.iter_mut() {
        *v = rng.random_range(-1.0..1.0);
    }
    for v in adj.alpha.iter_mut() {
        *v = rng.random_range(-1.0..1.0);
    }
    for v in adj.depth_premul.iter_mut() {
        *v = rng.random_range(-0.5..0.5);
    }
    for v in adj.depth_norm.iter_mut() {
        *v = rng.random_range(-0.5..0.5);
    }
    adj
}
