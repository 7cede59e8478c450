//! Explicit 3D Gaussian primitives and their gradient buffers.

use nalgebra::{Matrix3, Vector3};

use crate::rotation::{compose_covariance, quat_norm, Quat};

/// Number of scalar parameters per Gaussian: mean 3, rotation 4, scales 3,
/// opacity 1, colour 3.
pub const GAUSSIAN_PARAMS: usize = 14;

#[derive(Clone, Debug, PartialEq)]
pub struct Gaussian3D {
    pub mean: Vector3<f64>,
    /// `[w, x, y, z]`, unit norm for decoded Gaussians.
    pub rotation: Quat,
    /// Per-axis standard deviations in meters.
    pub scales: Vector3<f64>,
    pub opacity: f64,
    pub color: Vector3<f64>,
}

impl Gaussian3D {
    pub fn covariance(&self) -> Matrix3<f64> {
        compose_covariance(&self.rotation, &self.scales)
    }

    pub fn to_params(&self) -> [f64; GAUSSIAN_PARAMS] {
        let mut p = [0.0; GAUSSIAN_PARAMS];
        p[0..3].copy_from_slice(self.mean.as_slice());
        p[3..7].copy_from_slice(&self.rotation);
        p[7..10].copy_from_slice(self.scales.as_slice());
        p[10] = self.opacity;
        p[11..14].copy_from_slice(self.color.as_slice());
        p
    }

    pub fn from_params(p: &[f64]) -> Self {
        Self {
            mean: Vector3::new(p[0], p[1], p[2]),
            rotation: [p[3], p[4], p[5], p[6]],
            scales: Vector3::new(p[7], p[8], p[9]),
            opacity: p[10],
            color: Vector3::new(p[11], p[12], p[13]),
        }
    }

    /// Checks the decoded-Gaussian invariants.
    pub fn is_valid(&self) -> bool {
        self.to_params().iter().all(|v| v.is_finite())
            && (quat_norm(&self.rotation) - 1.0).abs() <= 1e-6
            && self.scales.iter().all(|&s| s > 0.0)
            && (0.0..=1.0).contains(&self.opacity)
            && self.color.iter().all(|c| (0.0..=1.0).contains(c))
    }
}

/// Gradient of a scalar w.r.t. one Gaussian, laid out like [`Gaussian3D`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GaussianGrad {
    pub mean: Vector3<f64>,
    pub rotation: Quat,
    pub scales: Vector3<f64>,
    pub opacity: f64,
    pub color: Vector3<f64>,
}

impl GaussianGrad {
    pub fn add_assign(&mut self, other: &GaussianGrad) {
        self.mean += other.mean;
        for k in 0..4 {
            self.rotation[k] += other.rotation[k];
        }
        self.scales += other.scales;
        self.opacity += other.opacity;
        self.color += other.color;
    }

    pub fn to_params(&self) -> [f64; GAUSSIAN_PARAMS] {
        Gaussian3D {
            mean: self.mean,
            rotation: self.rotation,
            scales: self.scales,
            opacity: self.opacity,
            color: self.color,
        }
        .to_params()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GaussianSet {
    pub gaussians: Vec<Gaussian3D>,
}

impl GaussianSet {
    pub fn new(gaussians: Vec<Gaussian3D>) -> Self {
        Self { gaussians }
    }

    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    pub fn zero_grads(&self) -> Vec<GaussianGrad> {
        vec![GaussianGrad::default(); self.gaussians.len()]
    }

    pub fn params(&self) -> Vec<f64> {
        self.gaussians.iter().flat_map(|g| g.to_params()).collect()
    }

    pub fn from_flat(params: &[f64]) -> Self {
        assert_eq!(params.len() % GAUSSIAN_PARAMS, 0);
        Self {
            gaussians: params.chunks_exact(GAUSSIAN_PARAMS).map(Gaussian3D::from_params).collect(),
        }
    }
}

/// Flattens gradients in the same order as [`GaussianSet::params`].
pub fn flatten_grads(grads: &[GaussianGrad]) -> Vec<f64> {
    grads.iter().flat_map(|g| g.to_params()).collect()
}

/// Inverse of [`flatten_grads`].
pub fn unflatten_grads(flat: &[f64]) -> Vec<GaussianGrad> {
    assert_eq!(flat.len() % GAUSSIAN_PARAMS, 0);
    flat.chunks_exact(GAUSSIAN_PARAMS)
        .map(|p| {
            let g = Gaussian3D::from_params(p);
            GaussianGrad {
                mean: g.mean,
                rotation: g.rotation,
                scales: g.scales,
                opacity: g.opacity,
                color: g.color,
            }
        })
        .collect()
}

pub fn add_grads(acc: &mut [GaussianGrad], other: &[GaussianGrad]) {
    assert_eq!(acc.len(), other.len());
    for (a, b) in acc.iter_mut().zip(other) {
        a.add_assign(b);
    }
}
