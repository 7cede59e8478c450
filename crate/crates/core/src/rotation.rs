//! Quaternion and rotation-matrix helpers.
//!
//! Quaternions are stored as `[w, x, y, z]`. Functions that turn a quaternion
//! into a matrix normalize it first, so any non-zero 4-vector is accepted and
//! gradients are taken through the normalization.

use nalgebra::{Matrix3, Vector3};

pub type Quat = [f64; 4];

pub const IDENTITY_QUAT: Quat = [1.0, 0.0, 0.0, 0.0];

pub fn quat_norm(q: &Quat) -> f64 {
    (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt()
}

/// Unit quaternion in the direction of `q`; the zero vector maps to identity.
pub fn quat_normalize(q: &Quat) -> Quat {
    let n = quat_norm(q);
    if n < 1e-12 || !n.is_finite() {
        return IDENTITY_QUAT;
    }
    [q[0] / n, q[1] / n, q[2] / n, q[3] / n]
}

/// Adjoint of [`quat_normalize`]: maps a gradient w.r.t. the unit quaternion
/// back to the raw one.
pub fn quat_normalize_backward(q: &Quat, d_unit: &Quat) -> Quat {
    let n = quat_norm(q);
    if n < 1e-12 || !n.is_finite() {
        return [0.0; 4];
    }
    let u = [q[0] / n, q[1] / n, q[2] / n, q[3] / n];
    let dot = u[0] * d_unit[0] + u[1] * d_unit[1] + u[2] * d_unit[2] + u[3] * d_unit[3];
    [
        (d_unit[0] - u[0] * dot) / n,
        (d_unit[1] - u[1] * dot) / n,
        (d_unit[2] - u[2] * dot) / n,
        (d_unit[3] - u[3] * dot) / n,
    ]
}

/// Hamilton product `a ⊗ b` (apply `b` first, then `a`).
pub fn quat_mul(a: &Quat, b: &Quat) -> Quat {
    let [aw, ax, ay, az] = *a;
    let [bw, bx, by, bz] = *b;
    [
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ]
}

pub fn quat_conj(q: &Quat) -> Quat {
    [q[0], -q[1], -q[2], -q[3]]
}

/// Adjoint of `b ↦ a ⊗ b` for a unit `a`: left multiplication is orthogonal.
pub fn quat_mul_left_backward(a: &Quat, d_out: &Quat) -> Quat {
    quat_mul(&quat_conj(a), d_out)
}

fn unit_quat_to_matrix(u: &Quat) -> Matrix3<f64> {
    let [w, x, y, z] = *u;
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

pub fn quat_to_matrix(q: &Quat) -> Matrix3<f64> {
    unit_quat_to_matrix(&quat_normalize(q))
}

/// Gradient of a scalar w.r.t. the raw quaternion given its gradient `g`
/// w.r.t. `quat_to_matrix(q)`.
pub fn quat_to_matrix_backward(q: &Quat, g: &Matrix3<f64>) -> Quat {
    let u = quat_normalize(q);
    let [w, x, y, z] = u;
    let d_unit = [
        2.0 * (-z * g[(0, 1)] + y * g[(0, 2)] + z * g[(1, 0)] - x * g[(1, 2)] - y * g[(2, 0)]
            + x * g[(2, 1)]),
        2.0 * (y * g[(0, 1)] + z * g[(0, 2)] + y * g[(1, 0)] - 2.0 * x * g[(1, 1)]
            - w * g[(1, 2)]
            + z * g[(2, 0)]
            + w * g[(2, 1)]
            - 2.0 * x * g[(2, 2)]),
        2.0 * (-2.0 * y * g[(0, 0)] + x * g[(0, 1)] + w * g[(0, 2)] + x * g[(1, 0)]
            + z * g[(1, 2)]
            - w * g[(2, 0)]
            + z * g[(2, 1)]
            - 2.0 * y * g[(2, 2)]),
        2.0 * (-2.0 * z * g[(0, 0)] - w * g[(0, 1)] + x * g[(0, 2)] + w * g[(1, 0)]
            - 2.0 * z * g[(1, 1)]
            + y * g[(1, 2)]
            + x * g[(2, 0)]
            + y * g[(2, 1)]),
    ];
    quat_normalize_backward(q, &d_unit)
}

/// Quaternion of a rotation matrix (Shepperd's method), `w ≥ 0`.
pub fn matrix_to_quat(m: &Matrix3<f64>) -> Quat {
    let trace = m[(0, 0)] + m[(1, 1)] + m[(2, 2)];
    let q = if trace > 0.0 {
        let s = (trace + 1.0).sqrt() * 2.0;
        [
            0.25 * s,
            (m[(2, 1)] - m[(1, 2)]) / s,
            (m[(0, 2)] - m[(2, 0)]) / s,
            (m[(1, 0)] - m[(0, 1)]) / s,
        ]
    } else if m[(0, 0)] > m[(1, 1)] && m[(0, 0)] > m[(2, 2)] {
        let s = (1.0 + m[(0, 0)] - m[(1, 1)] - m[(2, 2)]).sqrt() * 2.0;
        [
            (m[(2, 1)] - m[(1, 2)]) / s,
            0.25 * s,
            (m[(0, 1)] + m[(1, 0)]) / s,
            (m[(0, 2)] + m[(2, 0)]) / s,
        ]
    } else if m[(1, 1)] > m[(2, 2)] {
        let s = (1.0 + m[(1, 1)] - m[(0, 0)] - m[(2, 2)]).sqrt() * 2.0;
        [
            (m[(0, 2)] - m[(2, 0)]) / s,
            (m[(0, 1)] + m[(1, 0)]) / s,
            0.25 * s,
            (m[(1, 2)] + m[(2, 1)]) / s,
        ]
    } else {
        let s = (1.0 + m[(2, 2)] - m[(0, 0)] - m[(1, 1)]).sqrt() * 2.0;
        [
            (m[(1, 0)] - m[(0, 1)]) / s,
            (m[(0, 2)] + m[(2, 0)]) / s,
            (m[(1, 2)] + m[(2, 1)]) / s,
            0.25 * s,
        ]
    };
    let q = quat_normalize(&q);
    if q[0] < 0.0 {
        [-q[0], -q[1], -q[2], -q[3]]
    } else {
        q
    }
}

/// Nearest rotation to a nearly orthonormal matrix, via a quaternion round trip.
pub fn orthonormalize(m: &Matrix3<f64>) -> Matrix3<f64> {
    quat_to_matrix(&matrix_to_quat(m))
}

/// Product of two rotations, re-projected onto SO(3).
pub fn compose_rotations(a: &Matrix3<f64>, b: &Matrix3<f64>) -> Matrix3<f64> {
    orthonormalize(&(a * b))
}

pub fn orthonormality_error(m: &Matrix3<f64>) -> f64 {
    (m.transpose() * m - Matrix3::identity()).abs().max()
}

/// Rotation about `axis` (need not be unit) by `angle` radians.
pub fn axis_angle(axis: &Vector3<f64>, angle: f64) -> Matrix3<f64> {
    let a = axis.normalize();
    let (s, c) = (0.5 * angle).sin_cos();
    quat_to_matrix(&[c, a.x * s, a.y * s, a.z * s])
}

/// Smallest rotation taking unit vector `from` onto unit vector `to`.
pub fn rotation_between(from: &Vector3<f64>, to: &Vector3<f64>) -> Matrix3<f64> {
    let f = from.normalize();
    let t = to.normalize();
    let c = f.dot(&t);
    if c > 1.0 - 1e-15 {
        return Matrix3::identity();
    }
    if c < -1.0 + 1e-12 {
        let mut perp = f.cross(&Vector3::x());
        if perp.norm() < 1e-6 {
            perp = f.cross(&Vector3::y());
        }
        return axis_angle(&perp, std::f64::consts::PI);
    }
    // Half-way quaternion: q = (1 + c, f × t), normalized.
    let v = f.cross(&t);
    quat_to_matrix(&[1.0 + c, v.x, v.y, v.z])
}

/// Covariance `R(q) · diag(s²) · R(q)ᵀ` of an anisotropic Gaussian.
pub fn compose_covariance(rotation: &Quat, scales: &Vector3<f64>) -> Matrix3<f64> {
    let r = quat_to_matrix(rotation);
    let m = r * Matrix3::from_diagonal(scales);
    m * m.transpose()
}

/// Adjoint of [`compose_covariance`] for a symmetric upstream gradient.
pub fn compose_covariance_backward(
    rotation: &Quat,
    scales: &Vector3<f64>,
    d_cov: &Matrix3<f64>,
) -> (Quat, Vector3<f64>) {
    let r = quat_to_matrix(rotation);
    let m = r * Matrix3::from_diagonal(scales);
    let sym = 0.5 * (d_cov + d_cov.transpose());
    let d_m = 2.0 * sym * m;
    let mut d_scales = Vector3::zeros();
    let mut d_r = Matrix3::zeros();
    for i in 0..3 {
        for j in 0..3 {
            d_scales[j] += d_m[(i, j)] * r[(i, j)];
            d_r[(i, j)] = d_m[(i, j)] * scales[j];
        }
    }
    (quat_to_matrix_backward(rotation, &d_r), d_scales)
}
