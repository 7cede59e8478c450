//! Pinhole camera with a world pose.
//!
//! Conventions: `rotation` maps camera-frame vectors to the world frame, the
//! camera looks along +z with +x right and +y down, and pixel `(row i, col j)`
//! has its continuous center at `(j + 0.5, i + 0.5)`.

use nalgebra::{Matrix2x3, Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rotation::orthonormality_error;

/// Minimum camera-frame depth accepted by [`Camera::project`].
pub const MIN_PROJECT_DEPTH: f64 = 1e-6;

const ORTHONORMAL_TOL: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CameraJson", into = "CameraJson")]
pub struct Camera {
    rotation: Matrix3<f64>,
    center: Vector3<f64>,
    focal: f64,
    principal_point: Vector2<f64>,
    width: u32,
    height: u32,
}

impl Camera {
    pub fn new(
        rotation: Matrix3<f64>,
        center: Vector3<f64>,
        focal: f64,
        principal_point: Vector2<f64>,
        width: u32,
        height: u32,
    ) -> Result<Self> {
        if !rotation.iter().all(|v| v.is_finite()) || orthonormality_error(&rotation) > ORTHONORMAL_TOL {
            return Err(Error::InvalidCamera("rotation is not orthonormal".into()));
        }
        if rotation.determinant() < 0.0 {
            return Err(Error::InvalidCamera("rotation has a reflection".into()));
        }
        if !(focal.is_finite() && focal > 0.0) {
            return Err(Error::InvalidCamera(format!("focal must be positive, got {focal}")));
        }
        if width == 0 || height == 0 {
            return Err(Error::InvalidCamera("image size must be at least 1x1".into()));
        }
        if !center.iter().chain(principal_point.iter()).all(|v| v.is_finite()) {
            return Err(Error::InvalidCamera("non-finite center or principal point".into()));
        }
        Ok(Self {
            rotation,
            center,
            focal,
            principal_point,
            width,
            height,
        })
    }

    /// Camera with the principal point at the image center.
    pub fn symmetric(
        rotation: Matrix3<f64>,
        center: Vector3<f64>,
        focal: f64,
        width: u32,
        height: u32,
    ) -> Result<Self> {
        let pp = Vector2::new(width as f64 / 2.0, height as f64 / 2.0);
        Self::new(rotation, center, focal, pp, width, height)
    }

    /// Symmetric camera at `center` looking at `target`, with its +y axis as
    /// close as possible to `down`.
    pub fn look_at(
        center: Vector3<f64>,
        target: Vector3<f64>,
        down: Vector3<f64>,
        focal: f64,
        width: u32,
        height: u32,
    ) -> Result<Self> {
        let rotation = look_rotation(&(target - center), &down)?;
        Self::symmetric(rotation, center, focal, width, height)
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn center(&self) -> &Vector3<f64> {
        &self.center
    }

    pub fn focal(&self) -> f64 {
        self.focal
    }

    pub fn principal_point(&self) -> &Vector2<f64> {
        &self.principal_point
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    /// `focal / width`.
    pub fn normalized_focal(&self) -> f64 {
        self.focal / self.width as f64
    }

    pub fn intrinsics(&self) -> Matrix3<f64> {
        Matrix3::new(
            self.focal,
            0.0,
            self.principal_point.x,
            0.0,
            self.focal,
            self.principal_point.y,
            0.0,
            0.0,
            1.0,
        )
    }

    pub fn intrinsics_inverse(&self) -> Matrix3<f64> {
        let f = self.focal;
        Matrix3::new(
            1.0 / f,
            0.0,
            -self.principal_point.x / f,
            0.0,
            1.0 / f,
            -self.principal_point.y / f,
            0.0,
            0.0,
            1.0,
        )
    }

    /// Same intrinsics, different pose.
    pub fn with_pose(&self, rotation: Matrix3<f64>, center: Vector3<f64>) -> Result<Self> {
        Self::new(rotation, center, self.focal, self.principal_point, self.width, self.height)
    }

    pub fn world_to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.tr_mul(&(p - self.center))
    }

    pub fn camera_to_world(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.center
    }

    /// Pixel of a camera-frame point, without a depth check.
    pub fn project_camera_point(&self, t: &Vector3<f64>) -> Vector2<f64> {
        Vector2::new(
            self.principal_point.x + self.focal * t.x / t.z,
            self.principal_point.y + self.focal * t.y / t.z,
        )
    }

    /// Jacobian of [`Self::project_camera_point`] w.r.t. the camera-frame point.
    pub fn projection_jacobian(&self, t: &Vector3<f64>) -> Matrix2x3<f64> {
        let f = self.focal;
        let iz = 1.0 / t.z;
        Matrix2x3::new(f * iz, 0.0, -f * t.x * iz * iz, 0.0, f * iz, -f * t.y * iz * iz)
    }

    /// Projects a world point; returns the pixel and the camera-frame depth.
    pub fn project(&self, p_world: &Vector3<f64>) -> Result<(Vector2<f64>, f64)> {
        let t = self.world_to_camera(p_world);
        if !(t.z > MIN_PROJECT_DEPTH) {
            return Err(Error::NonPositiveDepth(t.z));
        }
        Ok((self.project_camera_point(&t), t.z))
    }

    /// Unit viewing direction through `pixel`, in the camera frame.
    pub fn ray_camera(&self, pixel: &Vector2<f64>) -> Vector3<f64> {
        Vector3::new(
            (pixel.x - self.principal_point.x) / self.focal,
            (pixel.y - self.principal_point.y) / self.focal,
            1.0,
        )
        .normalize()
    }

    /// Unit viewing direction through `pixel`, in the world frame.
    pub fn ray(&self, pixel: &Vector2<f64>) -> Vector3<f64> {
        self.rotation * self.ray_camera(pixel)
    }

    pub fn pixel_center(row: usize, col: usize) -> Vector2<f64> {
        Vector2::new(col as f64 + 0.5, row as f64 + 0.5)
    }

    pub fn contains_pixel(&self, pixel: &Vector2<f64>) -> bool {
        pixel.x >= 0.0 && pixel.y >= 0.0 && pixel.x <= self.width as f64 && pixel.y <= self.height as f64
    }
}

/// World-from-camera rotation whose +z axis is `forward` and whose +y axis is
/// the component of `down` orthogonal to it.
pub fn look_rotation(forward: &Vector3<f64>, down: &Vector3<f64>) -> Result<Matrix3<f64>> {
    let z = forward.normalize();
    let y = down - z * z.dot(down);
    if !(y.norm() > 1e-9) || !z.iter().all(|v| v.is_finite()) {
        return Err(Error::InvalidCamera("degenerate look-at direction".into()));
    }
    let y = y.normalize();
    let x = y.cross(&z);
    Ok(Matrix3::from_columns(&[x, y, z]))
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CameraJson {
    rotation: [f64; 9],
    center: [f64; 3],
    focal: f64,
    pp: [f64; 2],
    width: u32,
    height: u32,
}

impl TryFrom<CameraJson> for Camera {
    type Error = Error;

    fn try_from(j: CameraJson) -> Result<Self> {
        Camera::new(
            Matrix3::from_row_slice(&j.rotation),
            Vector3::from(j.center),
            j.focal,
            Vector2::from(j.pp),
            j.width,
            j.height,
        )
    }
}

impl From<Camera> for CameraJson {
    fn from(c: Camera) -> Self {
        let r = c.rotation;
        CameraJson {
            rotation: [
                r[(0, 0)],
                r[(0, 1)],
                r[(0, 2)],
                r[(1, 0)],
                r[(1, 1)],
                r[(1, 2)],
                r[(2, 0)],
                r[(2, 1)],
                r[(2, 2)],
            ],
            center: [c.center.x, c.center.y, c.center.z],
            focal: c.focal,
            pp: [c.principal_point.x, c.principal_point.y],
            width: c.width,
            height: c.height,
        }
    }
}
