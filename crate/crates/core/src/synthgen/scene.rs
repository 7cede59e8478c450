//! Procedural "heads": textured ellipsoids lit by one directional light.
//!
//! World frame: the head is centred at the origin and faces −z; +y points
//! down, matching the vision camera convention.

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::noise::fractal_noise;
use crate::rotation::axis_angle;

pub const AMBIENT: f64 = 0.3;
pub const DIFFUSE: f64 = 0.7;
const TEXTURE_FREQUENCY: f64 = 30.0;

/// Unit vector the face points along.
pub fn face_axis() -> Vector3<f64> {
    Vector3::new(0.0, 0.0, -1.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ellipsoid {
    pub center: Vector3<f64>,
    pub semi_axes: Vector3<f64>,
    /// World-from-local rotation.
    pub rotation: Matrix3<f64>,
    pub base_color: Vector3<f64>,
    pub texture_seed: u64,
}

/// Nearest intersection of a ray with a primitive.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hit {
    pub t: f64,
    pub point: Vector3<f64>,
    pub normal: Vector3<f64>,
    pub primitive: usize,
}

impl Ellipsoid {
    fn to_local(&self, v: &Vector3<f64>) -> Vector3<f64> {
        (self.rotation.transpose() * v).component_div(&self.semi_axes)
    }

    /// Smallest `t > t_min` with `origin + t·dir` on the surface.
    pub fn intersect(&self, origin: &Vector3<f64>, dir: &Vector3<f64>, t_min: f64) -> Option<f64> {
        let o = self.to_local(&(origin - self.center));
        let d = self.to_local(dir);
        let a = d.norm_squared();
        let b = o.dot(&d);
        let c = o.norm_squared() - 1.0;
        let disc = b * b - a * c;
        if disc < 0.0 || a == 0.0 {
            return None;
        }
        let sq = disc.sqrt();
        [(-b - sq) / a, (-b + sq) / a].into_iter().find(|&t| t > t_min)
    }

    pub fn normal_at(&self, p: &Vector3<f64>) -> Vector3<f64> {
        let local = self.rotation.transpose() * (p - self.center);
        let grad = local.component_div(&self.semi_axes.component_mul(&self.semi_axes));
        (self.rotation * grad).normalize()
    }

    pub fn albedo_at(&self, p: &Vector3<f64>) -> Vector3<f64> {
        let local = self.rotation.transpose() * (p - self.center);
        let n = fractal_noise(self.texture_seed, [local.x, local.y, local.z], TEXTURE_FREQUENCY);
        (self.base_color * (0.6 + 0.8 * n)).map(|v| v.clamp(0.0, 1.0))
    }

    pub fn bounding_radius(&self) -> f64 {
        self.center.norm() + self.semi_axes.max()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProceduralScene {
    pub primitives: Vec<Ellipsoid>,
    /// Unit direction towards the light.
    pub light: Vector3<f64>,
    pub seed: u64,
}

impl ProceduralScene {
    pub fn head(&self) -> &Ellipsoid {
        &self.primitives[0]
    }

    pub fn bounding_radius(&self) -> f64 {
        self.primitives.iter().map(Ellipsoid::bounding_radius).fold(0.0, f64::max)
    }

    pub fn intersect(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<Hit> {
        let mut best: Option<(f64, usize)> = None;
        for (i, p) in self.primitives.iter().enumerate() {
            if let Some(t) = p.intersect(origin, dir, 1e-9) {
                if best.is_none_or(|(bt, _)| t < bt) {
                    best = Some((t, i));
                }
            }
        }
        best.map(|(t, i)| {
            let point = origin + dir * t;
            Hit {
                t,
                point,
                normal: self.primitives[i].normal_at(&point),
                primitive: i,
            }
        })
    }

    /// Lambertian radiance at a hit.
    pub fn shade(&self, hit: &Hit) -> Vector3<f64> {
        let albedo = self.primitives[hit.primitive].albedo_at(&hit.point);
        albedo * (AMBIENT + DIFFUSE * hit.normal.dot(&self.light).max(0.0))
    }
}

fn random_color(rng: &mut impl Rng, lo: f64, hi: f64) -> Vector3<f64> {
    Vector3::new(rng.random_range(lo..hi), rng.random_range(lo..hi), rng.random_range(lo..hi))
}

/// A head ellipsoid at the origin with 2–5 smaller features on its front.
pub fn build_scene(seed: u64) -> ProceduralScene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let head_axes = Vector3::new(
        rng.random_range(0.09..=0.11),
        rng.random_range(0.09..=0.11),
        rng.random_range(0.09..=0.11),
    );
    let head_rot = axis_angle(&Vector3::y(), rng.random_range(-0.2..0.2));
    let mut primitives = vec![Ellipsoid {
        center: Vector3::zeros(),
        semi_axes: head_axes,
        rotation: head_rot,
        base_color: random_color(&mut rng, 0.45, 0.85),
        texture_seed: rng.random(),
    }];
    let features = rng.random_range(2..=5);
    for _ in 0..features {
        // Direction within 60 degrees of the face axis.
        let polar = rng.random_range(0.0..60f64.to_radians());
        let azimuth = rng.random_range(0.0..std::f64::consts::TAU);
        let dir = Vector3::new(polar.sin() * azimuth.cos(), polar.sin() * azimuth.sin(), -polar.cos());
        // Scale the direction onto the head surface.
        let local = head_rot.transpose() * dir;
        let r = 1.0 / local.component_div(&head_axes).norm();
        let axes = Vector3::new(
            rng.random_range(0.015..0.035),
            rng.random_range(0.015..0.035),
            rng.random_range(0.015..0.035),
        );
        let sink = 0.3 * axes.min();
        primitives.push(Ellipsoid {
            center: dir * (r - sink),
            semi_axes: axes,
            rotation: axis_angle(
                &Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), 1.0),
                rng.random_range(-1.0..1.0),
            ),
            base_color: random_color(&mut rng, 0.1, 0.95),
            texture_seed: rng.random(),
        });
    }
    let light = Vector3::new(rng.random_range(-0.5..0.5), rng.random_range(-0.8..-0.2), -1.0).normalize();
    ProceduralScene {
        primitives,
        light,
        seed,
    }
}
