//! Splatter images: pixel-aligned grids of raw Gaussian parameters.
//!
//! Each pixel of an `H × W` grid stores `K` Gaussians with 15 raw channels
//! each. Decoding places Gaussian `k` of pixel `(i, j)` along that pixel's
//! camera ray at a bounded depth, lets it drift by a bounded offset, and maps
//! the remaining channels through fixed activations. Gaussian `(i, j, k)` has
//! index `(i·W + j)·K + k` in the decoded set.

use std::path::Path;

use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::gaussian::{Gaussian3D, GaussianGrad, GaussianSet};
use crate::image::{BilinearTaps, Image};
use crate::rotation::{matrix_to_quat, quat_mul, quat_mul_left_backward, quat_normalize, quat_normalize_backward};

pub const RAW_CHANNELS: usize = 15;
pub const CH_DEPTH: usize = 0;
pub const CH_OFFSET: usize = 1;
pub const CH_QUAT: usize = 4;
pub const CH_LOGSCALE: usize = 8;
pub const CH_OPACITY: usize = 11;
pub const CH_COLOR: usize = 12;

pub const BLOB_VERSION: u32 = 1;
const BLOB_HEADER: usize = 16;
const MAX_GRID_SIDE: u32 = 4096;
const MAX_LAYERS: u32 = 64;

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeConfig {
    pub z_near: f64,
    pub z_range: f64,
    pub offset_bound: f64,
    pub logscale_min: f64,
    pub logscale_max: f64,
    /// Weight of the colour sampled from the input image versus the decoded one.
    pub color_mix: f64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            z_near: 0.15,
            z_range: 1.5,
            offset_bound: 0.1,
            logscale_min: 1e-4f64.ln(),
            logscale_max: 0.05f64.ln(),
            color_mix: 0.5,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.z_near > 0.0
            && self.z_range > 0.0
            && self.offset_bound >= 0.0
            && self.logscale_min < self.logscale_max
            && (0.0..=1.0).contains(&self.color_mix)
            && [self.z_near, self.z_range, self.offset_bound, self.logscale_min, self.logscale_max]
                .iter()
                .all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("decode config out of range: {self:?}")))
        }
    }

    /// Depth halfway through the decodable range.
    pub fn z_mid(&self) -> f64 {
        self.z_near + 0.5 * self.z_range
    }

    pub fn read_json(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SplatterImage {
    height: usize,
    width: usize,
    layers: usize,
    raw: Vec<f64>,
}

impl SplatterImage {
    pub fn zeros(height: usize, width: usize, layers: usize) -> Self {
        assert!(height > 0 && width > 0 && layers > 0, "splatter image dimensions must be positive");
        Self {
            height,
            width,
            layers,
            raw: vec![0.0; height * width * layers * RAW_CHANNELS],
        }
    }

    pub fn from_raw(height: usize, width: usize, layers: usize, raw: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || layers == 0 {
            return Err(Error::DimensionMismatch("splatter image dimensions must be positive".into()));
        }
        if raw.len() != height * width * layers * RAW_CHANNELS {
            return Err(Error::DimensionMismatch(format!(
                "raw grid has {} values, expected {}",
                raw.len(),
                height * width * layers * RAW_CHANNELS
            )));
        }
        if !raw.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidConfig("raw splatter values must be finite".into()));
        }
        Ok(Self {
            height,
            width,
            layers,
            raw,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn gaussian_count(&self) -> usize {
        self.height * self.width * self.layers
    }

    pub fn raw(&self) -> &[f64] {
        &self.raw
    }

    pub fn raw_mut(&mut self) -> &mut [f64] {
        &mut self.raw
    }

    /// Raw channels of Gaussian `(row, col, layer)`.
    pub fn gaussian_raw(&self, row: usize, col: usize, layer: usize) -> &[f64] {
        let g = (row * self.width + col) * self.layers + layer;
        &self.raw[g * RAW_CHANNELS..(g + 1) * RAW_CHANNELS]
    }

    pub fn gaussian_raw_mut(&mut self, row: usize, col: usize, layer: usize) -> &mut [f64] {
        let g = (row * self.width + col) * self.layers + layer;
        &mut self.raw[g * RAW_CHANNELS..(g + 1) * RAW_CHANNELS]
    }

    /// Mean of `sigmoid(opacity_raw)` over each layer.
    pub fn layer_mean_opacity(&self) -> Vec<f64> {
        let mut sums = vec![0.0; self.layers];
        for (g, chunk) in self.raw.chunks_exact(RAW_CHANNELS).enumerate() {
            sums[g % self.layers] += sigmoid(chunk[CH_OPACITY]);
        }
        let n = (self.height * self.width) as f64;
        sums.into_iter().map(|s| s / n).collect()
    }

    /// Serializes to the binary blob: a 16-byte little-endian header
    /// `(H, W, K, version)` followed by `H·W·K·15` little-endian f32 values.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(BLOB_HEADER + self.raw.len() * 4);
        for v in [self.height as u32, self.width as u32, self.layers as u32, BLOB_VERSION] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for &v in &self.raw {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < BLOB_HEADER {
            return Err(Error::format("splatter", "truncated header"));
        }
        let word = |k: usize| u32::from_le_bytes([bytes[4 * k], bytes[4 * k + 1], bytes[4 * k + 2], bytes[4 * k + 3]]);
        let (h, w, k, version) = (word(0), word(1), word(2), word(3));
        if version != BLOB_VERSION {
            return Err(Error::format("splatter", format!("unsupported version {version}")));
        }
        if h == 0 || w == 0 || k == 0 || h > MAX_GRID_SIDE || w > MAX_GRID_SIDE || k > MAX_LAYERS {
            return Err(Error::format("splatter", format!("dimensions {h}x{w}x{k} out of range")));
        }
        let count = h as usize * w as usize * k as usize * RAW_CHANNELS;
        let payload = &bytes[BLOB_HEADER..];
        if payload.len() != count * 4 {
            return Err(Error::format(
                "splatter",
                format!("expected {} payload bytes, found {}", count * 4, payload.len()),
            ));
        }
        let mut raw = Vec::with_capacity(count);
        for c in payload.chunks_exact(4) {
            let v = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
            if !v.is_finite() {
                return Err(Error::format("splatter", "non-finite raw value"));
            }
            raw.push(v as f64);
        }
        Self::from_raw(h as usize, w as usize, k as usize, raw)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn check_dims(sp: &SplatterImage, cam: &Camera) -> Result<()> {
    if cam.width() as usize != sp.width || cam.height() as usize != sp.height {
        return Err(Error::DimensionMismatch(format!(
            "camera is {}x{}, splatter image is {}x{}",
            cam.width(),
            cam.height(),
            sp.width,
            sp.height
        )));
    }
    Ok(())
}

/// Decodes every raw Gaussian into a world-space Gaussian seen by `cam`.
///
/// Offsets and rotations are expressed in the camera frame, so decoding with
/// a rotated camera rotates the whole set rigidly.
pub fn decode(sp: &SplatterImage, cam: &Camera, cfg: &DecodeConfig) -> Result<GaussianSet> {
    check_dims(sp, cam)?;
    let rot = cam.rotation();
    let cam_quat = matrix_to_quat(rot);
    let mut gaussians = Vec::with_capacity(sp.gaussian_count());
    for row in 0..sp.height {
        for col in 0..sp.width {
            let ray = cam.ray(&Camera::pixel_center(row, col));
            for layer in 0..sp.layers {
                let r = sp.gaussian_raw(row, col, layer);
                let z = cfg.z_near + cfg.z_range * sigmoid(r[CH_DEPTH]);
                let offset = Vector3::new(r[CH_OFFSET].tanh(), r[CH_OFFSET + 1].tanh(), r[CH_OFFSET + 2].tanh())
                    * cfg.offset_bound;
                let local = quat_normalize(&[r[CH_QUAT], r[CH_QUAT + 1], r[CH_QUAT + 2], r[CH_QUAT + 3]]);
                let ls = |c: usize| r[CH_LOGSCALE + c].clamp(cfg.logscale_min, cfg.logscale_max).exp();
                gaussians.push(Gaussian3D {
                    mean: cam.center() + ray * z + rot * offset,
                    rotation: quat_normalize(&quat_mul(&cam_quat, &local)),
                    scales: Vector3::new(ls(0), ls(1), ls(2)),
                    opacity: sigmoid(r[CH_OPACITY]),
                    color: Vector3::new(sigmoid(r[CH_COLOR]), sigmoid(r[CH_COLOR + 1]), sigmoid(r[CH_COLOR + 2])),
                });
            }
        }
    }
    Ok(GaussianSet::new(gaussians))
}

/// Adjoint of [`decode`]: gradients w.r.t. the decoded Gaussians mapped back
/// to the raw grid (same layout as [`SplatterImage::raw`]).
pub fn decode_backward(
    sp: &SplatterImage,
    cam: &Camera,
    cfg: &DecodeConfig,
    grads: &[GaussianGrad],
) -> Result<Vec<f64>> {
    check_dims(sp, cam)?;
    if grads.len() != sp.gaussian_count() {
        return Err(Error::LengthMismatch {
            left: grads.len(),
            right: sp.gaussian_count(),
        });
    }
    let rot = cam.rotation();
    let cam_quat = matrix_to_quat(rot);
    let mut out = vec![0.0; sp.raw.len()];
    for row in 0..sp.height {
        for col in 0..sp.width {
            let ray = cam.ray(&Camera::pixel_center(row, col));
            for layer in 0..sp.layers {
                let g = (row * sp.width + col) * sp.layers + layer;
                let r = sp.gaussian_raw(row, col, layer);
                let d = &grads[g];
                let o = &mut out[g * RAW_CHANNELS..(g + 1) * RAW_CHANNELS];

                let s = sigmoid(r[CH_DEPTH]);
                o[CH_DEPTH] = d.mean.dot(&ray) * cfg.z_range * s * (1.0 - s);

                let d_offset = rot.transpose() * d.mean;
                for c in 0..3 {
                    let t = r[CH_OFFSET + c].tanh();
                    o[CH_OFFSET + c] = d_offset[c] * cfg.offset_bound * (1.0 - t * t);
                }

                let raw_q = [r[CH_QUAT], r[CH_QUAT + 1], r[CH_QUAT + 2], r[CH_QUAT + 3]];
                let local = quat_normalize(&raw_q);
                let composed = quat_mul(&cam_quat, &local);
                // The outer normalization is the identity on unit quaternions,
                // but its adjoint still projects out the radial component.
                let d_composed = quat_normalize_backward(&composed, &d.rotation);
                let d_local = quat_mul_left_backward(&cam_quat, &d_composed);
                let d_raw_q = quat_normalize_backward(&raw_q, &d_local);
                o[CH_QUAT..CH_QUAT + 4].copy_from_slice(&d_raw_q);

                for c in 0..3 {
                    let v = r[CH_LOGSCALE + c];
                    o[CH_LOGSCALE + c] = if v >= cfg.logscale_min && v <= cfg.logscale_max {
                        d.scales[c] * v.exp()
                    } else {
                        0.0
                    };
                }

                let so = sigmoid(r[CH_OPACITY]);
                o[CH_OPACITY] = d.opacity * so * (1.0 - so);
                for c in 0..3 {
                    let sc = sigmoid(r[CH_COLOR + c]);
                    o[CH_COLOR + c] = d.color[c] * sc * (1.0 - sc);
                }
            }
        }
    }
    Ok(out)
}

/// Where a Gaussian reprojects into the sampling image, if inside it.
fn reprojection(g: &Gaussian3D, cam: &Camera) -> Option<(BilinearTaps, nalgebra::Vector3<f64>)> {
    let t = cam.world_to_camera(&g.mean);
    if !(t.z > crate::camera::MIN_PROJECT_DEPTH) {
        return None;
    }
    let px = cam.project_camera_point(&t);
    if !cam.contains_pixel(&px) {
        return None;
    }
    Some((BilinearTaps::new(px.x, px.y, cam.width() as usize, cam.height() as usize), t))
}

fn check_image(image: &Image, cam: &Camera) -> Result<()> {
    if image.width() != cam.width() as usize || image.height() != cam.height() as usize || image.channels() < 3 {
        return Err(Error::DimensionMismatch(format!(
            "sampling image is {}x{}x{}, camera is {}x{}",
            image.width(),
            image.height(),
            image.channels(),
            cam.width(),
            cam.height()
        )));
    }
    Ok(())
}

/// Blends each Gaussian's colour with a bilinear sample of `image` where its
/// mean reprojects into `cam`.
pub fn direct_color_sample(gs: &GaussianSet, image: &Image, cam: &Camera, cfg: &DecodeConfig) -> Result<GaussianSet> {
    check_image(image, cam)?;
    let m = cfg.color_mix;
    if m == 0.0 {
        return Ok(gs.clone());
    }
    let gaussians = gs
        .gaussians
        .iter()
        .map(|g| {
            let mut out = g.clone();
            if let Some((taps, _)) = reprojection(g, cam) {
                for c in 0..3 {
                    let sample = taps.apply(|r, col| image.get(r, col, c));
                    out.color[c] = (1.0 - m) * g.color[c] + m * sample;
                }
            }
            out
        })
        .collect();
    Ok(GaussianSet::new(gaussians))
}

/// Adjoint of [`direct_color_sample`] w.r.t. the input Gaussians (colour and,
/// through the bilinear weights, mean).
pub fn direct_color_sample_backward(
    gs: &GaussianSet,
    image: &Image,
    cam: &Camera,
    cfg: &DecodeConfig,
    grads: &[GaussianGrad],
) -> Result<Vec<GaussianGrad>> {
    check_image(image, cam)?;
    let m = cfg.color_mix;
    let mut out = grads.to_vec();
    if m == 0.0 {
        return Ok(out);
    }
    for (g, (o, d)) in gs.gaussians.iter().zip(out.iter_mut().zip(grads)) {
        let Some((taps, t)) = reprojection(g, cam) else {
            continue;
        };
        o.color = d.color * (1.0 - m);
        let mut d_px = nalgebra::Vector2::zeros();
        for c in 0..3 {
            let (gx, gy) = taps.gradient(|r, col| image.get(r, col, c));
            d_px.x += m * d.color[c] * gx;
            d_px.y += m * d.color[c] * gy;
        }
        let d_t = cam.projection_jacobian(&t).transpose() * d_px;
        o.mean += cam.rotation() * d_t;
    }
    Ok(out)
}

/// Hash of which bilinear cell (if any) every Gaussian samples; equal
/// signatures mean [`direct_color_sample`] stays on one smooth branch.
pub fn color_sample_signature(gs: &GaussianSet, cam: &Camera) -> u64 {
    use std::hash::{DefaultHasher, Hash, Hasher};
    let mut h = DefaultHasher::new();
    for (i, g) in gs.gaussians.iter().enumerate() {
        if let Some((taps, _)) = reprojection(g, cam) {
            (i, taps.rows, taps.cols, taps.x_free, taps.y_free).hash(&mut h);
        }
    }
    h.finish()
}

/// Raw grid whose decode covers the frame: mid depth, no offset, identity
/// rotation, one-pixel footprint at mid depth, opacity ≈ 0.73 and small
/// random colour logits.
pub fn init_params(
    height: usize,
    width: usize,
    layers: usize,
    seed: u64,
    focal: f64,
    cfg: &DecodeConfig,
) -> SplatterImage {
    let mut sp = SplatterImage::zeros(height, width, layers);
    let logscale = (2.0 * cfg.z_mid() / focal).ln().clamp(cfg.logscale_min, cfg.logscale_max);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 0.1).expect("valid normal");
    for chunk in sp.raw.chunks_exact_mut(RAW_CHANNELS) {
        chunk[CH_QUAT] = 1.0;
        for c in 0..3 {
            chunk[CH_LOGSCALE + c] = logscale;
        }
        chunk[CH_OPACITY] = 1.0;
        for c in 0..3 {
            chunk[CH_COLOR + c] = normal.sample(&mut rng);
        }
    }
    sp
}

/// Mean decoded opacity of each layer.
pub fn layer_mean_opacity(gs: &GaussianSet, layers: usize) -> Vec<f64> {
    let mut sums = vec![0.0; layers];
    for (i, g) in gs.gaussians.iter().enumerate() {
        sums[i % layers] += g.opacity;
    }
    let per_layer = (gs.len() / layers.max(1)).max(1) as f64;
    sums.into_iter().map(|s| s / per_layer).collect()
}
