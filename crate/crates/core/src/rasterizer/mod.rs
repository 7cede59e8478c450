//! Differentiable Gaussian splat rasterizer.
//!
//! Gaussians are projected with the EWA approximation, sorted front to back
//! once per image and alpha-composited per pixel. The backward pass replays
//! the same per-pixel contribution lists, so forward and backward always see
//! the same support. Work is split into horizontal bands of tiles; gradient
//! partials are kept per band and reduced in band order, which keeps results
//! bit-identical regardless of thread count.

pub mod reference;

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3};
use rayon::prelude::*;

use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::gaussian::{Gaussian3D, GaussianGrad, GaussianSet};
use crate::image::Image;
use crate::rotation::compose_covariance_backward;

#[derive(Clone, Debug, PartialEq)]
pub struct RasterConfig {
    /// Standard deviation (pixels) of the low-pass filter added to every
    /// projected covariance.
    pub dilation: f64,
    pub alpha_cap: f64,
    /// Contributions with a smaller alpha are skipped.
    pub min_alpha: f64,
    /// Mahalanobis radius of the footprint.
    pub footprint_sigma: f64,
    /// Gaussians closer than this (camera z, meters) are culled.
    pub near: f64,
    /// Compositing stops once transmittance drops below this value.
    pub transmittance_floor: f64,
    pub tile_size: usize,
    /// Treat `max(alpha, eps)` in `depth_norm` as a constant in the backward pass.
    pub detach_depth_norm_denominator: bool,
}

impl Default for RasterConfig {
    fn default() -> Self {
        Self {
            dilation: 0.3,
            alpha_cap: 0.999,
            min_alpha: 1.0 / 255.0,
            footprint_sigma: 3.0,
            near: 0.01,
            transmittance_floor: 1e-4,
            tile_size: 16,
            detach_depth_norm_denominator: false,
        }
    }
}

/// Denominator floor of `depth_norm`.
pub const DEPTH_NORM_EPS: f64 = 1e-8;

/// A Gaussian after projection into an image.
#[derive(Clone, Debug, PartialEq)]
pub struct Splat2D {
    pub mean2d: Vector2<f64>,
    /// Screen-space covariance including the low-pass dilation.
    pub cov2d: Matrix2<f64>,
    pub z: f64,
    pub opacity: f64,
    pub color: Vector3<f64>,
    pub source_index: usize,
}

impl Splat2D {
    /// Footprint radius: `footprint_sigma` standard deviations of the major axis.
    pub fn radius(&self, footprint_sigma: f64) -> f64 {
        let (a, b, c) = (self.cov2d[(0, 0)], self.cov2d[(0, 1)], self.cov2d[(1, 1)]);
        let mid = 0.5 * (a + c);
        let disc = (0.25 * (a - c) * (a - c) + b * b).sqrt();
        footprint_sigma * (mid + disc).sqrt()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Projection {
    Visible(Splat2D),
    Culled,
}

/// Internal projection record, carrying what the backward pass needs.
#[derive(Clone, Debug)]
struct Projected {
    splat: Splat2D,
    conic: Matrix2<f64>,
    /// Inclusive pixel index ranges `[col0, col1] × [row0, row1]`.
    cols: (usize, usize),
    rows: (usize, usize),
    t_cam: Vector3<f64>,
    cov_cam: Matrix3<f64>,
    jac: Matrix2x3<f64>,
}

fn project_internal(g: &Gaussian3D, index: usize, cam: &Camera, cfg: &RasterConfig) -> Result<Option<Projected>> {
    let t = cam.world_to_camera(&g.mean);
    if !(t.z > cfg.near) {
        return Ok(None);
    }
    if g.opacity < cfg.min_alpha {
        return Ok(None);
    }
    let w = cam.rotation().transpose();
    let cov_cam = w * g.covariance() * cam.rotation();
    let jac = cam.projection_jacobian(&t);
    let dil = cfg.dilation * cfg.dilation;
    let cov2d = jac * cov_cam * jac.transpose() + Matrix2::identity() * dil;
    let det = cov2d.determinant();
    if !(det >= 1e-12) || !det.is_finite() {
        return Err(Error::SingularCovariance { index, det });
    }
    let mean2d = cam.project_camera_point(&t);
    if !mean2d.iter().all(|v| v.is_finite()) {
        return Ok(None);
    }
    let conic = Matrix2::new(cov2d[(1, 1)], -cov2d[(0, 1)], -cov2d[(1, 0)], cov2d[(0, 0)]) / det;
    let ex = cfg.footprint_sigma * cov2d[(0, 0)].sqrt();
    let ey = cfg.footprint_sigma * cov2d[(1, 1)].sqrt();
    let cols = pixel_span(mean2d.x, ex, cam.width() as usize);
    let rows = pixel_span(mean2d.y, ey, cam.height() as usize);
    let (Some(cols), Some(rows)) = (cols, rows) else {
        return Ok(None);
    };
    Ok(Some(Projected {
        splat: Splat2D {
            mean2d,
            cov2d,
            z: t.z,
            opacity: g.opacity,
            color: g.color,
            source_index: index,
        },
        conic,
        cols,
        rows,
        t_cam: t,
        cov_cam,
        jac,
    }))
}

/// Indices of pixels whose centers lie within `[center - extent, center + extent]`.
fn pixel_span(center: f64, extent: f64, n: usize) -> Option<(usize, usize)> {
    let lo = (center - extent - 0.5).ceil();
    let hi = (center + extent - 0.5).floor();
    if !(hi >= 0.0) || !(lo <= (n - 1) as f64) || lo > hi {
        return None;
    }
    Some((lo.max(0.0) as usize, hi.min((n - 1) as f64) as usize))
}

/// EWA projection of one Gaussian.
pub fn project_gaussian(g: &Gaussian3D, cam: &Camera) -> Result<Projection> {
    project_gaussian_with(g, cam, &RasterConfig::default())
}

pub fn project_gaussian_with(g: &Gaussian3D, cam: &Camera, cfg: &RasterConfig) -> Result<Projection> {
    Ok(match project_internal(g, 0, cam, cfg)? {
        Some(p) => Projection::Visible(p.splat),
        None => Projection::Culled,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RenderStats {
    pub visible: usize,
    pub contributions: u64,
    /// Order-independent hash of every (pixel, splat, clamped) contribution.
    /// Equal signatures mean the same piecewise-smooth branch was taken.
    pub signature: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderOutput {
    pub color: Image,
    pub alpha: Image,
    pub depth_premul: Image,
    pub depth_norm: Image,
    pub stats: RenderStats,
}

impl RenderOutput {
    pub fn width(&self) -> usize {
        self.alpha.width()
    }

    pub fn height(&self) -> usize {
        self.alpha.height()
    }

    /// Premultiplied RGBA.
    pub fn rgba(&self) -> Image {
        self.color.stack(&self.alpha).expect("same size")
    }
}

/// Upstream gradient of a scalar w.r.t. each output plane.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderAdjoint {
    pub width: usize,
    pub height: usize,
    pub color: Vec<f64>,
    pub alpha: Vec<f64>,
    pub depth_premul: Vec<f64>,
    pub depth_norm: Vec<f64>,
}

impl RenderAdjoint {
    pub fn zeros(width: usize, height: usize) -> Self {
        let n = width * height;
        Self {
            width,
            height,
            color: vec![0.0; 3 * n],
            alpha: vec![0.0; n],
            depth_premul: vec![0.0; n],
            depth_norm: vec![0.0; n],
        }
    }

    pub fn is_zero(&self) -> bool {
        [&self.color, &self.alpha, &self.depth_premul, &self.depth_norm]
            .iter()
            .all(|v| v.iter().all(|&x| x == 0.0))
    }
}

#[derive(Clone, Copy, Default)]
struct SplatGrad2D {
    mean2d: [f64; 2],
    conic: [f64; 3],
    opacity: f64,
    color: [f64; 3],
    z: f64,
}

#[derive(Clone, Copy)]
struct Contribution {
    rank: u32,
    alpha: f64,
    gauss: f64,
    clamped: bool,
    dx: f64,
    dy: f64,
    transmittance: f64,
}

/// A forward pass together with everything its backward pass needs.
pub struct RenderPass {
    cfg: RasterConfig,
    cam: Camera,
    projected: Vec<Projected>,
    tiles_x: usize,
    tiles: Vec<Vec<u32>>,
    output: RenderOutput,
    gaussian_count: usize,
}

fn mix64(mut x: u64) -> u64 {
    x ^= x >> 33;
    x = x.wrapping_mul(0xff51_afd7_ed55_8ccd);
    x ^= x >> 33;
    x = x.wrapping_mul(0xc4ce_b9fe_1a85_ec53);
    x ^ (x >> 33)
}

impl RenderPass {
    pub fn forward(gs: &GaussianSet, cam: &Camera, cfg: &RasterConfig) -> Result<Self> {
        let projected: Vec<Option<Projected>> = gs
            .gaussians
            .par_iter()
            .enumerate()
            .map(|(i, g)| project_internal(g, i, cam, cfg))
            .collect::<Result<_>>()?;
        let mut projected: Vec<Projected> = projected.into_iter().flatten().collect();
        projected.sort_by(|a, b| {
            a.splat
                .z
                .total_cmp(&b.splat.z)
                .then(a.splat.source_index.cmp(&b.splat.source_index))
        });

        let (w, h) = (cam.width() as usize, cam.height() as usize);
        let ts = cfg.tile_size.max(1);
        let tiles_x = w.div_ceil(ts);
        let tiles_y = h.div_ceil(ts);
        let mut tiles: Vec<Vec<u32>> = vec![Vec::new(); tiles_x * tiles_y];
        for (rank, p) in projected.iter().enumerate() {
            for ty in p.rows.0 / ts..=p.rows.1 / ts {
                for tx in p.cols.0 / ts..=p.cols.1 / ts {
                    tiles[ty * tiles_x + tx].push(rank as u32);
                }
            }
        }

        let mut pass = RenderPass {
            cfg: cfg.clone(),
            cam: cam.clone(),
            projected,
            tiles_x,
            tiles,
            output: RenderOutput {
                color: Image::new(w, h, 3),
                alpha: Image::new(w, h, 1),
                depth_premul: Image::new(w, h, 1),
                depth_norm: Image::new(w, h, 1),
                stats: RenderStats::default(),
            },
            gaussian_count: gs.len(),
        };
        pass.composite();
        Ok(pass)
    }

    pub fn output(&self) -> &RenderOutput {
        &self.output
    }

    pub fn into_output(self) -> RenderOutput {
        self.output
    }

    pub fn camera(&self) -> &Camera {
        &self.cam
    }

    /// Walks the splats covering a pixel front to back, reporting every
    /// contribution. Returns the final transmittance.
    #[inline]
    fn walk_pixel(&self, row: usize, col: usize, mut visit: impl FnMut(Contribution)) -> f64 {
        let ts = self.cfg.tile_size.max(1);
        let list = &self.tiles[(row / ts) * self.tiles_x + col / ts];
        let px = col as f64 + 0.5;
        let py = row as f64 + 0.5;
        let max_m2 = self.cfg.footprint_sigma * self.cfg.footprint_sigma;
        let mut t = 1.0;
        for &rank in list {
            let p = &self.projected[rank as usize];
            if col < p.cols.0 || col > p.cols.1 || row < p.rows.0 || row > p.rows.1 {
                continue;
            }
            let dx = px - p.splat.mean2d.x;
            let dy = py - p.splat.mean2d.y;
            let q = &p.conic;
            let m2 = q[(0, 0)] * dx * dx + 2.0 * q[(0, 1)] * dx * dy + q[(1, 1)] * dy * dy;
            if !(m2 <= max_m2) {
                continue;
            }
            let gauss = (-0.5 * m2).exp();
            let raw = p.splat.opacity * gauss;
            if raw < self.cfg.min_alpha {
                continue;
            }
            let clamped = raw > self.cfg.alpha_cap;
            let alpha = if clamped { self.cfg.alpha_cap } else { raw };
            visit(Contribution {
                rank,
                alpha,
                gauss,
                clamped,
                dx,
                dy,
                transmittance: t,
            });
            t *= 1.0 - alpha;
            if t < self.cfg.transmittance_floor {
                break;
            }
        }
        t
    }

    fn composite(&mut self) {
        let (w, h) = (self.output.width(), self.output.height());
        let ts = self.cfg.tile_size.max(1);
        let band_rows = ts;
        let mut color = vec![0.0; w * h * 3];
        let mut alpha = vec![0.0; w * h];
        let mut depth = vec![0.0; w * h];
        let this = &*self;
        let stats: Vec<(u64, u64)> = color
            .par_chunks_mut(band_rows * w * 3)
            .zip(alpha.par_chunks_mut(band_rows * w))
            .zip(depth.par_chunks_mut(band_rows * w))
            .enumerate()
            .map(|(band, ((color, alpha), depth))| {
                let mut count = 0u64;
                let mut sig = 0u64;
                let row0 = band * band_rows;
                for local_row in 0..alpha.len() / w {
                    let row = row0 + local_row;
                    for col in 0..w {
                        let mut c = [0.0; 3];
                        let mut a = 0.0;
                        let mut d = 0.0;
                        let mut pixel_hash = 0u64;
                        this.walk_pixel(row, col, |k| {
                            let p = &this.projected[k.rank as usize].splat;
                            let wgt = k.alpha * k.transmittance;
                            c[0] += p.color.x * wgt;
                            c[1] += p.color.y * wgt;
                            c[2] += p.color.z * wgt;
                            a += wgt;
                            d += p.z * wgt;
                            count += 1;
                            pixel_hash = mix64(pixel_hash ^ ((p.source_index as u64 + 1) << 1 | k.clamped as u64));
                        });
                        let i = local_row * w + col;
                        color[3 * i..3 * i + 3].copy_from_slice(&c);
                        alpha[i] = a;
                        depth[i] = d;
                        if pixel_hash != 0 {
                            sig = sig.wrapping_add(mix64(pixel_hash ^ ((row * w + col) as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)));
                        }
                    }
                }
                (count, sig)
            })
            .collect();
        let depth_norm: Vec<f64> = depth
            .iter()
            .zip(&alpha)
            .map(|(&d, &a)| d / a.max(DEPTH_NORM_EPS))
            .collect();
        self.output.stats = RenderStats {
            visible: self.projected.len(),
            contributions: stats.iter().map(|s| s.0).sum(),
            signature: stats.iter().fold(0u64, |acc, s| acc.wrapping_add(s.1)),
        };
        self.output.color = Image::from_vec(w, h, 3, color).expect("sized");
        self.output.alpha = Image::from_vec(w, h, 1, alpha).expect("sized");
        self.output.depth_premul = Image::from_vec(w, h, 1, depth).expect("sized");
        self.output.depth_norm = Image::from_vec(w, h, 1, depth_norm).expect("sized");
    }

    /// Gradient of the scalar whose output adjoint is `adj` w.r.t. every
    /// Gaussian parameter of the rendered set.
    pub fn backward(&self, gs: &GaussianSet, adj: &RenderAdjoint) -> Vec<GaussianGrad> {
        let (w, h) = (self.output.width(), self.output.height());
        assert_eq!((adj.width, adj.height), (w, h), "adjoint size mismatch");
        assert_eq!(gs.len(), self.gaussian_count, "gaussian set changed since forward");
        let n = self.projected.len();
        let band_rows = self.cfg.tile_size.max(1);
        let bands = h.div_ceil(band_rows);

        let partials: Vec<Vec<SplatGrad2D>> = (0..bands)
            .into_par_iter()
            .map(|band| {
                let mut acc = vec![SplatGrad2D::default(); n];
                let mut list: Vec<Contribution> = Vec::with_capacity(64);
                for row in band * band_rows..((band + 1) * band_rows).min(h) {
                    for col in 0..w {
                        let i = row * w + col;
                        let (g_c, g_a, g_d) = self.pixel_adjoint(adj, i);
                        if g_c == [0.0; 3] && g_a == 0.0 && g_d == 0.0 {
                            continue;
                        }
                        list.clear();
                        self.walk_pixel(row, col, |k| list.push(k));
                        let mut suffix = 0.0;
                        for k in list.iter().rev() {
                            let p = &self.projected[k.rank as usize];
                            let s = &p.splat;
                            let weight = g_c[0] * s.color.x + g_c[1] * s.color.y + g_c[2] * s.color.z + g_a + g_d * s.z;
                            let at = k.alpha * k.transmittance;
                            let d_alpha = k.transmittance * weight - suffix / (1.0 - k.alpha);
                            suffix += weight * at;
                            let e = &mut acc[k.rank as usize];
                            e.color[0] += g_c[0] * at;
                            e.color[1] += g_c[1] * at;
                            e.color[2] += g_c[2] * at;
                            e.z += g_d * at;
                            if !k.clamped {
                                e.opacity += d_alpha * k.gauss;
                                let d_power = d_alpha * k.alpha;
                                let q = &p.conic;
                                e.mean2d[0] += d_power * (q[(0, 0)] * k.dx + q[(0, 1)] * k.dy);
                                e.mean2d[1] += d_power * (q[(1, 0)] * k.dx + q[(1, 1)] * k.dy);
                                e.conic[0] += d_power * (-0.5 * k.dx * k.dx);
                                e.conic[1] += d_power * (-k.dx * k.dy);
                                e.conic[2] += d_power * (-0.5 * k.dy * k.dy);
                            }
                        }
                    }
                }
                acc
            })
            .collect();

        let mut total = vec![SplatGrad2D::default(); n];
        for part in &partials {
            for (t, p) in total.iter_mut().zip(part) {
                for k in 0..2 {
                    t.mean2d[k] += p.mean2d[k];
                }
                for k in 0..3 {
                    t.conic[k] += p.conic[k];
                    t.color[k] += p.color[k];
                }
                t.opacity += p.opacity;
                t.z += p.z;
            }
        }

        let per_splat: Vec<(usize, GaussianGrad)> = self
            .projected
            .par_iter()
            .zip(total.par_iter())
            .map(|(p, g2)| (p.splat.source_index, self.splat_backward(&gs.gaussians[p.splat.source_index], p, g2)))
            .collect();
        let mut grads = gs.zero_grads();
        for (idx, g) in per_splat {
            grads[idx].add_assign(&g);
        }
        grads
    }

    /// Per-pixel adjoints of (color, alpha, depth_premul) after folding in
    /// the `depth_norm` adjoint.
    #[inline]
    fn pixel_adjoint(&self, adj: &RenderAdjoint, i: usize) -> ([f64; 3], f64, f64) {
        let g_c = [adj.color[3 * i], adj.color[3 * i + 1], adj.color[3 * i + 2]];
        let mut g_a = adj.alpha[i];
        let mut g_d = adj.depth_premul[i];
        let g_n = adj.depth_norm[i];
        if g_n != 0.0 {
            let a = self.output.alpha.data()[i];
            let d = self.output.depth_premul.data()[i];
            if a > DEPTH_NORM_EPS {
                g_d += g_n / a;
                if !self.cfg.detach_depth_norm_denominator {
                    g_a -= g_n * d / (a * a);
                }
            } else {
                g_d += g_n / DEPTH_NORM_EPS;
            }
        }
        (g_c, g_a, g_d)
    }

    fn splat_backward(&self, g: &Gaussian3D, p: &Projected, g2: &SplatGrad2D) -> GaussianGrad {
        let q = &p.conic;
        let g_conic = Matrix2::new(g2.conic[0], 0.5 * g2.conic[1], 0.5 * g2.conic[1], g2.conic[2]);
        let g_cov2d = -(q * g_conic * q);
        let jac = &p.jac;
        let g_cov_cam: Matrix3<f64> = jac.transpose() * g_cov2d * jac;
        let g_jac: Matrix2x3<f64> = 2.0 * g_cov2d * jac * p.cov_cam;

        let t = &p.t_cam;
        let f = self.cam.focal();
        let iz = 1.0 / t.z;
        let iz2 = iz * iz;
        let iz3 = iz2 * iz;
        let g_mean2d = Vector2::new(g2.mean2d[0], g2.mean2d[1]);
        let mut g_t = jac.transpose() * g_mean2d;
        g_t.z += g2.z;
        g_t.x += g_jac[(0, 2)] * (-f * iz2);
        g_t.y += g_jac[(1, 2)] * (-f * iz2);
        g_t.z += (g_jac[(0, 0)] + g_jac[(1, 1)]) * (-f * iz2)
            + g_jac[(0, 2)] * (2.0 * f * t.x * iz3)
            + g_jac[(1, 2)] * (2.0 * f * t.y * iz3);

        let r = self.cam.rotation();
        let g_cov_world = r * g_cov_cam * r.transpose();
        let (g_rot, g_scales) = compose_covariance_backward(&g.rotation, &g.scales, &g_cov_world);
        GaussianGrad {
            mean: r * g_t,
            rotation: g_rot,
            scales: g_scales,
            opacity: g2.opacity,
            color: Vector3::new(g2.color[0], g2.color[1], g2.color[2]),
        }
    }
}

/// Renders with the default configuration.
pub fn render(gs: &GaussianSet, cam: &Camera) -> Result<RenderOutput> {
    render_with(gs, cam, &RasterConfig::default())
}

pub fn render_with(gs: &GaussianSet, cam: &Camera, cfg: &RasterConfig) -> Result<RenderOutput> {
    Ok(RenderPass::forward(gs, cam, cfg)?.into_output())
}

/// Re-renders `gs` and back-propagates `adj` to the Gaussian parameters.
pub fn render_backward(gs: &GaussianSet, cam: &Camera, adj: &RenderAdjoint) -> Result<Vec<GaussianGrad>> {
    render_backward_with(gs, cam, adj, &RasterConfig::default())
}

pub fn render_backward_with(
    gs: &GaussianSet,
    cam: &Camera,
    adj: &RenderAdjoint,
    cfg: &RasterConfig,
) -> Result<Vec<GaussianGrad>> {
    Ok(RenderPass::forward(gs, cam, cfg)?.backward(gs, adj))
}
