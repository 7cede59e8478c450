//! Naive all-pairs evaluator used as an oracle for the tiled rasterizer.
//!
//! Every pixel visits every Gaussian (no binning, no bounding boxes) and the
//! projection is recomputed here from first principles. The only shared
//! behaviour is the per-contribution thresholds, which are part of the
//! rendering definition.

use nalgebra::{Matrix2, Matrix3, Vector3};

use super::{RasterConfig, DEPTH_NORM_EPS};
use crate::camera::Camera;
use crate::gaussian::GaussianSet;
use crate::image::Image;
use crate::rotation::quat_to_matrix;

pub struct ReferenceRender {
    pub color: Image,
    pub alpha: Image,
    pub depth_premul: Image,
    pub depth_norm: Image,
}

struct Flat {
    mx: f64,
    my: f64,
    qa: f64,
    qb: f64,
    qc: f64,
    z: f64,
    opacity: f64,
    color: [f64; 3],
    index: usize,
}

pub fn render_reference(gs: &GaussianSet, cam: &Camera, cfg: &RasterConfig) -> ReferenceRender {
    let r = cam.rotation();
    let f = cam.focal();
    let pp = cam.principal_point();
    let mut flats: Vec<Flat> = Vec::new();
    for (index, g) in gs.gaussians.iter().enumerate() {
        let t = r.transpose() * (g.mean - cam.center());
        if t.z <= cfg.near || g.opacity < cfg.min_alpha {
            continue;
        }
        let rot = quat_to_matrix(&g.rotation);
        let s = Matrix3::from_diagonal(&Vector3::new(g.scales.x * g.scales.x, g.scales.y * g.scales.y, g.scales.z * g.scales.z));
        let cov_cam = r.transpose() * rot * s * rot.transpose() * r;
        // Screen covariance entries written out by hand.
        let j00 = f / t.z;
        let j02 = -f * t.x / (t.z * t.z);
        let j11 = f / t.z;
        let j12 = -f * t.y / (t.z * t.z);
        let row0 = [j00, 0.0, j02];
        let row1 = [0.0, j11, j12];
        let mut c = Matrix2::zeros();
        for (a, ra) in [row0, row1].iter().enumerate() {
            for (b, rb) in [row0, row1].iter().enumerate() {
                let mut acc = 0.0;
                for i in 0..3 {
                    for k in 0..3 {
                        acc += ra[i] * cov_cam[(i, k)] * rb[k];
                    }
                }
                c[(a, b)] = acc;
            }
        }
        let dil = cfg.dilation * cfg.dilation;
        let (a, b, cc) = (c[(0, 0)] + dil, c[(0, 1)], c[(1, 1)] + dil);
        let det = a * cc - b * b;
        flats.push(Flat {
            mx: pp.x + f * t.x / t.z,
            my: pp.y + f * t.y / t.z,
            qa: cc / det,
            qb: -b / det,
            qc: a / det,
            z: t.z,
            opacity: g.opacity,
            color: [g.color.x, g.color.y, g.color.z],
            index,
        });
    }
    flats.sort_by(|p, q| p.z.total_cmp(&q.z).then(p.index.cmp(&q.index)));

    let (w, h) = (cam.width() as usize, cam.height() as usize);
    let mut color = Image::new(w, h, 3);
    let mut alpha = Image::new(w, h, 1);
    let mut depth = Image::new(w, h, 1);
    let mut depth_norm = Image::new(w, h, 1);
    let max_m2 = cfg.footprint_sigma * cfg.footprint_sigma;
    for row in 0..h {
        for col in 0..w {
            let (px, py) = (col as f64 + 0.5, row as f64 + 0.5);
            let mut t = 1.0;
            let mut acc = [0.0; 5];
            for s in &flats {
                let (dx, dy) = (px - s.mx, py - s.my);
                let m2 = s.qa * dx * dx + 2.0 * s.qb * dx * dy + s.qc * dy * dy;
                if m2 > max_m2 {
                    continue;
                }
                let a = (s.opacity * (-0.5 * m2).exp()).min(cfg.alpha_cap);
                if s.opacity * (-0.5 * m2).exp() < cfg.min_alpha {
                    continue;
                }
                let wgt = a * t;
                acc[0] += s.color[0] * wgt;
                acc[1] += s.color[1] * wgt;
                acc[2] += s.color[2] * wgt;
                acc[3] += wgt;
                acc[4] += s.z * wgt;
                t *= 1.0 - a;
                if t < cfg.transmittance_floor {
                    break;
                }
            }
            for ch in 0..3 {
                color.set(row, col, ch, acc[ch]);
            }
            alpha.set(row, col, 0, acc[3]);
            depth.set(row, col, 0, acc[4]);
            depth_norm.set(row, col, 0, acc[4] / acc[3].max(DEPTH_NORM_EPS));
        }
    }
    ReferenceRender {
        color,
        alpha,
        depth_premul: depth,
        depth_norm,
    }
}
