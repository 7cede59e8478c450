//! Training objective terms, each with its gradient.
//!
//! Images are premultiplied renderer outputs composited over a background.
//! Every `*_grad` function returns the loss value together with the gradient
//! w.r.t. its first image (or parameter) argument, laid out like the input.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_p: f64,
    pub lambda_m: f64,
    pub tau: f64,
    pub lambda_sigma: f64,
    pub lambda_c: f64,
    pub lambda_j: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_p: 0.5,
            lambda_m: 5.0,
            tau: 50.0,
            lambda_sigma: 1e-4,
            lambda_c: 1.0,
            lambda_j: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_p, self.lambda_m, self.tau, self.lambda_sigma, self.lambda_c, self.lambda_j];
        if all.iter().all(|w| w.is_finite() && *w >= 0.0) {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("loss weights must be finite and non-negative: {self:?}")))
        }
    }
}

/// Unweighted terms; `l_e` and `l_p` are already averaged over views.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossParts {
    pub l_e: f64,
    pub l_p: f64,
    pub l_m: f64,
    pub l_sigma: f64,
    pub l_c: f64,
    pub l_j: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    #[serde(rename = "L_d")]
    pub l_d: f64,
    #[serde(rename = "L_e")]
    pub l_e: f64,
    #[serde(rename = "L_p")]
    pub l_p: f64,
    #[serde(rename = "L_m")]
    pub l_m: f64,
    #[serde(rename = "L_sigma")]
    pub l_sigma: f64,
    #[serde(rename = "L_c")]
    pub l_c: f64,
    #[serde(rename = "L_j")]
    pub l_j: f64,
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub iteration: usize,
    #[serde(flatten)]
    pub loss: LossBreakdown,
}

pub fn total_loss(parts: &LossParts, weights: &LossWeights) -> Result<LossBreakdown> {
    let named = [
        ("L_e", parts.l_e),
        ("L_p", parts.l_p),
        ("L_m", parts.l_m),
        ("L_sigma", parts.l_sigma),
        ("L_c", parts.l_c),
        ("L_j", parts.l_j),
    ];
    if let Some((name, v)) = named.iter().find(|(_, v)| !v.is_finite()) {
        return Err(Error::NonFiniteLoss {
            iteration: 0,
            what: format!("{name} = {v}"),
        });
    }
    let l_d = parts.l_e + weights.lambda_p * parts.l_p;
    let total = l_d
        + weights.lambda_sigma * parts.l_sigma
        + weights.lambda_m * parts.l_m
        + weights.lambda_c * parts.l_c
        + weights.lambda_j * parts.l_j;
    if !total.is_finite() {
        return Err(Error::NonFiniteLoss {
            iteration: 0,
            what: format!("total = {total}"),
        });
    }
    Ok(LossBreakdown {
        total,
        l_d,
        l_e: parts.l_e,
        l_p: parts.l_p,
        l_m: parts.l_m,
        l_sigma: parts.l_sigma,
        l_c: parts.l_c,
        l_j: parts.l_j,
    })
}

fn require_same(x: &Image, y: &Image) -> Result<()> {
    if x.same_shape(y) {
        Ok(())
    } else {
        Err(Error::DimensionMismatch(format!(
            "{}x{}x{} vs {}x{}x{}",
            x.width(),
            x.height(),
            x.channels(),
            y.width(),
            y.height(),
            y.channels()
        )))
    }
}

/// `color + (1 − alpha)·bg` for a 3-channel premultiplied colour and its alpha.
pub fn composite(color: &Image, alpha: &Image, bg: &[f64; 3]) -> Result<Image> {
    if color.channels() != 3 || alpha.channels() != 1 || !color.same_size(alpha) {
        return Err(Error::DimensionMismatch("composite needs RGB colour and one-channel alpha".into()));
    }
    let mut out = color.clone();
    for (px, &a) in out.data_mut().chunks_exact_mut(3).zip(alpha.data()) {
        for c in 0..3 {
            px[c] += (1.0 - a) * bg[c];
        }
    }
    Ok(out)
}

/// Adjoint of [`composite`]: the colour gradient is `d_out` itself; this
/// returns the alpha gradient.
pub fn composite_alpha_grad(d_out: &[f64], bg: &[f64; 3]) -> Vec<f64> {
    d_out
        .chunks_exact(3)
        .map(|d| -(d[0] * bg[0] + d[1] * bg[1] + d[2] * bg[2]))
        .collect()
}

/// Composites a 4-channel premultiplied RGBA image over `bg`.
pub fn composite_over_background(rgba: &Image, bg: &[f64; 3]) -> Result<Image> {
    if rgba.channels() != 4 {
        return Err(Error::DimensionMismatch(format!("expected RGBA, got {} channels", rgba.channels())));
    }
    composite(&rgba.select_channels(0, 3), &rgba.select_channels(3, 1), bg)
}

fn require_rgb_pair(x: &Image, y: &Image) -> Result<()> {
    require_same(x, y)?;
    if x.channels() != 3 {
        return Err(Error::DimensionMismatch(format!("expected RGB, got {} channels", x.channels())));
    }
    Ok(())
}

/// Mean over pixels of the Euclidean RGB distance.
pub fn loss_euclidean_rgb(x: &Image, y: &Image) -> Result<f64> {
    require_rgb_pair(x, y)?;
    let sum: f64 = x
        .data()
        .chunks_exact(3)
        .zip(y.data().chunks_exact(3))
        .map(|(a, b)| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt())
        .sum();
    Ok(sum / x.pixel_count() as f64)
}

/// [`loss_euclidean_rgb`] and its gradient w.r.t. `x` (zero where the
/// residual vanishes).
pub fn loss_euclidean_rgb_grad(x: &Image, y: &Image) -> Result<(f64, Vec<f64>)> {
    require_rgb_pair(x, y)?;
    let n = x.pixel_count() as f64;
    let mut grad = vec![0.0; x.data().len()];
    let mut sum = 0.0;
    for ((a, b), g) in x.data().chunks_exact(3).zip(y.data().chunks_exact(3)).zip(grad.chunks_exact_mut(3)) {
        let r = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
        let norm = (r[0] * r[0] + r[1] * r[1] + r[2] * r[2]).sqrt();
        sum += norm;
        if norm > 0.0 {
            for c in 0..3 {
                g[c] = r[c] / (norm * n);
            }
        }
    }
    Ok((sum / n, grad))
}

const BINOMIAL: [f64; 5] = [1.0 / 16.0, 4.0 / 16.0, 6.0 / 16.0, 4.0 / 16.0, 1.0 / 16.0];

/// Blurs interleaved `[w, h, c]` data with the 5-tap binomial kernel along
/// `axis` (0 = x, 1 = y), edges clamped, keeping every second sample.
fn reduce_axis(src: &[f64], dims: [usize; 3], axis: usize) -> (Vec<f64>, [usize; 3]) {
    let [w, h, c] = dims;
    let n = if axis == 0 { w } else { h };
    let half = n.div_ceil(2);
    let out_dims = if axis == 0 { [half, h, c] } else { [w, half, c] };
    let mut out = vec![0.0; out_dims[0] * out_dims[1] * c];
    for row in 0..out_dims[1] {
        for col in 0..out_dims[0] {
            for ch in 0..c {
                let mut acc = 0.0;
                for (t, wt) in BINOMIAL.iter().enumerate() {
                    let (sr, sc) = if axis == 0 {
                        (row, (2 * col + t).saturating_sub(2).min(w - 1))
                    } else {
                        ((2 * row + t).saturating_sub(2).min(h - 1), col)
                    };
                    acc += wt * src[(sr * w + sc) * c + ch];
                }
                out[(row * out_dims[0] + col) * c + ch] = acc;
            }
        }
    }
    (out, out_dims)
}

/// Adjoint of [`reduce_axis`].
fn reduce_axis_adjoint(grad: &[f64], dims: [usize; 3], axis: usize) -> Vec<f64> {
    let [w, h, c] = dims;
    let n = if axis == 0 { w } else { h };
    let half = n.div_ceil(2);
    let out_dims = if axis == 0 { [half, h, c] } else { [w, half, c] };
    let mut src = vec![0.0; w * h * c];
    for row in 0..out_dims[1] {
        for col in 0..out_dims[0] {
            for ch in 0..c {
                let g = grad[(row * out_dims[0] + col) * c + ch];
                for (t, wt) in BINOMIAL.iter().enumerate() {
                    let (sr, sc) = if axis == 0 {
                        (row, (2 * col + t).saturating_sub(2).min(w - 1))
                    } else {
                        ((2 * row + t).saturating_sub(2).min(h - 1), col)
                    };
                    src[(sr * w + sc) * c + ch] += wt * g;
                }
            }
        }
    }
    src
}

/// Next Gaussian-pyramid level: binomial blur then 2× subsampling.
pub fn pyramid_down(img: &Image) -> Image {
    let dims = [img.width(), img.height(), img.channels()];
    let (tmp, d1) = reduce_axis(img.data(), dims, 0);
    let (out, d2) = reduce_axis(&tmp, d1, 1);
    Image::from_vec(d2[0], d2[1], d2[2], out).expect("sized")
}

fn pyramid_down_adjoint(grad: &[f64], width: usize, height: usize, channels: usize) -> Vec<f64> {
    let dims = [width, height, channels];
    let d1 = [width.div_ceil(2), height, channels];
    let tmp = reduce_axis_adjoint(grad, d1, 1);
    reduce_axis_adjoint(&tmp, dims, 0)
}

fn mean_abs_grad(a: &[f64], b: &[f64]) -> (f64, Vec<f64>) {
    let n = a.len() as f64;
    let mut sum = 0.0;
    let grad = a
        .iter()
        .zip(b)
        .map(|(x, y)| {
            let d = x - y;
            sum += d.abs();
            if d > 0.0 {
                1.0 / n
            } else if d < 0.0 {
                -1.0 / n
            } else {
                0.0
            }
        })
        .collect();
    (sum / n, grad)
}

/// Stand-in for a learned perceptual loss: mean absolute difference of the
/// full-resolution image and of its half-resolution pyramid level, averaged.
pub fn loss_perceptual_surrogate(x: &Image, y: &Image) -> Result<f64> {
    Ok(loss_perceptual_surrogate_grad(x, y)?.0)
}

pub fn loss_perceptual_surrogate_grad(x: &Image, y: &Image) -> Result<(f64, Vec<f64>)> {
    require_same(x, y)?;
    let (l0, g0) = mean_abs_grad(x.data(), y.data());
    let (px, py) = (pyramid_down(x), pyramid_down(y));
    let (l1, g1) = mean_abs_grad(px.data(), py.data());
    let back = pyramid_down_adjoint(&g1, x.width(), x.height(), x.channels());
    let grad = g0.iter().zip(&back).map(|(a, b)| 0.5 * (a + b)).collect();
    Ok((0.5 * (l0 + l1), grad))
}

/// Hash of the residual sign pattern of [`loss_perceptual_surrogate`] and
/// the zero residuals of [`loss_euclidean_rgb`], where both losses kink.
pub fn image_loss_signature(x: &Image, y: &Image) -> u64 {
    use std::hash::{DefaultHasher, Hash, Hasher};
    let mut h = DefaultHasher::new();
    let signs = |a: &[f64], b: &[f64], h: &mut DefaultHasher| {
        for (p, q) in a.iter().zip(b) {
            (p - q).partial_cmp(&0.0).hash(h);
        }
    };
    signs(x.data(), y.data(), &mut h);
    signs(pyramid_down(x).data(), pyramid_down(y).data(), &mut h);
    h.finish()
}

/// `(1/K) Σ_k exp(−τ·σ̄_k)` and its gradient w.r.t. each layer mean.
pub fn loss_opacity_mean_grad(layer_means: &[f64], tau: f64) -> (f64, Vec<f64>) {
    let k = layer_means.len().max(1) as f64;
    let terms: Vec<f64> = layer_means.iter().map(|&m| (-tau * m).exp()).collect();
    let grad = terms.iter().map(|t| -tau * t / k).collect();
    (terms.iter().sum::<f64>() / k, grad)
}

pub fn loss_opacity_mean(layer_means: &[f64], tau: f64) -> f64 {
    loss_opacity_mean_grad(layer_means, tau).0
}

/// `(1/K) Σ_k (1 − σ̄_k)` and its gradient w.r.t. each layer mean.
pub fn loss_opacity_bias_grad(layer_means: &[f64]) -> (f64, Vec<f64>) {
    let k = layer_means.len().max(1) as f64;
    let value = layer_means.iter().map(|m| 1.0 - m).sum::<f64>() / k;
    (value, vec![-1.0 / k; layer_means.len()])
}

pub fn loss_opacity_bias(layer_means: &[f64]) -> f64 {
    loss_opacity_bias_grad(layer_means).0
}

/// `(ln s)²` and its derivative.
pub fn loss_scale_reg_grad(s: f64) -> Result<(f64, f64)> {
    if !(s > 0.0) {
        return Err(Error::NonPositiveScale(s));
    }
    let l = s.ln();
    Ok((l * l, 2.0 * l / s))
}

pub fn loss_scale_reg(s: f64) -> Result<f64> {
    Ok(loss_scale_reg_grad(s)?.0)
}

/// Mean over views of the per-pixel, per-channel squared difference between
/// paired renders.
pub fn loss_jitter(a: &[Image], b: &[Image]) -> Result<f64> {
    Ok(loss_jitter_grad(a, b)?.0)
}

/// [`loss_jitter`] and its gradient w.r.t. each image of `a` (the gradient
/// w.r.t. `b` is the negation).
pub fn loss_jitter_grad(a: &[Image], b: &[Image]) -> Result<(f64, Vec<Vec<f64>>)> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    if a.is_empty() {
        return Ok((0.0, Vec::new()));
    }
    let views = a.len() as f64;
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(a.len());
    for (x, y) in a.iter().zip(b) {
        require_same(x, y)?;
        let n = x.data().len() as f64;
        let mut g = Vec::with_capacity(x.data().len());
        let mut sum = 0.0;
        for (p, q) in x.data().iter().zip(y.data()) {
            let d = p - q;
            sum += d * d;
            g.push(2.0 * d / (n * views));
        }
        total += sum / n;
        grads.push(g);
    }
    Ok((total / views, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::fd::grad_close;
    use crate::rotation::axis_angle;
    use nalgebra::Vector3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(rng: &mut impl Rng, w: usize, h: usize, c: usize) -> Image {
        Image::from_fn(w, h, c, |_, _, _| rng.random_range(0.0..1.0))
    }

    #[test]
    fn composite_examples() {
        let bg = [0.0, 0.0, 1.0];
        let color = Image::from_fn(2, 2, 3, |_, _, c| if c == 0 { 0.5 } else { 0.0 });
        let half = Image::filled(2, 2, 1, 0.5);
        let out = composite(&color, &half, &bg).unwrap();
        assert_eq!(out.pixel(1, 1), &[0.5, 0.0, 0.5]);
        let opaque = composite(&color, &Image::filled(2, 2, 1, 1.0), &bg).unwrap();
        assert_eq!(opaque, color);
        let clear = composite(&Image::new(2, 2, 3), &Image::new(2, 2, 1), &bg).unwrap();
        assert_eq!(clear.pixel(0, 0), &bg);
        let rgba = color.stack(&half).unwrap();
        assert_eq!(composite_over_background(&rgba, &bg).unwrap(), out);
    }

    #[test]
    fn euclidean_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_image(&mut rng, 5, 4, 3);
        assert_eq!(loss_euclidean_rgb(&x, &x).unwrap(), 0.0);
        let y = Image::from_fn(5, 4, 3, |r, c, ch| x.get(r, c, ch) - if ch == 0 { 1.0 } else { 0.0 });
        assert!((loss_euclidean_rgb(&x, &y).unwrap() - 1.0).abs() < 1e-12);
        assert!(matches!(
            loss_euclidean_rgb(&x, &Image::new(4, 4, 3)),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn euclidean_is_rotation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let x = random_image(&mut rng, 6, 5, 3);
            let y = random_image(&mut rng, 6, 5, 3);
            let axis = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), 1.0);
            let q = axis_angle(&axis, rng.random_range(-3.0..3.0));
            let rotate = |img: &Image| {
                let mut out = img.clone();
                for px in out.data_mut().chunks_exact_mut(3) {
                    let v = q * Vector3::new(px[0] - 0.5, px[1] - 0.5, px[2] - 0.5);
                    px.copy_from_slice(&[v.x + 0.5, v.y + 0.5, v.z + 0.5]);
                }
                out
            };
            let before = loss_euclidean_rgb(&x, &y).unwrap();
            let after = loss_euclidean_rgb(&rotate(&x), &rotate(&y)).unwrap();
            assert!((before - after).abs() <= 1e-9);
        }
    }

    #[test]
    fn euclidean_grows_linearly_for_outliers() {
        let base = Image::filled(8, 8, 3, 0.5);
        let with_outlier = |m: f64| {
            let mut img = base.clone();
            img.set(3, 3, 0, 0.5 + m);
            img
        };
        let mse = |a: &Image, b: &Image| {
            a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.data().len() as f64
        };
        let l: Vec<f64> = [1.0, 2.0, 4.0].iter().map(|&m| loss_euclidean_rgb(&with_outlier(m), &base).unwrap()).collect();
        let q: Vec<f64> = [1.0, 2.0, 4.0].iter().map(|&m| mse(&with_outlier(m), &base)).collect();
        assert!((l[1] / l[0] - 2.0).abs() < 1e-12 && (l[2] / l[1] - 2.0).abs() < 1e-12);
        assert!((q[1] / q[0] - 4.0).abs() < 1e-12 && (q[2] / q[1] - 4.0).abs() < 1e-12);
    }

    #[test]
    fn surrogate_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_image(&mut rng, 9, 7, 3);
        assert_eq!(loss_perceptual_surrogate(&x, &x).unwrap(), 0.0);
        let shifted = x.map(|v| v + 0.2);
        assert!((loss_perceptual_surrogate(&shifted, &x).unwrap() - 0.2).abs() < 1e-12);
    }

    #[test]
    fn pyramid_preserves_constants_and_halves_size() {
        let img = Image::filled(9, 6, 2, 0.4);
        let down = pyramid_down(&img);
        assert_eq!((down.width(), down.height(), down.channels()), (5, 3, 2));
        assert!(down.data().iter().all(|v| (v - 0.4).abs() < 1e-15));
    }

    #[test]
    fn surrogate_sees_checkerboard_detail() {
        let checker = Image::from_fn(16, 16, 3, |r, c, _| ((r + c) % 2) as f64);
        let blurred = Image::filled(16, 16, 3, 0.5);
        // Low-frequency residual: the two images agree after one pyramid level.
        let low_x = pyramid_down(&checker);
        let low_y = pyramid_down(&blurred);
        let low_residual = loss_euclidean_rgb(&low_x, &low_y).unwrap();
        assert!(low_residual < 0.05);
        assert!(loss_perceptual_surrogate(&checker, &blurred).unwrap() > low_residual);
    }

    fn check_image_grad(f: impl Fn(&Image) -> f64, analytic: &[f64], x: &Image) {
        for k in 0..x.data().len() {
            let h = 1e-6;
            let mut p = x.clone();
            p.data_mut()[k] += h;
            let mut m = x.clone();
            m.data_mut()[k] -= h;
            let numeric = (f(&p) - f(&m)) / (2.0 * h);
            assert!(grad_close(analytic[k], numeric, 1e-3, 1e-7), "{k}: {} vs {numeric}", analytic[k]);
        }
    }

    #[test]
    fn image_loss_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let (w, h) = (rng.random_range(2..7), rng.random_range(2..7));
            let x = random_image(&mut rng, w, h, 3);
            let y = random_image(&mut rng, w, h, 3);
            let (_, g) = loss_euclidean_rgb_grad(&x, &y).unwrap();
            check_image_grad(|v| loss_euclidean_rgb(v, &y).unwrap(), &g, &x);
            let (_, g) = loss_perceptual_surrogate_grad(&x, &y).unwrap();
            check_image_grad(|v| loss_perceptual_surrogate(v, &y).unwrap(), &g, &x);
            let x2 = random_image(&mut rng, w, h, 3);
            let (_, g) = loss_jitter_grad(&[x.clone(), x2.clone()], &[y.clone(), x.clone()]).unwrap();
            check_image_grad(|v| loss_jitter(&[v.clone(), x2.clone()], &[y.clone(), x.clone()]).unwrap(), &g[0], &x);
        }
    }

    #[test]
    fn scalar_loss_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let k = rng.random_range(1..4);
            let means: Vec<f64> = (0..k).map(|_| rng.random_range(0.0..0.2)).collect();
            let (_, gm) = loss_opacity_mean_grad(&means, 50.0);
            let (_, gs) = loss_opacity_bias_grad(&means);
            for i in 0..k {
                let h = 1e-7;
                let mut p = means.clone();
                p[i] += h;
                let mut m = means.clone();
                m[i] -= h;
                let nm = (loss_opacity_mean(&p, 50.0) - loss_opacity_mean(&m, 50.0)) / (2.0 * h);
                let ns = (loss_opacity_bias(&p) - loss_opacity_bias(&m)) / (2.0 * h);
                assert!(grad_close(gm[i], nm, 1e-3, 1e-9));
                assert!(grad_close(gs[i], ns, 1e-3, 1e-9));
            }
            let s = rng.random_range(0.2..5.0);
            let (_, ds) = loss_scale_reg_grad(s).unwrap();
            let h = 1e-6;
            let n = (loss_scale_reg(s + h).unwrap() - loss_scale_reg(s - h).unwrap()) / (2.0 * h);
            assert!(grad_close(ds, n, 1e-3, 1e-9));
        }
    }

    #[test]
    fn opacity_and_scale_examples() {
        assert_eq!(loss_opacity_mean(&[0.0, 0.0], 50.0), 1.0);
        assert!((loss_opacity_mean(&[1.0], 50.0) - 1.9287498479639178e-22).abs() < 1e-30);
        assert!((loss_opacity_mean(&[0.0, 1.0], 50.0) - 0.5).abs() < 1e-20);
        assert_eq!(loss_opacity_bias(&[1.0, 1.0]), 0.0);
        assert_eq!(loss_opacity_bias(&[0.0]), 1.0);
        assert_eq!(loss_opacity_bias(&[0.25, 0.75]), 0.5);
        assert_eq!(loss_scale_reg(1.0).unwrap(), 0.0);
        assert!((loss_scale_reg(std::f64::consts::E).unwrap() - 1.0).abs() < 1e-15);
        assert!((loss_scale_reg(1.0 / std::f64::consts::E).unwrap() - 1.0).abs() < 1e-15);
        assert!(matches!(loss_scale_reg(0.0), Err(Error::NonPositiveScale(_))));
    }

    #[test]
    fn jitter_examples() {
        let a = Image::filled(4, 4, 3, 0.3);
        assert_eq!(loss_jitter(&[a.clone()], &[a.clone()]).unwrap(), 0.0);
        let b = Image::from_fn(4, 4, 3, |_, _, c| if c == 1 { 0.4 } else { 0.3 });
        assert!((loss_jitter(&[a.clone()], &[b]).unwrap() - 0.01 / 3.0).abs() < 1e-12);
        assert!(matches!(loss_jitter(&[a], &[]), Err(Error::LengthMismatch { .. })));
    }

    #[test]
    fn total_loss_weighting() {
        let w = LossWeights::default();
        assert_eq!(total_loss(&LossParts::default(), &w).unwrap().total, 0.0);
        let only_m = LossParts {
            l_m: 1.0,
            ..LossParts::default()
        };
        assert_eq!(total_loss(&only_m, &w).unwrap().total, 5.0);
        let only_sigma = LossParts {
            l_sigma: 1.0,
            ..LossParts::default()
        };
        assert_eq!(total_loss(&only_sigma, &w).unwrap().total, 1e-4);
        let nan = LossParts {
            l_j: f64::NAN,
            ..LossParts::default()
        };
        assert!(matches!(total_loss(&nan, &w), Err(Error::NonFiniteLoss { .. })));
    }

    #[test]
    fn breakdown_invariant_and_monotonicity() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let w = LossWeights::default();
        for _ in 0..100 {
            let mut parts = LossParts {
                l_e: rng.random_range(0.0..1.0),
                l_p: rng.random_range(0.0..1.0),
                l_m: rng.random_range(0.0..1.0),
                l_sigma: rng.random_range(0.0..1.0),
                l_c: rng.random_range(0.0..1.0),
                l_j: rng.random_range(0.0..1.0),
            };
            let b = total_loss(&parts, &w).unwrap();
            let rebuilt = b.l_d + w.lambda_sigma * b.l_sigma + w.lambda_m * b.l_m + w.lambda_c * b.l_c + w.lambda_j * b.l_j;
            assert!((b.total - rebuilt).abs() <= 1e-9);
            parts.l_c += 0.1;
            assert!(total_loss(&parts, &w).unwrap().total >= b.total);
        }
    }

    #[test]
    fn trace_record_is_flat_json() {
        let rec = TraceRecord {
            iteration: 3,
            loss: LossBreakdown::default(),
        };
        let v: serde_json::Value = serde_json::to_value(&rec).unwrap();
        let obj = v.as_object().unwrap();
        assert_eq!(obj.len(), 9);
        for key in ["iteration", "total", "L_d", "L_e", "L_p", "L_m", "L_sigma", "L_c", "L_j"] {
            assert!(obj.contains_key(key), "{key}");
        }
    }
}
