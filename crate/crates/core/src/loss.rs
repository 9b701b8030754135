//! Photometric losses with image-space gradients.
//!
//! All stages share the same masked L1 + D-SSIM mix; the layout stage adds a
//! regularizer on the removal activations. D-SSIM is (1 - SSIM) / 2.

use crate::img::{ImageRgb, MaskImage};
use crate::metrics::{channel_plane, conv_valid_adjoint, ssim_stats, ssim_terms, SSIM_WINDOW};

/// A scalar loss and its gradient with respect to the rendered image.
pub struct LossOutput {
    pub value: f64,
    pub grad: ImageRgb,
}

impl LossOutput {
    fn zero(width: usize, height: usize) -> Self {
        Self { value: 0.0, grad: ImageRgb::new(width, height) }
    }
}

/// Mean absolute error over pixels and channels; masked pixels only, but
/// normalized by the full pixel count.
pub fn l1_loss(rendered: &ImageRgb, gt: &ImageRgb, mask: Option<&MaskImage>) -> LossOutput {
    assert_eq!((rendered.width, rendered.height), (gt.width, gt.height));
    let norm = 1.0 / rendered.data.len() as f64;
    let mut out = LossOutput::zero(rendered.width, rendered.height);
    for (i, (r, g)) in rendered.data.iter().zip(&gt.data).enumerate() {
        if let Some(m) = mask {
            if !m.data[i / 3] {
                continue;
            }
        }
        let d = r - g;
        out.value += d.abs() * norm;
        out.grad.data[i] = d.signum() * norm;
    }
    out
}

/// Structural dissimilarity (1 - SSIM)/2 with the metric module's window,
/// masked at window centers, averaged over all valid windows and channels.
pub fn dssim_loss(rendered: &ImageRgb, gt: &ImageRgb, mask: Option<&MaskImage>) -> LossOutput {
    assert_eq!((rendered.width, rendered.height), (gt.width, gt.height));
    let (w, h) = (rendered.width, rendered.height);
    assert!(w >= SSIM_WINDOW && h >= SSIM_WINDOW, "image too small for the SSIM window");
    let half = (SSIM_WINDOW - 1) / 2;
    let mut out = LossOutput::zero(w, h);
    for ch in 0..3 {
        let pa = channel_plane(rendered, ch);
        let pb = channel_plane(gt, ch);
        let stats = ssim_stats(&pa, &pb, w, h);
        let n = stats.mu_a.len();
        let scale = 1.0 / (3.0 * n as f64);
        // Per-window maps feeding the adjoint scatter:
        //   dS/da_p = w_p * (c_const + c_b * b_p + c_a * a_p)
        let mut m_const = vec![0.0; n];
        let mut m_b = vec![0.0; n];
        let mut m_a = vec![0.0; n];
        for i in 0..n {
            let (a1, a2, b1, b2, s) = ssim_terms(&stats, i);
            let masked = match mask {
                Some(m) => {
                    let wy = i / stats.out_w + half;
                    let wx = i % stats.out_w + half;
                    m.get(wx, wy)
                }
                None => true,
            };
            if !masked {
                continue;
            }
            out.value += (1.0 - s) * 0.5 * scale;
            // d(loss)/dS for this window.
            let g = -0.5 * scale;
            let inv_b1b2 = 1.0 / (b1 * b2);
            let c_b = 2.0 * a1 * inv_b1b2;
            let c_a = -2.0 * s / b2;
            let c_const = 2.0 * stats.mu_b[i] * a2 * inv_b1b2
                - c_b * stats.mu_b[i]
                - 2.0 * s * stats.mu_a[i] / b1
                - c_a * stats.mu_a[i];
            m_const[i] = g * c_const;
            m_b[i] = g * c_b;
            m_a[i] = g * c_a;
        }
        let g_const = conv_valid_adjoint(&m_const, stats.out_w, stats.out_h, w, h);
        let g_b = conv_valid_adjoint(&m_b, stats.out_w, stats.out_h, w, h);
        let g_a = conv_valid_adjoint(&m_a, stats.out_w, stats.out_h, w, h);
        for p in 0..w * h {
            out.grad.data[3 * p + ch] = g_const[p] + g_b[p] * pb[p] + g_a[p] * pa[p];
        }
    }
    out
}

/// The shared photometric mix `(1 - lambda) L1 + lambda D-SSIM`, optionally
/// restricted by a layout-invariant mask. An all-zero mask yields zero loss.
pub fn photometric_loss(
    rendered: &ImageRgb,
    gt: &ImageRgb,
    mask: Option<&MaskImage>,
    lambda: f64,
) -> LossOutput {
    if let Some(m) = mask {
        if m.count_set() == 0 {
            log::warn!("photometric loss with an all-zero mask; view contributes nothing");
            return LossOutput::zero(rendered.width, rendered.height);
        }
    }
    let l1 = l1_loss(rendered, gt, mask);
    if lambda == 0.0 {
        return LossOutput { value: (1.0 - lambda) * l1.value, grad: scale_grad(l1.grad, 1.0 - lambda) };
    }
    let ds = dssim_loss(rendered, gt, mask);
    let mut grad = l1.grad;
    for (g, d) in grad.data.iter_mut().zip(&ds.grad.data) {
        *g = (1.0 - lambda) * *g + lambda * d;
    }
    LossOutput { value: (1.0 - lambda) * l1.value + lambda * ds.value, grad }
}

fn scale_grad(mut grad: ImageRgb, k: f64) -> ImageRgb {
    for g in grad.data.iter_mut() {
        *g *= k;
    }
    grad
}

/// Removal regularizer, averaged over previous-generation primitives:
/// `lambda2 (1 - psi) psi + lambda3 BCE(psi, 1)`. Returns the value and the
/// gradient with respect to each psi.
pub fn removal_regularizer(psi: &[f64], lambda2: f64, lambda3: f64) -> (f64, Vec<f64>) {
    if psi.is_empty() {
        return (0.0, Vec::new());
    }
    let n = psi.len() as f64;
    let mut value = 0.0;
    let mut grad = vec![0.0; psi.len()];
    for (i, &p) in psi.iter().enumerate() {
        let entropy = (1.0 - p) * p;
        let p_safe = p.max(1e-7);
        let bce = -p_safe.ln();
        value += (lambda2 * entropy + lambda3 * bce) / n;
        let d_entropy = 1.0 - 2.0 * p;
        let d_bce = if p > 1e-7 { -1.0 / p } else { 0.0 };
        grad[i] = (lambda2 * d_entropy + lambda3 * d_bce) / n;
    }
    (value, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::Vector3;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn random_image(w: usize, h: usize, seed: u64) -> ImageRgb {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut img = ImageRgb::new(w, h);
        for v in img.data.iter_mut() {
            *v = rng.gen_range(0.05..0.95);
        }
        img
    }

    #[test]
    fn identical_images_zero_loss() {
        let a = random_image(16, 16, 1);
        let out = photometric_loss(&a, &a, None, 0.2);
        assert_relative_eq!(out.value, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn zero_mask_means_zero_loss() {
        let a = random_image(16, 16, 2);
        let b = random_image(16, 16, 3);
        let mask = MaskImage::new(16, 16, false);
        let out = photometric_loss(&a, &b, Some(&mask), 0.2);
        assert_eq!(out.value, 0.0);
        assert!(out.grad.data.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn constant_offset_l1() {
        // Offset 0.1 everywhere, fully masked, lambda = 0 → L1 = 0.1.
        let w = 16;
        let h = 12;
        let a = ImageRgb::filled(w, h, Vector3::new(0.5, 0.5, 0.5));
        let b = ImageRgb::filled(w, h, Vector3::new(0.6, 0.6, 0.6));
        let mask = MaskImage::new(w, h, true);
        let out = photometric_loss(&a, &b, Some(&mask), 0.0);
        assert_relative_eq!(out.value, 0.1, epsilon = 1e-12);
    }

    #[test]
    fn l1_gradient_matches_finite_differences() {
        let a = random_image(8, 8, 4);
        let b = random_image(8, 8, 5);
        let out = l1_loss(&a, &b, None);
        let eps = 1e-7;
        for idx in [0usize, 17, 100, 191] {
            let mut ap = a.clone();
            let mut am = a.clone();
            ap.data[idx] += eps;
            am.data[idx] -= eps;
            let fd = (l1_loss(&ap, &b, None).value - l1_loss(&am, &b, None).value) / (2.0 * eps);
            assert_relative_eq!(out.grad.data[idx], fd, epsilon = 1e-9);
        }
    }

    #[test]
    fn dssim_gradient_matches_finite_differences() {
        let a = random_image(14, 13, 6);
        let b = random_image(14, 13, 7);
        let out = dssim_loss(&a, &b, None);
        let eps = 1e-6;
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..12 {
            let idx = rng.gen_range(0..a.data.len());
            let mut ap = a.clone();
            let mut am = a.clone();
            ap.data[idx] += eps;
            am.data[idx] -= eps;
            let fd =
                (dssim_loss(&ap, &b, None).value - dssim_loss(&am, &b, None).value) / (2.0 * eps);
            assert_relative_eq!(out.grad.data[idx], fd, epsilon = 1e-8, max_relative = 1e-5);
        }
    }

    #[test]
    fn masked_dssim_gradient_matches_finite_differences() {
        let a = random_image(14, 14, 9);
        let b = random_image(14, 14, 10);
        let mut mask = MaskImage::new(14, 14, false);
        for y in 4..11 {
            for x in 2..9 {
                mask.set(x, y, true);
            }
        }
        let out = dssim_loss(&a, &b, Some(&mask));
        let eps = 1e-6;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10 {
            let idx = rng.gen_range(0..a.data.len());
            let mut ap = a.clone();
            let mut am = a.clone();
            ap.data[idx] += eps;
            am.data[idx] -= eps;
            let fd = (dssim_loss(&ap, &b, Some(&mask)).value
                - dssim_loss(&am, &b, Some(&mask)).value)
                / (2.0 * eps);
            assert_relative_eq!(out.grad.data[idx], fd, epsilon = 1e-8, max_relative = 1e-5);
        }
    }

    #[test]
    fn regularizer_values() {
        // psi == 1 in the limit: both terms vanish.
        let (v, _) = removal_regularizer(&[1.0 - 1e-15], 0.5, 0.7);
        assert!(v.abs() < 1e-12);
        // psi == 0.5: entropy term lambda2 * 0.25, BCE term lambda3 * ln 2.
        let (v, _) = removal_regularizer(&[0.5], 1.0, 0.0);
        assert_relative_eq!(v, 0.25, epsilon = 1e-12);
        let (v, _) = removal_regularizer(&[0.5], 0.0, 1.0);
        assert_relative_eq!(v, std::f64::consts::LN_2, epsilon = 1e-12);
        // psi → 0: BCE diverges, so the regularizer alone never drives
        // removal; the mean over primitives normalizes the gradient.
        let (v_small, grad) = removal_regularizer(&[1e-6, 0.9], 0.0, 1.0);
        assert!(v_small > 5.0);
        assert!(grad[0] < 0.0);
        // Regularizer is nonnegative for psi in (0, 1).
        for p in [0.01, 0.3, 0.77, 0.999] {
            let (v, _) = removal_regularizer(&[p], 0.01, 0.01);
            assert!(v >= 0.0);
        }
    }

    #[test]
    fn regularizer_gradient_matches_finite_differences() {
        let psis = [0.2, 0.5, 0.9, 0.05];
        let (_, grad) = removal_regularizer(&psis, 0.013, 0.021);
        let eps = 1e-7;
        for i in 0..psis.len() {
            let mut pp = psis;
            let mut pm = psis;
            pp[i] += eps;
            pm[i] -= eps;
            let fd = (removal_regularizer(&pp, 0.013, 0.021).0
                - removal_regularizer(&pm, 0.013, 0.021).0)
                / (2.0 * eps);
            assert_relative_eq!(grad[i], fd, epsilon = 1e-6, max_relative = 1e-6);
        }
    }
}
