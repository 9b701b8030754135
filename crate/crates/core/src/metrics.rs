//! Image quality metrics and the cross-time forgetting matrix.

use crate::camera::CameraView;
use crate::img::ImageRgb;
use crate::raster::{render, RenderOptions};
use crate::scene::GaussianField;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("image dimensions differ: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(usize, usize, usize, usize),
    #[error("missing checkpoint for step {0}")]
    MissingCheckpoint(u32),
    #[error("field error: {0}")]
    Field(#[from] crate::scene::FieldError),
}

/// PSNR sentinel for exact equality; all values are capped here.
pub const PSNR_CAP: f64 = 99.0;

/// SSIM window side length.
pub const SSIM_WINDOW: usize = 11;
/// SSIM window Gaussian sigma.
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn check_dims(a: &ImageRgb, b: &ImageRgb) -> Result<(), MetricsError> {
    if a.width != b.width || a.height != b.height {
        return Err(MetricsError::DimensionMismatch(a.width, a.height, b.width, b.height));
    }
    Ok(())
}

/// Peak signal-to-noise ratio in dB over [0, 1] images, capped at
/// [`PSNR_CAP`] (the sentinel returned for exact equality).
pub fn psnr(a: &ImageRgb, b: &ImageRgb) -> Result<f64, MetricsError> {
    check_dims(a, b)?;
    let mse = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.data.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

/// Normalized 1D Gaussian window for SSIM.
pub(crate) fn ssim_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *v;
    }
    for v in w.iter_mut() {
        *v /= sum;
    }
    w
}

/// Separable valid-mode convolution with the SSIM window.
/// Input H x W, output (H - 10) x (W - 10).
pub(crate) fn conv_valid(plane: &[f64], width: usize, height: usize) -> Vec<f64> {
    let w = ssim_window();
    let out_w = width - (SSIM_WINDOW - 1);
    let out_h = height - (SSIM_WINDOW - 1);
    // Horizontal pass: H x out_w.
    let mut tmp = vec![0.0; height * out_w];
    for y in 0..height {
        let row = &plane[y * width..(y + 1) * width];
        let out_row = &mut tmp[y * out_w..(y + 1) * out_w];
        for (x, o) in out_row.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (k, wk) in w.iter().enumerate() {
                acc += wk * row[x + k];
            }
            *o = acc;
        }
    }
    // Vertical pass: out_h x out_w.
    let mut out = vec![0.0; out_h * out_w];
    for y in 0..out_h {
        let o_row = &mut out[y * out_w..(y + 1) * out_w];
        for (k, wk) in w.iter().enumerate() {
            let t_row = &tmp[(y + k) * out_w..(y + k + 1) * out_w];
            for (o, t) in o_row.iter_mut().zip(t_row) {
                *o += wk * t;
            }
        }
    }
    out
}

/// Adjoint of [`conv_valid`]: scatter a valid-grid map back onto the image.
pub(crate) fn conv_valid_adjoint(
    map: &[f64],
    out_w: usize,
    out_h: usize,
    width: usize,
    height: usize,
) -> Vec<f64> {
    let w = ssim_window();
    let mut tmp = vec![0.0; out_h * width];
    for y in 0..out_h {
        let m_row = &map[y * out_w..(y + 1) * out_w];
        let t_row = &mut tmp[y * width..(y + 1) * width];
        for (x, m) in m_row.iter().enumerate() {
            if *m == 0.0 {
                continue;
            }
            for (k, wk) in w.iter().enumerate() {
                t_row[x + k] += wk * m;
            }
        }
    }
    let mut out = vec![0.0; height * width];
    for y in 0..out_h {
        let t_row = &tmp[y * width..(y + 1) * width];
        for (k, wk) in w.iter().enumerate() {
            let o_row = &mut out[(y + k) * width..(y + k + 1) * width];
            for (o, t) in o_row.iter_mut().zip(t_row) {
                *o += wk * t;
            }
        }
    }
    out
}

pub(crate) fn channel_plane(img: &ImageRgb, ch: usize) -> Vec<f64> {
    img.data.iter().skip(ch).step_by(3).copied().collect()
}

pub(crate) struct SsimStats {
    pub mu_a: Vec<f64>,
    pub mu_b: Vec<f64>,
    pub var_a: Vec<f64>,
    pub var_b: Vec<f64>,
    pub cov_ab: Vec<f64>,
    pub out_w: usize,
    pub out_h: usize,
}

pub(crate) fn ssim_stats(a: &[f64], b: &[f64], width: usize, height: usize) -> SsimStats {
    let mu_a = conv_valid(a, width, height);
    let mu_b = conv_valid(b, width, height);
    let aa: Vec<f64> = a.iter().map(|v| v * v).collect();
    let bb: Vec<f64> = b.iter().map(|v| v * v).collect();
    let ab: Vec<f64> = a.iter().zip(b).map(|(x, y)| x * y).collect();
    let m_aa = conv_valid(&aa, width, height);
    let m_bb = conv_valid(&bb, width, height);
    let m_ab = conv_valid(&ab, width, height);
    let n = mu_a.len();
    let mut var_a = vec![0.0; n];
    let mut var_b = vec![0.0; n];
    let mut cov_ab = vec![0.0; n];
    for i in 0..n {
        var_a[i] = m_aa[i] - mu_a[i] * mu_a[i];
        var_b[i] = m_bb[i] - mu_b[i] * mu_b[i];
        cov_ab[i] = m_ab[i] - mu_a[i] * mu_b[i];
    }
    SsimStats {
        mu_a,
        mu_b,
        var_a,
        var_b,
        cov_ab,
        out_w: width - (SSIM_WINDOW - 1),
        out_h: height - (SSIM_WINDOW - 1),
    }
}

#[inline]
pub(crate) fn ssim_terms(s: &SsimStats, i: usize) -> (f64, f64, f64, f64, f64) {
    let a1 = 2.0 * s.mu_a[i] * s.mu_b[i] + SSIM_C1;
    let a2 = 2.0 * s.cov_ab[i] + SSIM_C2;
    let b1 = s.mu_a[i] * s.mu_a[i] + s.mu_b[i] * s.mu_b[i] + SSIM_C1;
    let b2 = s.var_a[i] + s.var_b[i] + SSIM_C2;
    (a1, a2, b1, b2, (a1 * a2) / (b1 * b2))
}

/// Mean structural similarity with an 11x11 Gaussian window (sigma 1.5),
/// valid-window cropping, channels averaged. Needs images >= 11x11.
pub fn ssim(a: &ImageRgb, b: &ImageRgb) -> Result<f64, MetricsError> {
    check_dims(a, b)?;
    assert!(
        a.width >= SSIM_WINDOW && a.height >= SSIM_WINDOW,
        "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} images"
    );
    let mut total = 0.0;
    for ch in 0..3 {
        let pa = channel_plane(a, ch);
        let pb = channel_plane(b, ch);
        let stats = ssim_stats(&pa, &pb, a.width, a.height);
        let n = stats.mu_a.len();
        let mut acc = 0.0;
        for i in 0..n {
            acc += ssim_terms(&stats, i).4;
        }
        total += acc / n as f64;
    }
    Ok(total / 3.0)
}

/// Lower-triangular table: entry (i, j <= i) is the mean PSNR of step-j test
/// views rendered by the field after update i.
#[derive(Debug, Clone)]
pub struct ForgettingMatrix {
    pub steps: Vec<u32>,
    /// Row i holds entries for test steps 0..=i.
    pub rows: Vec<Vec<f64>>,
}

impl ForgettingMatrix {
    pub fn entry(&self, train_step: usize, test_step: usize) -> f64 {
        self.rows[train_step][test_step]
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("train_step");
        for step in &self.steps {
            s.push_str(&format!(",test_{step}"));
        }
        s.push('\n');
        for (i, row) in self.rows.iter().enumerate() {
            s.push_str(&format!("{}", self.steps[i]));
            for j in 0..self.steps.len() {
                if j < row.len() {
                    s.push_str(&format!(",{:.4}", row[j]));
                } else {
                    s.push(',');
                }
            }
            s.push('\n');
        }
        s
    }
}

/// One held-out view with its ground-truth image.
pub struct TestView {
    pub image: ImageRgb,
    pub camera: CameraView,
}

/// Build the forgetting matrix from per-step checkpoints and per-step test
/// sets. `checkpoints[i]` must be the field state after update i (recallable
/// at every step <= i); `test_sets[j]` holds held-out views of step j.
pub fn forgetting_matrix(
    checkpoints: &[&GaussianField],
    test_sets: &[Vec<TestView>],
    opts: &RenderOptions,
) -> Result<ForgettingMatrix, MetricsError> {
    if checkpoints.len() != test_sets.len() {
        return Err(MetricsError::MissingCheckpoint(checkpoints.len() as u32));
    }
    let steps: Vec<u32> = (0..checkpoints.len() as u32).collect();
    let mut rows = Vec::new();
    for (i, field) in checkpoints.iter().enumerate() {
        if field.current_step != i as u32 {
            return Err(MetricsError::MissingCheckpoint(i as u32));
        }
        let mut row = Vec::new();
        for (j, tests) in test_sets.iter().enumerate().take(i + 1) {
            let snapshot = field.recall(j as u32)?;
            let mut acc = 0.0;
            for tv in tests {
                let out = render(&snapshot, &tv.camera, opts);
                acc += psnr(&out.color, &tv.image)?;
            }
            row.push(acc / tests.len().max(1) as f64);
        }
        rows.push(row);
    }
    Ok(ForgettingMatrix { steps, rows })
}
