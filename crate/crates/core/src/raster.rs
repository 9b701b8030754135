//! Forward rendering: perspective EWA projection and front-to-back
//! alpha blending over a global per-view depth sort.

use crate::camera::CameraView;
use crate::img::ImageRgb;
use crate::scene::{covariance_of, FieldSnapshot, Gaussian};
use crate::sh;
use nalgebra::{Matrix2, Matrix3, Vector2, Vector3};
use rayon::prelude::*;

/// Low-pass dilation added to the projected covariance diagonal (px^2).
pub const LOWPASS: f64 = 0.3;
/// Per-sample opacity ceiling.
pub const ALPHA_CLAMP: f64 = 0.99;
/// Contributions below this opacity are skipped.
pub const ALPHA_SKIP: f64 = 1.0 / 255.0;
/// Blending stops once transmittance falls below this.
pub const EARLY_STOP_T: f64 = 1e-4;
/// Screen-footprint culling radius in standard deviations.
pub const CULL_SIGMA: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderOptions {
    pub background: Vector3<f64>,
    pub near_plane: f64,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self { background: Vector3::zeros(), near_plane: 0.01 }
    }
}

/// A Gaussian after projection to screen space.
#[derive(Debug, Clone)]
pub struct ProjectedGaussian {
    pub pixel_center: Vector2<f64>,
    pub cov2d: Matrix2<f64>,
    pub depth: f64,
    pub color: Vector3<f64>,
    pub effective_opacity: f64,
}

/// Jacobian of the pinhole projection at a camera-space point.
pub fn projection_jacobian(cam: &CameraView, p_cam: &Vector3<f64>) -> nalgebra::Matrix2x3<f64> {
    let inv_z = 1.0 / p_cam.z;
    let inv_z2 = inv_z * inv_z;
    nalgebra::Matrix2x3::new(
        cam.fx * inv_z,
        0.0,
        -cam.fx * p_cam.x * inv_z2,
        0.0,
        cam.fy * inv_z,
        -cam.fy * p_cam.y * inv_z2,
    )
}

fn project_with_shading(
    prim: &Gaussian,
    cam: &CameraView,
    cov3d: &Matrix3<f64>,
    color: Vector3<f64>,
    effective_opacity: f64,
    near_plane: f64,
) -> Option<ProjectedGaussian> {
    let p_cam = cam.world_to_camera(&prim.position);
    if p_cam.z <= near_plane {
        return None;
    }
    let center = cam.project_camera_point(&p_cam);
    let j = projection_jacobian(cam, &p_cam);
    let a = j * cam.rotation;
    let mut cov2d = a * cov3d * a.transpose();
    cov2d[(0, 0)] += LOWPASS;
    cov2d[(1, 1)] += LOWPASS;
    // 3-sigma footprint against the image rectangle.
    let radius = CULL_SIGMA * max_eigenvalue_2x2(&cov2d).sqrt();
    let (w, h) = (cam.width as f64, cam.height as f64);
    if center.x + radius < 0.0
        || center.x - radius > w
        || center.y + radius < 0.0
        || center.y - radius > h
    {
        return None;
    }
    Some(ProjectedGaussian { pixel_center: center, cov2d, depth: p_cam.z, color, effective_opacity })
}

/// Project one primitive; `None` means culled (behind the near plane or the
/// footprint misses the image by more than [`CULL_SIGMA`] deviations).
pub fn project(
    prim: &Gaussian,
    cam: &CameraView,
    cov3d: &Matrix3<f64>,
    near_plane: f64,
) -> Option<ProjectedGaussian> {
    let dir = cam.view_direction(&prim.position);
    let color = sh::eval_color(&prim.sh, &dir).map(|v| v.min(1.0));
    project_with_shading(prim, cam, cov3d, color, prim.opacity(), near_plane)
}

fn max_eigenvalue_2x2(m: &Matrix2<f64>) -> f64 {
    let mid = 0.5 * (m[(0, 0)] + m[(1, 1)]);
    let d = 0.5 * (m[(0, 0)] - m[(1, 1)]);
    let disc = (d * d + m[(0, 1)] * m[(0, 1)]).sqrt();
    (mid + disc).max(0.0)
}

#[derive(Debug, Clone)]
pub struct RenderOutput {
    pub width: usize,
    pub height: usize,
    pub color: ImageRgb,
    /// Per pixel: sum of alpha_i * T_i over blended primitives.
    pub weight_sum: Vec<f64>,
    /// Per pixel: transmittance left after blending.
    pub transmittance: Vec<f64>,
    /// Per global primitive index: max over pixels of alpha_i * T_i.
    pub max_contribution: Vec<f64>,
    /// Per pixel: global index of the primitive with the largest
    /// alpha_i * T_i contribution; `u32::MAX` when nothing contributed.
    pub argmax_prim: Vec<u32>,
}

pub const NO_PRIM: u32 = u32::MAX;

/// One screen-space splat ready for blending, in depth order.
#[derive(Debug, Clone)]
pub(crate) struct Splat {
    pub prim: u32,
    /// Index into the snapshot's active list (and its appearance cache).
    pub active_slot: u32,
    pub center: Vector2<f64>,
    /// Inverse 2D covariance (a, b, c) for [[a, b], [b, c]].
    pub conic: Vector3<f64>,
    pub depth: f64,
    pub color: Vector3<f64>,
    pub opacity: f64,
    pub x_min: usize,
    pub x_max: usize,
    pub y_min: usize,
    pub y_max: usize,
}

/// Appearance deltas for the active set, aligned with `snapshot.active`.
pub(crate) fn eval_appearance(
    snapshot: &FieldSnapshot<'_>,
) -> Option<Vec<crate::appearance::AppearanceDelta>> {
    let model = &snapshot.field.appearance;
    if !snapshot.use_appearance || !model.enabled {
        return None;
    }
    Some(
        snapshot
            .active
            .par_iter()
            .map(|&i| model.delta(&snapshot.field.primitives[i].position, snapshot.t_norm))
            .collect(),
    )
}

pub(crate) fn shade_primitive(
    prim: &Gaussian,
    cam: &CameraView,
    delta_sh: Option<&[Vector3<f64>]>,
) -> Vector3<f64> {
    let dir = cam.view_direction(&prim.position);
    let color = match delta_sh {
        Some(dsh) => {
            let adjusted: Vec<Vector3<f64>> =
                prim.sh.iter().zip(dsh).map(|(y, d)| y + d).collect();
            sh::eval_color(&adjusted, &dir)
        }
        None => sh::eval_color(&prim.sh, &dir),
    };
    color.map(|v| v.min(1.0))
}

pub(crate) fn effective_opacity(prim: &Gaussian, apply_removal: bool) -> f64 {
    let sigma = prim.opacity();
    match (apply_removal, prim.removal_factor) {
        (true, Some(m)) => crate::update::psi(m) * sigma,
        _ => sigma,
    }
}

/// Project the active set and sort front to back. Returned splats reference
/// primitives by global index and by slot in the active list.
pub(crate) fn build_splats(
    snapshot: &FieldSnapshot<'_>,
    cam: &CameraView,
    opts: &RenderOptions,
    appearance: Option<&[crate::appearance::AppearanceDelta]>,
) -> Vec<Splat> {
    let field = snapshot.field;
    let mut splats: Vec<Splat> = snapshot
        .active
        .par_iter()
        .enumerate()
        .filter_map(|(slot, &i)| {
            let prim = &field.primitives[i];
            let delta = appearance.map(|a| &a[slot]);
            let ds = delta.map(|d| d.d_log_scale).unwrap_or_else(Vector3::zeros);
            let cov3d = covariance_of(prim, &ds);
            let color = shade_primitive(prim, cam, delta.map(|d| d.d_sh.as_slice()));
            let opacity = effective_opacity(prim, snapshot.apply_removal);
            let pg = project_with_shading(prim, cam, &cov3d, color, opacity, opts.near_plane)?;
            let det = pg.cov2d[(0, 0)] * pg.cov2d[(1, 1)] - pg.cov2d[(0, 1)] * pg.cov2d[(0, 1)];
            if det <= 0.0 {
                return None;
            }
            let inv_det = 1.0 / det;
            let conic = Vector3::new(
                pg.cov2d[(1, 1)] * inv_det,
                -pg.cov2d[(0, 1)] * inv_det,
                pg.cov2d[(0, 0)] * inv_det,
            );
            let radius = CULL_SIGMA * max_eigenvalue_2x2(&pg.cov2d).sqrt();
            let (wf, hf) = (cam.width as f64, cam.height as f64);
            let x_min = (pg.pixel_center.x - radius).floor().clamp(0.0, wf - 1.0) as usize;
            let x_max = (pg.pixel_center.x + radius).ceil().clamp(0.0, wf - 1.0) as usize;
            let y_min = (pg.pixel_center.y - radius).floor().clamp(0.0, hf - 1.0) as usize;
            let y_max = (pg.pixel_center.y + radius).ceil().clamp(0.0, hf - 1.0) as usize;
            Some(Splat {
                prim: i as u32,
                active_slot: slot as u32,
                center: pg.pixel_center,
                conic,
                depth: pg.depth,
                color: pg.color,
                opacity: pg.effective_opacity,
                x_min,
                x_max,
                y_min,
                y_max,
            })
        })
        .collect();
    // Front to back; ties broken by index so the order is a total one.
    splats.sort_unstable_by(|a, b| {
        a.depth.total_cmp(&b.depth).then_with(|| a.prim.cmp(&b.prim))
    });
    splats
}

pub(crate) fn row_buckets(splats: &[Splat], height: usize) -> Vec<Vec<u32>> {
    let mut rows = vec![Vec::new(); height];
    for (si, s) in splats.iter().enumerate() {
        for row in rows.iter_mut().take(s.y_max + 1).skip(s.y_min) {
            row.push(si as u32);
        }
    }
    rows
}

/// Render a field snapshot. Pure: parallel row workers write disjoint output.
pub fn render(snapshot: &FieldSnapshot<'_>, cam: &CameraView, opts: &RenderOptions) -> RenderOutput {
    let (w, h) = (cam.width as usize, cam.height as usize);
    let appearance = eval_appearance(snapshot);
    let splats = build_splats(snapshot, cam, opts, appearance.as_deref());
    let rows = row_buckets(&splats, h);

    let mut color = ImageRgb::new(w, h);
    let mut weight_sum = vec![0.0; w * h];
    let mut transmittance = vec![0.0; w * h];
    let mut argmax_prim = vec![NO_PRIM; w * h];
    let n_prims = snapshot.field.primitives.len();

    let max_contribution = color
        .data
        .par_chunks_mut(3 * w)
        .zip(weight_sum.par_chunks_mut(w))
        .zip(transmittance.par_chunks_mut(w))
        .zip(argmax_prim.par_chunks_mut(w))
        .enumerate()
        .fold(
            || vec![0.0f64; n_prims],
            |mut contrib, (y, (((color_row, weight_row), t_row), argmax_row))| {
                let row_splats = &rows[y];
                let py = y as f64 + 0.5;
                for x in 0..w {
                    let px = x as f64 + 0.5;
                    let mut t = 1.0;
                    let mut acc = Vector3::zeros();
                    let mut wsum = 0.0;
                    let mut best = 0.0;
                    let mut best_prim = NO_PRIM;
                    for &si in row_splats {
                        let s = &splats[si as usize];
                        if x < s.x_min || x > s.x_max {
                            continue;
                        }
                        let dx = px - s.center.x;
                        let dy = py - s.center.y;
                        let power =
                            -0.5 * (s.conic.x * dx * dx + s.conic.z * dy * dy) - s.conic.y * dx * dy;
                        if power > 0.0 {
                            continue;
                        }
                        let alpha = (s.opacity * power.exp()).min(ALPHA_CLAMP);
                        if alpha < ALPHA_SKIP {
                            continue;
                        }
                        let weight = alpha * t;
                        acc += s.color * weight;
                        wsum += weight;
                        let slot = s.prim as usize;
                        if weight > contrib[slot] {
                            contrib[slot] = weight;
                        }
                        if weight > best {
                            best = weight;
                            best_prim = s.prim;
                        }
                        t *= 1.0 - alpha;
                        if t < EARLY_STOP_T {
                            break;
                        }
                    }
                    acc += opts.background * t;
                    color_row[3 * x] = acc.x;
                    color_row[3 * x + 1] = acc.y;
                    color_row[3 * x + 2] = acc.z;
                    weight_row[x] = wsum;
                    t_row[x] = t;
                    argmax_row[x] = best_prim;
                }
                contrib
            },
        )
        .reduce(
            || vec![0.0f64; n_prims],
            |mut a, b| {
                for (x, y) in a.iter_mut().zip(&b) {
                    if *y > *x {
                        *x = *y;
                    }
                }
                a
            },
        );

    RenderOutput { width: w, height: h, color, weight_sum, transmittance, max_contribution, argmax_prim }
}
