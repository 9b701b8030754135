//! Hand-derived reverse-mode gradients through alpha blending, projection,
//! covariance construction, SH shading, the removal activation, and the
//! appearance model.

use super::{DiffError, GradientBundle, ParamGroups};
use crate::appearance::{AppearanceDelta, AppearanceTrace, MlpGrads};
use crate::camera::CameraView;
use crate::img::ImageRgb;
use crate::raster::{
    build_splats, row_buckets, projection_jacobian, RenderOptions, RenderOutput, Splat,
    ALPHA_CLAMP, ALPHA_SKIP, EARLY_STOP_T,
};
use crate::scene::{quat_to_rotation, FieldSnapshot};
use crate::sh;
use crate::update::{psi, psi_prime};
use nalgebra::{Matrix2, Matrix3, Vector2, Vector3, Vector4};
use rayon::prelude::*;

/// Fixed row-block height: gradients are reduced block by block in index
/// order so results do not depend on the thread count.
const ROW_BLOCK: usize = 8;

/// Per-splat accumulator: d_color (3), d_opacity, d_center (2), d_conic (3).
type SplatGrad = [f64; 9];

/// Accumulate gradients of `sum_pixels loss_grad . C` into `bundle`.
///
/// `forward` must come from a matching [`crate::raster::render`] call on the
/// same snapshot, camera and options; its per-pixel colors anchor the
/// suffix sums of the blending chain.
pub fn backward(
    snapshot: &FieldSnapshot<'_>,
    cam: &CameraView,
    opts: &RenderOptions,
    forward: &RenderOutput,
    loss_grad: &ImageRgb,
    groups: &ParamGroups,
    bundle: &mut GradientBundle,
) -> Result<(), DiffError> {
    let field = snapshot.field;
    let (w, h) = (cam.width as usize, cam.height as usize);
    if loss_grad.width != w || loss_grad.height != h {
        return Err(DiffError::ShapeMismatch(format!(
            "loss gradient {}x{} vs view {w}x{h}",
            loss_grad.width, loss_grad.height
        )));
    }
    if bundle.n_prims != field.primitives.len() {
        return Err(DiffError::ShapeMismatch(format!(
            "bundle holds {} primitives, field has {}",
            bundle.n_prims,
            field.primitives.len()
        )));
    }

    let appearance_used = snapshot.use_appearance && field.appearance.enabled;
    let want_appearance_chain =
        appearance_used && (groups.hash.enabled || groups.mlp.enabled || groups.position.enabled);
    let want_cov_chain = groups.log_scale.enabled
        || groups.rotation.enabled
        || groups.position.enabled
        || want_appearance_chain;

    // Appearance deltas with traces; deltas must match the forward pass.
    let traced: Option<Vec<(AppearanceDelta, AppearanceTrace)>> = appearance_used.then(|| {
        snapshot
            .active
            .par_iter()
            .map(|&i| field.appearance.delta_traced(&field.primitives[i].position, snapshot.t_norm))
            .collect()
    });
    let deltas: Option<Vec<AppearanceDelta>> =
        traced.as_ref().map(|t| t.iter().map(|(d, _)| d.clone()).collect());

    let splats = build_splats(snapshot, cam, opts, deltas.as_deref());
    let rows = row_buckets(&splats, h);

    // Phase A: per-pixel blending gradients, accumulated per splat.
    let n_blocks = h.div_ceil(ROW_BLOCK);
    let block_grads: Vec<Vec<SplatGrad>> = (0..n_blocks)
        .into_par_iter()
        .map(|b| {
            let mut acc = vec![[0.0; 9]; splats.len()];
            let y_end = ((b + 1) * ROW_BLOCK).min(h);
            for y in b * ROW_BLOCK..y_end {
                blend_row_backward(y, w, &splats, &rows[y], forward, loss_grad, &mut acc);
            }
            acc
        })
        .collect();
    let mut splat_grads = vec![[0.0; 9]; splats.len()];
    for block in block_grads {
        for (dst, src) in splat_grads.iter_mut().zip(block) {
            for k in 0..9 {
                dst[k] += src[k];
            }
        }
    }

    // Phase B: chain per-splat gradients to parameters (sequential; shared
    // hash/MLP accumulators stay deterministic).
    if want_appearance_chain {
        if bundle.hash.is_none() && bundle.scratch_hash.len() != field.appearance.grid.features.len()
        {
            bundle.scratch_hash = vec![0.0; field.appearance.grid.features.len()];
        }
        if bundle.mlp.is_none() && bundle.scratch_mlp.is_none() {
            bundle.scratch_mlp = Some(MlpGrads::zeros_like(&field.appearance.mlp));
        }
    }
    let cam_center = cam.center();
    let sh_coeffs = bundle.sh_coeffs;
    for (si, s) in splats.iter().enumerate() {
        let g = &splat_grads[si];
        let prim_idx = s.prim as usize;
        let prim = &field.primitives[prim_idx];
        bundle.visible[prim_idx] = true;

        let d_color = Vector3::new(g[0], g[1], g[2]);
        let d_opacity_eff = g[3];
        let d_center = Vector2::new(g[4], g[5]);
        let d_conic = Vector3::new(g[6], g[7], g[8]);

        if groups.position.enabled {
            bundle.screen_grad_norm[prim_idx] += d_center.norm();
        }

        let delta = traced.as_ref().map(|t| &t[s.active_slot as usize]);

        // --- Opacity / removal factor chain.
        let sigma = prim.opacity();
        let removal_active = snapshot.apply_removal && prim.removal_factor.is_some();
        if groups.opacity.enabled {
            let scale = if removal_active { psi(prim.removal_factor.unwrap()) } else { 1.0 };
            if let Some(buf) = &mut bundle.opacity {
                buf[prim_idx] += d_opacity_eff * scale * sigma * (1.0 - sigma);
            }
        }
        if groups.removal.enabled && removal_active {
            let m = prim.removal_factor.unwrap();
            if let Some(buf) = &mut bundle.removal {
                buf[prim_idx] += d_opacity_eff * sigma * psi_prime(m);
            }
        }

        // --- Color chain: per-channel clamp mask, SH basis, view direction.
        let mut d_mu = Vector3::zeros();
        let need_color_chain =
            groups.sh.enabled || want_appearance_chain || groups.position.enabled;
        let mut d_dsh: Vec<Vector3<f64>> = Vec::new();
        if need_color_chain {
            let v = prim.position - cam_center;
            let dist = v.norm();
            let dir = if dist > 0.0 { v / dist } else { Vector3::new(0.0, 0.0, 1.0) };
            let basis = sh::basis(field.sh_degree, &dir);
            // Pre-clamp channel values.
            let mut y = Vector3::new(0.5, 0.5, 0.5);
            for (k, b) in basis.iter().enumerate() {
                let mut c = prim.sh[k];
                if let Some((d, _)) = delta {
                    c += d.d_sh[k];
                }
                y += *b * c;
            }
            let mask = Vector3::new(
                if y.x > 0.0 && y.x < 1.0 { 1.0 } else { 0.0 },
                if y.y > 0.0 && y.y < 1.0 { 1.0 } else { 0.0 },
                if y.z > 0.0 && y.z < 1.0 { 1.0 } else { 0.0 },
            );
            let g_color = d_color.component_mul(&mask);

            if groups.sh.enabled || want_appearance_chain {
                if want_appearance_chain {
                    d_dsh = vec![Vector3::zeros(); sh_coeffs];
                }
                for (k, b) in basis.iter().enumerate() {
                    let gk = g_color * *b;
                    if let Some(buf) = &mut bundle.sh {
                        buf[prim_idx * sh_coeffs + k] += gk;
                    }
                    if want_appearance_chain {
                        d_dsh[k] = gk;
                    }
                }
            }
            if groups.position.enabled && dist > 0.0 {
                // Through the view direction: dir = v / |v|.
                let basis_grad = sh::basis_grad(field.sh_degree, &dir);
                let mut d_dir = Vector3::zeros();
                for (k, bg) in basis_grad.iter().enumerate() {
                    let mut c = prim.sh[k];
                    if let Some((d, _)) = delta {
                        c += d.d_sh[k];
                    }
                    d_dir += *bg * g_color.dot(&c);
                }
                d_mu += (d_dir - dir * dir.dot(&d_dir)) / dist;
            }
        }

        // --- Geometry chain.
        let mut d_log_scale_like = Vector3::zeros(); // shared by log_scale and delta_s
        if want_cov_chain {
            let p_cam = cam.world_to_camera(&prim.position);
            let j = projection_jacobian(cam, &p_cam);
            let a = j * cam.rotation;
            let ds = delta.map(|(d, _)| d.d_log_scale).unwrap_or_else(Vector3::zeros);
            let scales = (prim.log_scale + ds).map(f64::exp);
            let rot = quat_to_rotation(&prim.rotation);
            let m_mat = Matrix3::from_columns(&[
                rot.column(0) * scales.x,
                rot.column(1) * scales.y,
                rot.column(2) * scales.z,
            ]);
            let cov3d = m_mat * m_mat.transpose();

            // Conic gradient in full-matrix form.
            let g_q = Matrix2::new(d_conic.x, d_conic.y * 0.5, d_conic.y * 0.5, d_conic.z);
            let q = Matrix2::new(s.conic.x, s.conic.y, s.conic.y, s.conic.z);
            // d(inverse): dL/dCov2d = -Q G Q.
            let g_cov2d = -(q * g_q * q);
            // Cov2d = A Cov3d A^T + lowpass.
            let g_cov3d = a.transpose() * g_cov2d * a;
            let g_m = 2.0 * g_cov3d * m_mat;

            // Scales: column dot products; exp chain shared with delta_s.
            let d_s = Vector3::new(
                g_m.column(0).dot(&rot.column(0)),
                g_m.column(1).dot(&rot.column(1)),
                g_m.column(2).dot(&rot.column(2)),
            );
            d_log_scale_like = d_s.component_mul(&scales);
            if let Some(buf) = &mut bundle.log_scale {
                buf[prim_idx] += d_log_scale_like;
            }

            if groups.rotation.enabled {
                let g_r = Matrix3::from_columns(&[
                    g_m.column(0) * scales.x,
                    g_m.column(1) * scales.y,
                    g_m.column(2) * scales.z,
                ]);
                let d_q_hat = rotation_grad_to_quaternion(&g_r, &prim.rotation);
                if let Some(buf) = &mut bundle.rotation {
                    // Project through normalization (stored unit).
                    let qn = prim.rotation.norm();
                    let q_unit = prim.rotation / qn;
                    buf[prim_idx] += (d_q_hat - q_unit * q_unit.dot(&d_q_hat)) / qn;
                }
            }

            if groups.position.enabled {
                // Through the projected center.
                let mut d_p_cam = j.transpose() * d_center;
                // Through the Jacobian's dependence on the camera-space point.
                let g_a = 2.0 * g_cov2d * a * cov3d;
                let g_j = g_a * cam.rotation.transpose();
                let (x, y, z) = (p_cam.x, p_cam.y, p_cam.z);
                let inv_z2 = 1.0 / (z * z);
                let inv_z3 = inv_z2 / z;
                d_p_cam.x += g_j[(0, 2)] * (-cam.fx * inv_z2);
                d_p_cam.y += g_j[(1, 2)] * (-cam.fy * inv_z2);
                d_p_cam.z += g_j[(0, 0)] * (-cam.fx * inv_z2)
                    + g_j[(1, 1)] * (-cam.fy * inv_z2)
                    + g_j[(0, 2)] * (2.0 * cam.fx * x * inv_z3)
                    + g_j[(1, 2)] * (2.0 * cam.fy * y * inv_z3);
                d_mu += cam.rotation.transpose() * d_p_cam;
            }
        }

        // --- Appearance model chain (and its position contribution).
        if want_appearance_chain {
            let (_, trace) = delta.expect("appearance trace present");
            let (hash_buf, mlp_buf) = match (&mut bundle.hash, &mut bundle.mlp) {
                (Some(hb), Some(mb)) => (hb, mb),
                (Some(hb), None) => (hb, bundle.scratch_mlp.as_mut().expect("scratch mlp")),
                (None, Some(mb)) => (&mut bundle.scratch_hash, mb),
                (None, None) => (
                    &mut bundle.scratch_hash,
                    bundle.scratch_mlp.as_mut().expect("scratch mlp"),
                ),
            };
            let d_pos_enc =
                field.appearance.backward(trace, &d_log_scale_like, &d_dsh, hash_buf, mlp_buf);
            if groups.position.enabled {
                d_mu += d_pos_enc;
            }
        }

        if groups.position.enabled {
            if let Some(buf) = &mut bundle.position {
                buf[prim_idx] += d_mu;
            }
        }
    }

    bundle.check_finite()
}

fn blend_row_backward(
    y: usize,
    w: usize,
    splats: &[Splat],
    row_splats: &[u32],
    forward: &RenderOutput,
    loss_grad: &ImageRgb,
    acc: &mut [SplatGrad],
) {
    let py = y as f64 + 0.5;
    for x in 0..w {
        let gi = 3 * (y * w + x);
        let g_pix = Vector3::new(loss_grad.data[gi], loss_grad.data[gi + 1], loss_grad.data[gi + 2]);
        if g_pix == Vector3::zeros() {
            continue;
        }
        let c_final = Vector3::new(
            forward.color.data[gi],
            forward.color.data[gi + 1],
            forward.color.data[gi + 2],
        );
        let px = x as f64 + 0.5;
        let mut t = 1.0;
        let mut prefix = Vector3::zeros();
        for &si in row_splats {
            let s = &splats[si as usize];
            if x < s.x_min || x > s.x_max {
                continue;
            }
            let dx = px - s.center.x;
            let dy = py - s.center.y;
            let power = -0.5 * (s.conic.x * dx * dx + s.conic.z * dy * dy) - s.conic.y * dx * dy;
            if power > 0.0 {
                continue;
            }
            let g_exp = power.exp();
            let alpha_raw = s.opacity * g_exp;
            let clamped = alpha_raw > ALPHA_CLAMP;
            let alpha = if clamped { ALPHA_CLAMP } else { alpha_raw };
            if alpha < ALPHA_SKIP {
                continue;
            }
            let weight = alpha * t;
            prefix += s.color * weight;

            let a = &mut acc[si as usize];
            // d/d(color): alpha T per channel.
            a[0] += g_pix.x * weight;
            a[1] += g_pix.y * weight;
            a[2] += g_pix.z * weight;

            // d/d(alpha): own term minus the suffix attenuation.
            let suffix = c_final - prefix;
            let d_c_d_alpha = s.color * t - suffix / (1.0 - alpha);
            let d_alpha = g_pix.dot(&d_c_d_alpha);
            if !clamped {
                a[3] += d_alpha * g_exp;
                let g_pow = d_alpha * alpha;
                a[4] += g_pow * (s.conic.x * dx + s.conic.y * dy);
                a[5] += g_pow * (s.conic.z * dy + s.conic.y * dx);
                a[6] += g_pow * (-0.5 * dx * dx);
                a[7] += g_pow * (-dx * dy);
                a[8] += g_pow * (-0.5 * dy * dy);
            }

            t *= 1.0 - alpha;
            if t < EARLY_STOP_T {
                break;
            }
        }
    }
}

/// Frobenius inner products of the rotation-matrix gradient with dR/dq at a
/// unit quaternion (w, x, y, z).
fn rotation_grad_to_quaternion(g: &Matrix3<f64>, q: &Vector4<f64>) -> Vector4<f64> {
    let n = q.norm();
    let (w, x, y, z) = (q[0] / n, q[1] / n, q[2] / n, q[3] / n);
    let dw = -2.0 * z * g[(0, 1)] + 2.0 * y * g[(0, 2)] + 2.0 * z * g[(1, 0)]
        - 2.0 * x * g[(1, 2)]
        - 2.0 * y * g[(2, 0)]
        + 2.0 * x * g[(2, 1)];
    let dx = 2.0 * y * g[(0, 1)]
        + 2.0 * z * g[(0, 2)]
        + 2.0 * y * g[(1, 0)]
        - 4.0 * x * g[(1, 1)]
        - 2.0 * w * g[(1, 2)]
        + 2.0 * z * g[(2, 0)]
        + 2.0 * w * g[(2, 1)]
        - 4.0 * x * g[(2, 2)];
    let dy = -4.0 * y * g[(0, 0)]
        + 2.0 * x * g[(0, 1)]
        + 2.0 * w * g[(0, 2)]
        + 2.0 * x * g[(1, 0)]
        + 2.0 * z * g[(1, 2)]
        - 2.0 * w * g[(2, 0)]
        + 2.0 * z * g[(2, 1)]
        - 4.0 * y * g[(2, 2)];
    let dz = -4.0 * z * g[(0, 0)] - 2.0 * w * g[(0, 1)]
        + 2.0 * x * g[(0, 2)]
        + 2.0 * w * g[(1, 0)]
        - 4.0 * z * g[(1, 1)]
        + 2.0 * y * g[(1, 2)]
        + 2.0 * x * g[(2, 0)]
        + 2.0 * y * g[(2, 1)];
    Vector4::new(dw, dx, dy, dz)
}


#[cfg(test)]
mod tests {
    use super::*;
    use crate::appearance::AppearanceModel;
    use crate::scene::{logit, Gaussian, GaussianField, Origin, VisibilityPool};

    fn tiny_field(prims: Vec<Gaussian>) -> GaussianField {
        let mut pool = VisibilityPool::default();
        for _ in 0..prims.len() {
            pool.push(0, Origin::Initial);
        }
        let mut f = GaussianField {
            primitives: prims,
            appearance: AppearanceModel::disabled(1),
            pool,
            time_records: Vec::new(),
            current_step: 0,
            sh_degree: 1,
            scene_extent: 4.0,
        };
        f.append_step(Vec::new());
        f
    }

    fn center_cam() -> CameraView {
        CameraView::new(
            9,
            9,
            12.0,
            12.0,
            4.5,
            4.5,
            Matrix3::identity(),
            Vector3::zeros(),
        )
        .unwrap()
    }

    #[test]
    fn zero_loss_grad_gives_zero_bundle() {
        let mut g = Gaussian::new(Vector3::new(0.0, 0.0, 5.0), 1);
        g.opacity_logit = logit(0.7);
        g.log_scale = Vector3::repeat(0.4f64.ln());
        g.sh[0] = sh::dc_from_color(Vector3::new(0.6, 0.4, 0.2));
        let field = tiny_field(vec![g]);
        let cam = center_cam();
        let opts = RenderOptions::default();
        let snapshot = field.current_view(false);
        let out = crate::raster::render(&snapshot, &cam, &opts);
        let groups = ParamGroups {
            position: super::super::GroupSettings::on(1.0),
            log_scale: super::super::GroupSettings::on(1.0),
            rotation: super::super::GroupSettings::on(1.0),
            opacity: super::super::GroupSettings::on(1.0),
            sh: super::super::GroupSettings::on(1.0),
            removal: super::super::GroupSettings::off(),
            hash: super::super::GroupSettings::off(),
            mlp: super::super::GroupSettings::off(),
        };
        let mut bundle = GradientBundle::new(&field, &groups);
        let zeros = ImageRgb::new(9, 9);
        backward(&snapshot, &cam, &opts, &out, &zeros, &groups, &mut bundle).unwrap();
        assert!(bundle.position.unwrap().iter().all(|v| *v == Vector3::zeros()));
        assert!(bundle.opacity.unwrap().iter().all(|v| *v == 0.0));
        assert!(bundle.sh.unwrap().iter().all(|v| *v == Vector3::zeros()));
    }

    #[test]
    fn opacity_gradient_closed_form_at_center() {
        // Single Gaussian, pixel at its center: C = sigma c + (1 - sigma) bg,
        // so dC/d(sigma) = c - bg and the logit chain multiplies s(1-s).
        let sigma = 0.55;
        let color = Vector3::new(0.8, 0.25, 0.4);
        let bg = Vector3::new(0.1, 0.1, 0.1);
        let mut g = Gaussian::new(Vector3::new(0.0, 0.0, 5.0), 1);
        g.opacity_logit = logit(sigma);
        g.log_scale = Vector3::repeat(0.35f64.ln());
        g.sh[0] = sh::dc_from_color(color);
        let field = tiny_field(vec![g]);
        let cam = center_cam();
        let opts = RenderOptions { background: bg, ..Default::default() };
        let snapshot = field.current_view(false);
        let out = crate::raster::render(&snapshot, &cam, &opts);

        let mut groups = ParamGroups::all_off();
        groups.opacity = super::super::GroupSettings::on(1.0);
        let mut bundle = GradientBundle::new(&field, &groups);
        // Loss grad 1.0 on channel 0 of the center pixel only.
        let mut lg = ImageRgb::new(9, 9);
        lg.data[3 * (4 * 9 + 4)] = 1.0;
        backward(&snapshot, &cam, &opts, &out, &lg, &groups, &mut bundle).unwrap();
        let expected = (color.x - bg.x) * sigma * (1.0 - sigma);
        let got = bundle.opacity.unwrap()[0];
        assert!((got - expected).abs() < 1e-10, "{got} vs {expected}");
    }
}
