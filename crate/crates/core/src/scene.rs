//! Gaussian field representation: primitives, lifecycle pool, time records.

use crate::appearance::AppearanceModel;
use crate::camera::CameraView;
use nalgebra::{Matrix3, Vector3, Vector4};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FieldError {
    #[error("step {step} out of range (current step {current})")]
    StepOutOfRange { step: u32, current: u32 },
    #[error("step {0} has no time record")]
    UnknownStep(u32),
}

/// Where a primitive came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Origin {
    Initial,
    AddedAtStep(u32),
}

/// One anisotropic 3D Gaussian. Scales live in log domain and opacity as a
/// logit so optimizer steps cannot leave the valid domain. The quaternion is
/// stored (w, x, y, z) and renormalized after every optimizer step.
#[derive(Debug, Clone, PartialEq)]
pub struct Gaussian {
    pub position: Vector3<f64>,
    pub log_scale: Vector3<f64>,
    pub rotation: Vector4<f64>,
    pub opacity_logit: f64,
    /// One RGB triple per SH basis function.
    pub sh: Vec<Vector3<f64>>,
    /// Learnable removal factor m; present only while a layout update is
    /// being trained.
    pub removal_factor: Option<f64>,
    /// Oracle provenance for test audits; never read by the pipeline.
    pub object_id: Option<u32>,
}

impl Gaussian {
    pub fn new(position: Vector3<f64>, sh_degree: usize) -> Self {
        Self {
            position,
            log_scale: Vector3::zeros(),
            rotation: Vector4::new(1.0, 0.0, 0.0, 0.0),
            opacity_logit: 0.0,
            sh: vec![Vector3::zeros(); crate::sh::coeff_count(sh_degree)],
            removal_factor: None,
            object_id: None,
        }
    }

    pub fn opacity(&self) -> f64 {
        sigmoid(self.opacity_logit)
    }

    pub fn scale(&self) -> Vector3<f64> {
        self.log_scale.map(f64::exp)
    }

    pub fn normalize_rotation(&mut self) {
        let n = self.rotation.norm();
        if n > 0.0 {
            self.rotation /= n;
        } else {
            self.rotation = Vector4::new(1.0, 0.0, 0.0, 0.0);
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Rotation matrix of a quaternion, normalizing first.
pub fn quat_to_rotation(q: &Vector4<f64>) -> Matrix3<f64> {
    let n = q.norm();
    let (w, x, y, z) = (q[0] / n, q[1] / n, q[2] / n, q[3] / n);
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// 3D covariance R S S^T R^T with S = diag(exp(log_scale + delta_s)).
/// Symmetric positive semi-definite by construction.
pub fn covariance_of(p: &Gaussian, delta_s: &Vector3<f64>) -> Matrix3<f64> {
    let r = quat_to_rotation(&p.rotation);
    let s = (p.log_scale + delta_s).map(f64::exp);
    let m = Matrix3::from_columns(&[r.column(0) * s.x, r.column(1) * s.y, r.column(2) * s.z]);
    m * m.transpose()
}

/// Per-primitive lifecycle. A primitive is active at step t iff
/// `birth_step <= t` and (`death_step` unset or `t < death_step`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LifecycleRecord {
    pub birth_step: u32,
    pub death_step: Option<u32>,
    pub origin: Origin,
}

/// Lifecycle ledger with exactly one record per primitive. Death marks
/// deactivation, never deletion, so any past step stays reconstructible.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct VisibilityPool {
    records: Vec<LifecycleRecord>,
}

impl VisibilityPool {
    pub fn push(&mut self, birth_step: u32, origin: Origin) {
        self.records.push(LifecycleRecord { birth_step, death_step: None, origin });
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn record(&self, idx: usize) -> &LifecycleRecord {
        &self.records[idx]
    }

    pub fn records(&self) -> &[LifecycleRecord] {
        &self.records
    }

    pub fn is_active(&self, idx: usize, step: u32) -> bool {
        let r = &self.records[idx];
        r.birth_step <= step && r.death_step.map_or(true, |d| step < d)
    }

    /// Mark a primitive inactive from `step` on. Once set, the death step
    /// never changes.
    pub fn deactivate(&mut self, idx: usize, step: u32) {
        let r = &mut self.records[idx];
        if r.death_step.is_none() {
            r.death_step = Some(step);
        }
    }

    pub fn restore(&mut self, records: Vec<LifecycleRecord>) {
        self.records = records;
    }
}

/// Cameras and normalized time of one recorded step.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeStepRecord {
    pub step: u32,
    pub t_norm: f64,
    pub replay_cameras: Vec<CameraView>,
}

/// The persistent artifact state: primitives, appearance model, lifecycle
/// pool and time records.
#[derive(Debug, Clone)]
pub struct GaussianField {
    pub primitives: Vec<Gaussian>,
    pub appearance: AppearanceModel,
    pub pool: VisibilityPool,
    pub time_records: Vec<TimeStepRecord>,
    pub current_step: u32,
    pub sh_degree: usize,
    /// Diagonal of the initial point cloud's bounding box; used for
    /// extent-relative defaults.
    pub scene_extent: f64,
}

impl GaussianField {
    /// Indices of the primitives active at `step`, in storage order.
    pub fn active_indices(&self, step: u32) -> Result<Vec<usize>, FieldError> {
        if step > self.current_step {
            return Err(FieldError::StepOutOfRange { step, current: self.current_step });
        }
        Ok((0..self.pool.len()).filter(|&i| self.pool.is_active(i, step)).collect())
    }

    pub fn time_record(&self, step: u32) -> Result<&TimeStepRecord, FieldError> {
        self.time_records
            .iter()
            .find(|r| r.step == step)
            .ok_or(FieldError::UnknownStep(step))
    }

    /// Render-ready view of the field as it was at `step`. Does not mutate
    /// the field; consecutive calls yield identical active sets.
    pub fn recall(&self, step: u32) -> Result<FieldSnapshot<'_>, FieldError> {
        let record = self.time_record(step)?;
        Ok(FieldSnapshot {
            field: self,
            active: self.active_indices(step)?,
            step,
            t_norm: record.t_norm,
            use_appearance: true,
            apply_removal: false,
        })
    }

    /// View of the current step with removal factors applied where present.
    pub fn current_view(&self, apply_removal: bool) -> FieldSnapshot<'_> {
        let step = self.current_step;
        FieldSnapshot {
            field: self,
            active: self
                .active_indices(step)
                .expect("current step is always in range"),
            step,
            t_norm: self.time_record(step).map(|r| r.t_norm).unwrap_or(0.0),
            use_appearance: true,
            apply_removal,
        }
    }

    /// Append a record for the next step and renormalize all t_norm values
    /// to keep first = 0 and last = 1.
    pub fn append_step(&mut self, replay_cameras: Vec<CameraView>) -> u32 {
        let step = if self.time_records.is_empty() { 0 } else { self.current_step + 1 };
        self.time_records.push(TimeStepRecord { step, t_norm: 0.0, replay_cameras });
        self.current_step = step;
        self.renormalize_time();
        step
    }

    fn renormalize_time(&mut self) {
        let n = self.time_records.len();
        if n <= 1 {
            if let Some(r) = self.time_records.first_mut() {
                r.t_norm = 0.0;
            }
            return;
        }
        for (k, r) in self.time_records.iter_mut().enumerate() {
            r.t_norm = k as f64 / (n - 1) as f64;
        }
    }
}

/// Borrowed, render-ready snapshot of a field at one step. Safe to hand to
/// parallel render workers; the single-writer training loop owns mutation.
#[derive(Debug, Clone)]
pub struct FieldSnapshot<'a> {
    pub field: &'a GaussianField,
    pub active: Vec<usize>,
    pub step: u32,
    pub t_norm: f64,
    pub use_appearance: bool,
    pub apply_removal: bool,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::appearance::AppearanceModel;
    use approx::assert_relative_eq;
    use nalgebra::UnitQuaternion;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn empty_field() -> GaussianField {
        GaussianField {
            primitives: Vec::new(),
            appearance: AppearanceModel::disabled(1),
            pool: VisibilityPool::default(),
            time_records: Vec::new(),
            current_step: 0,
            sh_degree: 1,
            scene_extent: 1.0,
        }
    }

    #[test]
    fn covariance_identity() {
        let g = Gaussian::new(Vector3::zeros(), 1);
        let cov = covariance_of(&g, &Vector3::zeros());
        assert_relative_eq!(cov, Matrix3::identity(), epsilon = 1e-14);
    }

    #[test]
    fn covariance_diagonal_squares() {
        let mut g = Gaussian::new(Vector3::zeros(), 1);
        g.log_scale = Vector3::new(2.0f64.ln(), 0.0, 0.0);
        let cov = covariance_of(&g, &Vector3::zeros());
        assert_relative_eq!(cov, Matrix3::from_diagonal(&Vector3::new(4.0, 1.0, 1.0)), epsilon = 1e-12);
    }

    #[test]
    fn covariance_matches_independent_matrix_route() {
        // Oracle: build R via nalgebra's unit quaternion, square the scales,
        // and multiply the three factors directly.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let mut g = Gaussian::new(Vector3::zeros(), 1);
            g.rotation = Vector4::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            );
            if g.rotation.norm() < 1e-3 {
                continue;
            }
            g.log_scale = Vector3::new(
                rng.gen_range(-1.5..1.0),
                rng.gen_range(-1.5..1.0),
                rng.gen_range(-1.5..1.0),
            );
            let ds = Vector3::new(
                rng.gen_range(-0.2..0.2),
                rng.gen_range(-0.2..0.2),
                rng.gen_range(-0.2..0.2),
            );

            let q = g.rotation.normalize();
            let uq = UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(
                q[0], q[1], q[2], q[3],
            ));
            let r = uq.to_rotation_matrix().into_inner();
            let s2 = (g.log_scale + ds).map(|v| (2.0 * v).exp());
            let expected = r * Matrix3::from_diagonal(&s2) * r.transpose();

            let cov = covariance_of(&g, &ds);
            assert_relative_eq!(cov, expected, epsilon = 1e-12);
            // Symmetric PSD.
            assert_relative_eq!(cov, cov.transpose(), epsilon = 1e-14);
            let eig = cov.symmetric_eigenvalues();
            assert!(eig.iter().all(|&l| l > -1e-12));
        }
    }

    #[test]
    fn active_indices_fresh_field() {
        let mut f = empty_field();
        for i in 0..5 {
            f.primitives.push(Gaussian::new(Vector3::new(i as f64, 0.0, 0.0), 1));
            f.pool.push(0, Origin::Initial);
        }
        f.append_step(Vec::new());
        assert_eq!(f.active_indices(0).unwrap(), vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn deactivation_is_half_open() {
        let mut f = empty_field();
        f.primitives.push(Gaussian::new(Vector3::zeros(), 1));
        f.pool.push(0, Origin::Initial);
        f.append_step(Vec::new());
        f.append_step(Vec::new());
        f.pool.deactivate(0, 1);
        assert_eq!(f.active_indices(0).unwrap(), vec![0]);
        assert!(f.active_indices(1).unwrap().is_empty());
    }

    #[test]
    fn additions_join_at_their_step() {
        let mut f = empty_field();
        for _ in 0..10 {
            f.primitives.push(Gaussian::new(Vector3::zeros(), 1));
            f.pool.push(0, Origin::Initial);
        }
        f.append_step(Vec::new());
        f.append_step(Vec::new());
        f.append_step(Vec::new());
        for _ in 0..3 {
            f.primitives.push(Gaussian::new(Vector3::zeros(), 1));
            f.pool.push(2, Origin::AddedAtStep(2));
        }
        assert_eq!(f.active_indices(1).unwrap().len(), 10);
        assert_eq!(f.active_indices(2).unwrap().len(), 13);
    }

    #[test]
    fn death_step_is_immutable() {
        let mut pool = VisibilityPool::default();
        pool.push(0, Origin::Initial);
        pool.deactivate(0, 3);
        pool.deactivate(0, 7);
        assert_eq!(pool.record(0).death_step, Some(3));
    }

    #[test]
    fn step_out_of_range_errors() {
        let mut f = empty_field();
        f.append_step(Vec::new());
        assert!(matches!(f.active_indices(5), Err(FieldError::StepOutOfRange { .. })));
        assert!(matches!(f.recall(5), Err(FieldError::UnknownStep(5) | FieldError::StepOutOfRange { .. })));
    }

    #[test]
    fn t_norm_renormalizes_on_append() {
        let mut f = empty_field();
        f.append_step(Vec::new());
        assert_eq!(f.time_records[0].t_norm, 0.0);
        f.append_step(Vec::new());
        assert_eq!(f.time_records[0].t_norm, 0.0);
        assert_eq!(f.time_records[1].t_norm, 1.0);
        f.append_step(Vec::new());
        assert_eq!(f.time_records[1].t_norm, 0.5);
        assert_eq!(f.time_records[2].t_norm, 1.0);
        // Strictly increasing.
        for w in f.time_records.windows(2) {
            assert!(w[0].t_norm < w[1].t_norm);
        }
    }

    #[test]
    fn recall_is_pure() {
        let mut f = empty_field();
        for _ in 0..4 {
            f.primitives.push(Gaussian::new(Vector3::zeros(), 1));
            f.pool.push(0, Origin::Initial);
        }
        f.append_step(Vec::new());
        let a = f.recall(0).unwrap().active;
        let b = f.recall(0).unwrap().active;
        assert_eq!(a, b);
    }
}
