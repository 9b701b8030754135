//! Reverse-mode gradients, the optimizer, and the finite-difference audit.

mod adam;
mod backward;
mod gradcheck;

pub use adam::{quadratic_probe, FieldOptimizer, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use backward::backward;
pub use gradcheck::{gradcheck, GradcheckConfig, GradcheckReport, GroupReport};

use crate::appearance::MlpGrads;
use crate::scene::GaussianField;
use nalgebra::{Vector3, Vector4};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DiffError {
    #[error("non-finite gradient in parameter group `{group}`")]
    NonFinite { group: &'static str },
    #[error("gradient bundle shape mismatch: {0}")]
    ShapeMismatch(String),
}

/// Per-group optimizer settings. Stages toggle `enabled`, never the set of
/// groups itself.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroupSettings {
    pub enabled: bool,
    pub lr: f64,
}

impl GroupSettings {
    pub fn off() -> Self {
        Self { enabled: false, lr: 0.0 }
    }

    pub fn on(lr: f64) -> Self {
        Self { enabled: true, lr }
    }
}

/// Which parameter groups participate in the current stage, with their
/// learning rates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParamGroups {
    pub position: GroupSettings,
    pub log_scale: GroupSettings,
    pub rotation: GroupSettings,
    pub opacity: GroupSettings,
    pub sh: GroupSettings,
    pub removal: GroupSettings,
    pub hash: GroupSettings,
    pub mlp: GroupSettings,
}

impl ParamGroups {
    pub fn all_off() -> Self {
        Self {
            position: GroupSettings::off(),
            log_scale: GroupSettings::off(),
            rotation: GroupSettings::off(),
            opacity: GroupSettings::off(),
            sh: GroupSettings::off(),
            removal: GroupSettings::off(),
            hash: GroupSettings::off(),
            mlp: GroupSettings::off(),
        }
    }

    pub fn geometry_enabled(&self) -> bool {
        self.position.enabled
            || self.log_scale.enabled
            || self.rotation.enabled
            || self.opacity.enabled
            || self.sh.enabled
    }
}

/// Gradients for every enabled group. Disabled groups stay `None`; primitive
/// groups are indexed by global primitive slot.
#[derive(Debug, Clone)]
pub struct GradientBundle {
    pub n_prims: usize,
    pub sh_coeffs: usize,
    pub position: Option<Vec<Vector3<f64>>>,
    pub log_scale: Option<Vec<Vector3<f64>>>,
    pub rotation: Option<Vec<Vector4<f64>>>,
    pub opacity: Option<Vec<f64>>,
    /// Flat: `prim * sh_coeffs + k`.
    pub sh: Option<Vec<Vector3<f64>>>,
    pub removal: Option<Vec<f64>>,
    /// Dense feature-table gradient, same layout as the grid.
    pub hash: Option<Vec<f64>>,
    pub mlp: Option<MlpGrads>,
    /// Screen-space positional gradient norms feeding densification; only
    /// populated when the position group is enabled.
    pub screen_grad_norm: Vec<f64>,
    /// Marks primitives that produced at least one splat this pass.
    pub visible: Vec<bool>,
    // Scratch space so the appearance chain can run (for position gradients)
    // even when the hash/MLP groups are frozen.
    pub(crate) scratch_hash: Vec<f64>,
    pub(crate) scratch_mlp: Option<MlpGrads>,
}

impl GradientBundle {
    pub fn new(field: &GaussianField, groups: &ParamGroups) -> Self {
        let n = field.primitives.len();
        let sh_coeffs = crate::sh::coeff_count(field.sh_degree);
        Self {
            n_prims: n,
            sh_coeffs,
            position: groups.position.enabled.then(|| vec![Vector3::zeros(); n]),
            log_scale: groups.log_scale.enabled.then(|| vec![Vector3::zeros(); n]),
            rotation: groups.rotation.enabled.then(|| vec![Vector4::zeros(); n]),
            opacity: groups.opacity.enabled.then(|| vec![0.0; n]),
            sh: groups.sh.enabled.then(|| vec![Vector3::zeros(); n * sh_coeffs]),
            removal: groups.removal.enabled.then(|| vec![0.0; n]),
            hash: groups.hash.enabled.then(|| vec![0.0; field.appearance.grid.features.len()]),
            mlp: groups.mlp.enabled.then(|| MlpGrads::zeros_like(&field.appearance.mlp)),
            screen_grad_norm: vec![0.0; n],
            visible: vec![false; n],
            scratch_hash: Vec::new(),
            scratch_mlp: None,
        }
    }

    /// Reset all gradients, growing primitive-indexed buffers if the field
    /// gained primitives since the last pass.
    pub fn reset(&mut self, n_prims: usize) {
        self.n_prims = n_prims;
        let k = self.sh_coeffs;
        if let Some(v) = &mut self.position {
            v.clear();
            v.resize(n_prims, Vector3::zeros());
        }
        if let Some(v) = &mut self.log_scale {
            v.clear();
            v.resize(n_prims, Vector3::zeros());
        }
        if let Some(v) = &mut self.rotation {
            v.clear();
            v.resize(n_prims, Vector4::zeros());
        }
        if let Some(v) = &mut self.opacity {
            v.clear();
            v.resize(n_prims, 0.0);
        }
        if let Some(v) = &mut self.sh {
            v.clear();
            v.resize(n_prims * k, Vector3::zeros());
        }
        if let Some(v) = &mut self.removal {
            v.clear();
            v.resize(n_prims, 0.0);
        }
        if let Some(v) = &mut self.hash {
            v.iter_mut().for_each(|g| *g = 0.0);
        }
        if let Some(m) = &mut self.mlp {
            m.zero();
        }
        self.screen_grad_norm.clear();
        self.screen_grad_norm.resize(n_prims, 0.0);
        self.visible.clear();
        self.visible.resize(n_prims, false);
        self.scratch_hash.iter_mut().for_each(|g| *g = 0.0);
        if let Some(m) = &mut self.scratch_mlp {
            m.zero();
        }
    }

    /// Check every enabled gradient buffer for non-finite values.
    pub fn check_finite(&self) -> Result<(), DiffError> {
        let bad = |vals: &[f64]| vals.iter().any(|v| !v.is_finite());
        if self.position.as_ref().is_some_and(|v| v.iter().any(|g| !g.x.is_finite() || !g.y.is_finite() || !g.z.is_finite())) {
            return Err(DiffError::NonFinite { group: "position" });
        }
        if self.log_scale.as_ref().is_some_and(|v| v.iter().any(|g| !g.iter().all(|x| x.is_finite()))) {
            return Err(DiffError::NonFinite { group: "log_scale" });
        }
        if self.rotation.as_ref().is_some_and(|v| v.iter().any(|g| !g.iter().all(|x| x.is_finite()))) {
            return Err(DiffError::NonFinite { group: "rotation" });
        }
        if self.opacity.as_ref().is_some_and(|v| bad(v)) {
            return Err(DiffError::NonFinite { group: "opacity" });
        }
        if self.sh.as_ref().is_some_and(|v| v.iter().any(|g| !g.iter().all(|x| x.is_finite()))) {
            return Err(DiffError::NonFinite { group: "sh" });
        }
        if self.removal.as_ref().is_some_and(|v| bad(v)) {
            return Err(DiffError::NonFinite { group: "removal_factor" });
        }
        if self.hash.as_ref().is_some_and(|v| bad(v)) {
            return Err(DiffError::NonFinite { group: "hash_features" });
        }
        if let Some(m) = &self.mlp {
            if bad(&m.w1) || bad(&m.b1) || bad(&m.w2) || bad(&m.b2) {
                return Err(DiffError::NonFinite { group: "mlp_weights" });
            }
        }
        Ok(())
    }
}
