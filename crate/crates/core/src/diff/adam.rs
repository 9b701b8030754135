//! Adaptive moment estimation over the field's parameter groups.

use super::{DiffError, GradientBundle, ParamGroups};
use crate::scene::GaussianField;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-15;

/// First/second moment buffers for one flat parameter tensor. Grows with
/// zeros when primitives are added.
#[derive(Debug, Clone, Default)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Moments {
    fn ensure_len(&mut self, n: usize) {
        if self.m.len() < n {
            self.m.resize(n, 0.0);
            self.v.resize(n, 0.0);
        }
    }

    fn begin_step(&mut self) -> (f64, f64) {
        self.t += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
        (bc1, bc2)
    }

    /// Update moments for one scalar and return the parameter delta.
    #[inline]
    fn delta(&mut self, idx: usize, grad: f64, lr: f64, bc1: f64, bc2: f64) -> f64 {
        let m = ADAM_BETA1 * self.m[idx] + (1.0 - ADAM_BETA1) * grad;
        let v = ADAM_BETA2 * self.v[idx] + (1.0 - ADAM_BETA2) * grad * grad;
        self.m[idx] = m;
        self.v[idx] = v;
        let m_hat = m / bc1;
        let v_hat = v / bc2;
        -lr * m_hat / (v_hat.sqrt() + ADAM_EPS)
    }
}

/// Optimizer state for every parameter group of one field.
#[derive(Debug, Clone, Default)]
pub struct FieldOptimizer {
    position: Moments,
    log_scale: Moments,
    rotation: Moments,
    opacity: Moments,
    sh: Moments,
    removal: Moments,
    hash: Moments,
    mlp_w1: Moments,
    mlp_b1: Moments,
    mlp_w2: Moments,
    mlp_b2: Moments,
}

impl FieldOptimizer {
    pub fn new() -> Self {
        Self::default()
    }

    /// Apply one optimizer step. Primitive groups update only rows where
    /// `trainable` is set; quaternions are renormalized afterward. Disabled
    /// groups are left bit-identical (their moments do not advance).
    pub fn step(
        &mut self,
        field: &mut GaussianField,
        bundle: &GradientBundle,
        groups: &ParamGroups,
        trainable: &[bool],
    ) -> Result<(), DiffError> {
        let n = field.primitives.len();
        if bundle.n_prims != n || trainable.len() != n {
            return Err(DiffError::ShapeMismatch(format!(
                "optimizer: field {n}, bundle {}, trainable {}",
                bundle.n_prims,
                trainable.len()
            )));
        }

        if groups.position.enabled {
            let grads = bundle.position.as_ref().ok_or(DiffError::ShapeMismatch(
                "position group enabled without gradients".into(),
            ))?;
            // Position steps scale with the scene so the default rate is
            // resolution independent.
            let lr = groups.position.lr * field.scene_extent;
            self.position.ensure_len(3 * n);
            let (bc1, bc2) = self.position.begin_step();
            for (i, prim) in field.primitives.iter_mut().enumerate() {
                if !trainable[i] {
                    continue;
                }
                for d in 0..3 {
                    prim.position[d] += self.position.delta(3 * i + d, grads[i][d], lr, bc1, bc2);
                }
            }
        }

        if groups.log_scale.enabled {
            let grads = bundle.log_scale.as_ref().ok_or(DiffError::ShapeMismatch(
                "log_scale group enabled without gradients".into(),
            ))?;
            self.log_scale.ensure_len(3 * n);
            let (bc1, bc2) = self.log_scale.begin_step();
            for (i, prim) in field.primitives.iter_mut().enumerate() {
                if !trainable[i] {
                    continue;
                }
                for d in 0..3 {
                    prim.log_scale[d] +=
                        self.log_scale.delta(3 * i + d, grads[i][d], groups.log_scale.lr, bc1, bc2);
                }
            }
        }

        if groups.rotation.enabled {
            let grads = bundle.rotation.as_ref().ok_or(DiffError::ShapeMismatch(
                "rotation group enabled without gradients".into(),
            ))?;
            self.rotation.ensure_len(4 * n);
            let (bc1, bc2) = self.rotation.begin_step();
            for (i, prim) in field.primitives.iter_mut().enumerate() {
                if !trainable[i] {
                    continue;
                }
                for d in 0..4 {
                    prim.rotation[d] +=
                        self.rotation.delta(4 * i + d, grads[i][d], groups.rotation.lr, bc1, bc2);
                }
                prim.normalize_rotation();
            }
        }

        if groups.opacity.enabled {
            let grads = bundle.opacity.as_ref().ok_or(DiffError::ShapeMismatch(
                "opacity group enabled without gradients".into(),
            ))?;
            self.opacity.ensure_len(n);
            let (bc1, bc2) = self.opacity.begin_step();
            for (i, prim) in field.primitives.iter_mut().enumerate() {
                if !trainable[i] {
                    continue;
                }
                prim.opacity_logit += self.opacity.delta(i, grads[i], groups.opacity.lr, bc1, bc2);
            }
        }

        if groups.sh.enabled {
            let grads = bundle.sh.as_ref().ok_or(DiffError::ShapeMismatch(
                "sh group enabled without gradients".into(),
            ))?;
            let k = bundle.sh_coeffs;
            self.sh.ensure_len(3 * k * n);
            let (bc1, bc2) = self.sh.begin_step();
            for (i, prim) in field.primitives.iter_mut().enumerate() {
                if !trainable[i] {
                    continue;
                }
                for c in 0..k {
                    let g = &grads[i * k + c];
                    for d in 0..3 {
                        prim.sh[c][d] += self.sh.delta(
                            (i * k + c) * 3 + d,
                            g[d],
                            groups.sh.lr,
                            bc1,
                            bc2,
                        );
                    }
                }
            }
        }

        if groups.removal.enabled {
            let grads = bundle.removal.as_ref().ok_or(DiffError::ShapeMismatch(
                "removal group enabled without gradients".into(),
            ))?;
            self.removal.ensure_len(n);
            let (bc1, bc2) = self.removal.begin_step();
            for (i, prim) in field.primitives.iter_mut().enumerate() {
                if let Some(m) = prim.removal_factor.as_mut() {
                    *m += self.removal.delta(i, grads[i], groups.removal.lr, bc1, bc2);
                }
            }
        }

        if groups.hash.enabled {
            let grads = bundle.hash.as_ref().ok_or(DiffError::ShapeMismatch(
                "hash group enabled without gradients".into(),
            ))?;
            let feats = &mut field.appearance.grid.features;
            if grads.len() != feats.len() {
                return Err(DiffError::ShapeMismatch("hash gradient size".into()));
            }
            self.hash.ensure_len(feats.len());
            let (bc1, bc2) = self.hash.begin_step();
            for (i, f) in feats.iter_mut().enumerate() {
                *f += self.hash.delta(i, grads[i], groups.hash.lr, bc1, bc2);
            }
        }

        if groups.mlp.enabled {
            let grads = bundle.mlp.as_ref().ok_or(DiffError::ShapeMismatch(
                "mlp group enabled without gradients".into(),
            ))?;
            let mlp = &mut field.appearance.mlp;
            let lr = groups.mlp.lr;
            Self::step_tensor(&mut self.mlp_w1, &mut mlp.w1, &grads.w1, lr)?;
            Self::step_tensor(&mut self.mlp_b1, &mut mlp.b1, &grads.b1, lr)?;
            Self::step_tensor(&mut self.mlp_w2, &mut mlp.w2, &grads.w2, lr)?;
            Self::step_tensor(&mut self.mlp_b2, &mut mlp.b2, &grads.b2, lr)?;
        }

        Ok(())
    }

    fn step_tensor(
        state: &mut Moments,
        params: &mut [f64],
        grads: &[f64],
        lr: f64,
    ) -> Result<(), DiffError> {
        if params.len() != grads.len() {
            return Err(DiffError::ShapeMismatch("mlp tensor size".into()));
        }
        state.ensure_len(params.len());
        let (bc1, bc2) = state.begin_step();
        for (i, p) in params.iter_mut().enumerate() {
            *p += state.delta(i, grads[i], lr, bc1, bc2);
        }
        Ok(())
    }
}

/// Run Adam on the closed-form quadratic |x - target|^2; used by tests to
/// pin convergence behavior.
pub fn quadratic_probe(start: &[f64], target: &[f64], lr: f64, steps: usize) -> Vec<f64> {
    let mut x = start.to_vec();
    let mut mom = Moments::default();
    mom.ensure_len(x.len());
    for _ in 0..steps {
        let (bc1, bc2) = mom.begin_step();
        for i in 0..x.len() {
            let g = 2.0 * (x[i] - target[i]);
            let d = mom.delta(i, g, lr, bc1, bc2);
            x[i] += d;
        }
    }
    x
}
