//! Training configuration and its flat key-value file format.
//!
//! Every tunable has a key; unknown keys are rejected so typos fail fast.
//! Lines are `key = value`, `#` starts a comment.

use nalgebra::Vector3;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config line {line}: expected `key = value`, got `{text}`")]
    Malformed { line: usize, text: String },
    #[error("config line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("config line {line}: bad value for `{key}`: {reason}")]
    BadValue { line: usize, key: String, reason: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// All hyperparameters of initial training and continual updates.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingConfig {
    /// D-SSIM mix for the appearance and refinement losses.
    pub lambda: f64,
    /// D-SSIM mix for the layout-update loss.
    pub lambda1: f64,
    /// Weight of the (1-psi)*psi entropy regularizer.
    pub lambda2: f64,
    /// Weight of the BCE(psi, 1) regularizer.
    pub lambda3: f64,
    /// Removal-candidate threshold on psi(m).
    pub tau: f64,
    /// Importance-score pruning threshold.
    pub importance_threshold: f64,

    pub iters_init: usize,
    pub iters_stage1: usize,
    pub iters_stage2: usize,
    pub iters_stage3: usize,
    /// Stage-2 iterations at which removal candidates are clustered and
    /// pruned.
    pub dbscan_checkpoints: Vec<usize>,
    /// Stage-3 iteration after which importance pruning runs once.
    pub importance_prune_at: usize,

    /// DBSCAN radius in world units; <= 0 selects 2% of the scene extent.
    pub dbscan_eps: f64,
    pub dbscan_min_pts: usize,

    pub densify_interval: usize,
    /// Mean screen-space positional gradient norm that triggers clone/split.
    pub densify_grad_threshold: f64,
    /// Hard cap on the primitive count after densification.
    pub max_primitives: usize,

    pub replay_views_per_step: usize,
    pub iou_threshold: f64,
    pub background: Vector3<f64>,
    pub sh_degree: usize,
    pub near_plane: f64,
    pub seed: u64,

    // Per-group learning rates. Position is additionally scaled by the scene
    // extent at use time.
    pub lr_position: f64,
    pub lr_log_scale: f64,
    pub lr_rotation: f64,
    pub lr_opacity: f64,
    pub lr_sh: f64,
    pub lr_removal: f64,
    pub lr_hash: f64,
    pub lr_mlp: f64,

    // Appearance model architecture.
    pub hash_levels: usize,
    pub hash_res_min: u32,
    pub hash_res_max: u32,
    pub hash_table_log2: u8,
    pub hash_feature_dim: usize,
    pub mlp_hidden: usize,
    /// Time-axis lattice nodes allotted per recorded time step.
    pub time_nodes_per_step: u32,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            lambda: 0.2,
            lambda1: 0.2,
            lambda2: 0.01,
            lambda3: 0.01,
            tau: 0.01,
            importance_threshold: 0.05,
            iters_init: 2000,
            iters_stage1: 700,
            iters_stage2: 800,
            iters_stage3: 1500,
            dbscan_checkpoints: vec![500, 800],
            importance_prune_at: 400,
            dbscan_eps: 0.0,
            dbscan_min_pts: 10,
            densify_interval: 100,
            densify_grad_threshold: 2e-4,
            max_primitives: 20_000,
            replay_views_per_step: 40,
            iou_threshold: 0.8,
            background: Vector3::zeros(),
            sh_degree: 1,
            near_plane: 0.01,
            seed: 0,
            lr_position: 1.6e-4,
            lr_log_scale: 5e-3,
            lr_rotation: 1e-3,
            lr_opacity: 5e-2,
            lr_sh: 2.5e-3,
            lr_removal: 5e-3,
            lr_hash: 1e-2,
            lr_mlp: 1e-3,
            hash_levels: 8,
            hash_res_min: 4,
            hash_res_max: 64,
            hash_table_log2: 15,
            hash_feature_dim: 2,
            mlp_hidden: 64,
            time_nodes_per_step: 4,
        }
    }
}

impl TrainingConfig {
    /// Effective DBSCAN radius for a scene of the given extent.
    pub fn dbscan_eps_for(&self, scene_extent: f64) -> f64 {
        if self.dbscan_eps > 0.0 {
            self.dbscan_eps
        } else {
            0.02 * scene_extent
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let in_unit = |v: f64| (0.0..=1.0).contains(&v);
        if !in_unit(self.lambda) || !in_unit(self.lambda1) {
            return Err(ConfigError::Invalid("lambda and lambda1 must lie in [0, 1]".into()));
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(ConfigError::Invalid("tau must lie in (0, 1)".into()));
        }
        if !(self.importance_threshold > 0.0 && self.importance_threshold < 1.0) {
            return Err(ConfigError::Invalid("importance_threshold must lie in (0, 1)".into()));
        }
        for (name, v) in [
            ("iters_init", self.iters_init),
            ("iters_stage1", self.iters_stage1),
            ("iters_stage2", self.iters_stage2),
            ("iters_stage3", self.iters_stage3),
        ] {
            if v == 0 {
                return Err(ConfigError::Invalid(format!("{name} must be > 0")));
            }
        }
        if self.sh_degree > crate::sh::MAX_DEGREE {
            return Err(ConfigError::Invalid(format!(
                "sh_degree must be <= {}",
                crate::sh::MAX_DEGREE
            )));
        }
        if self.hash_levels == 0 || self.hash_feature_dim == 0 {
            return Err(ConfigError::Invalid("hash grid must have levels and features".into()));
        }
        if self.hash_res_min < 2 || self.hash_res_max < self.hash_res_min {
            return Err(ConfigError::Invalid("need hash_res_max >= hash_res_min >= 2".into()));
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::Malformed {
                line: line_no,
                text: raw.to_string(),
            })?;
            let key = key.trim();
            let value = value.trim();
            cfg.set_key(key, value).map_err(|e| match e {
                SetError::Unknown => ConfigError::UnknownKey { line: line_no, key: key.into() },
                SetError::Bad(reason) => {
                    ConfigError::BadValue { line: line_no, key: key.into(), reason }
                }
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Canonical key-value rendering; `parse` of the output reproduces self.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            s.push_str(k);
            s.push_str(" = ");
            s.push_str(&v);
            s.push('\n');
        };
        kv("lambda", format!("{}", self.lambda));
        kv("lambda1", format!("{}", self.lambda1));
        kv("lambda2", format!("{}", self.lambda2));
        kv("lambda3", format!("{}", self.lambda3));
        kv("tau", format!("{}", self.tau));
        kv("importance_threshold", format!("{}", self.importance_threshold));
        kv("iters_init", format!("{}", self.iters_init));
        kv("iters_stage1", format!("{}", self.iters_stage1));
        kv("iters_stage2", format!("{}", self.iters_stage2));
        kv("iters_stage3", format!("{}", self.iters_stage3));
        kv(
            "dbscan_checkpoints",
            self.dbscan_checkpoints.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(","),
        );
        kv("importance_prune_at", format!("{}", self.importance_prune_at));
        kv("dbscan_eps", format!("{}", self.dbscan_eps));
        kv("dbscan_min_pts", format!("{}", self.dbscan_min_pts));
        kv("densify_interval", format!("{}", self.densify_interval));
        kv("densify_grad_threshold", format!("{}", self.densify_grad_threshold));
        kv("max_primitives", format!("{}", self.max_primitives));
        kv("replay_views_per_step", format!("{}", self.replay_views_per_step));
        kv("iou_threshold", format!("{}", self.iou_threshold));
        kv(
            "background",
            format!("{},{},{}", self.background.x, self.background.y, self.background.z),
        );
        kv("sh_degree", format!("{}", self.sh_degree));
        kv("near_plane", format!("{}", self.near_plane));
        kv("seed", format!("{}", self.seed));
        kv("lr_position", format!("{}", self.lr_position));
        kv("lr_log_scale", format!("{}", self.lr_log_scale));
        kv("lr_rotation", format!("{}", self.lr_rotation));
        kv("lr_opacity", format!("{}", self.lr_opacity));
        kv("lr_sh", format!("{}", self.lr_sh));
        kv("lr_removal", format!("{}", self.lr_removal));
        kv("lr_hash", format!("{}", self.lr_hash));
        kv("lr_mlp", format!("{}", self.lr_mlp));
        kv("hash_levels", format!("{}", self.hash_levels));
        kv("hash_res_min", format!("{}", self.hash_res_min));
        kv("hash_res_max", format!("{}", self.hash_res_max));
        kv("hash_table_log2", format!("{}", self.hash_table_log2));
        kv("hash_feature_dim", format!("{}", self.hash_feature_dim));
        kv("mlp_hidden", format!("{}", self.mlp_hidden));
        kv("time_nodes_per_step", format!("{}", self.time_nodes_per_step));
        s
    }

    fn set_key(&mut self, key: &str, value: &str) -> Result<(), SetError> {
        fn num<T: std::str::FromStr>(v: &str) -> Result<T, SetError>
        where
            T::Err: std::fmt::Display,
        {
            v.parse::<T>().map_err(|e| SetError::Bad(format!("{e}")))
        }
        match key {
            "lambda" => self.lambda = num(value)?,
            "lambda1" => self.lambda1 = num(value)?,
            "lambda2" => self.lambda2 = num(value)?,
            "lambda3" => self.lambda3 = num(value)?,
            "tau" => self.tau = num(value)?,
            "importance_threshold" => self.importance_threshold = num(value)?,
            "iters_init" => self.iters_init = num(value)?,
            "iters_stage1" => self.iters_stage1 = num(value)?,
            "iters_stage2" => self.iters_stage2 = num(value)?,
            "iters_stage3" => self.iters_stage3 = num(value)?,
            "dbscan_checkpoints" => {
                let mut out = Vec::new();
                for part in value.split(',') {
                    let part = part.trim();
                    if part.is_empty() {
                        continue;
                    }
                    out.push(num::<usize>(part)?);
                }
                self.dbscan_checkpoints = out;
            }
            "importance_prune_at" => self.importance_prune_at = num(value)?,
            "dbscan_eps" => self.dbscan_eps = num(value)?,
            "dbscan_min_pts" => self.dbscan_min_pts = num(value)?,
            "densify_interval" => self.densify_interval = num(value)?,
            "densify_grad_threshold" => self.densify_grad_threshold = num(value)?,
            "max_primitives" => self.max_primitives = num(value)?,
            "replay_views_per_step" => self.replay_views_per_step = num(value)?,
            "iou_threshold" => self.iou_threshold = num(value)?,
            "background" => {
                let parts: Vec<&str> = value.split(',').map(str::trim).collect();
                if parts.len() != 3 {
                    return Err(SetError::Bad("expected r,g,b".into()));
                }
                self.background =
                    Vector3::new(num(parts[0])?, num(parts[1])?, num(parts[2])?);
            }
            "sh_degree" => self.sh_degree = num(value)?,
            "near_plane" => self.near_plane = num(value)?,
            "seed" => self.seed = num(value)?,
            "lr_position" => self.lr_position = num(value)?,
            "lr_log_scale" => self.lr_log_scale = num(value)?,
            "lr_rotation" => self.lr_rotation = num(value)?,
            "lr_opacity" => self.lr_opacity = num(value)?,
            "lr_sh" => self.lr_sh = num(value)?,
            "lr_removal" => self.lr_removal = num(value)?,
            "lr_hash" => self.lr_hash = num(value)?,
            "lr_mlp" => self.lr_mlp = num(value)?,
            "hash_levels" => self.hash_levels = num(value)?,
            "hash_res_min" => self.hash_res_min = num(value)?,
            "hash_res_max" => self.hash_res_max = num(value)?,
            "hash_table_log2" => self.hash_table_log2 = num(value)?,
            "hash_feature_dim" => self.hash_feature_dim = num(value)?,
            "mlp_hidden" => self.mlp_hidden = num(value)?,
            "time_nodes_per_step" => self.time_nodes_per_step = num(value)?,
            _ => return Err(SetError::Unknown),
        }
        Ok(())
    }
}

enum SetError {
    Unknown,
    Bad(String),
}
