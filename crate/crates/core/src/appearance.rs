//! Global appearance model: a 4D multiresolution hash grid feeding a tiny
//! MLP that outputs per-primitive incremental log-scale and SH deltas as a
//! function of (position, normalized time).

use crate::config::TrainingConfig;
use nalgebra::Vector3;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

/// Hash primes for the (x, y, z, t) lattice coordinates. Fixed constants,
/// recorded in the checkpoint header for portability.
pub const HASH_PRIMES: [u32; 4] = [1, 2_654_435_761, 805_459_861, 3_674_653_429];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LevelMeta {
    /// Lattice nodes per spatial axis.
    pub spatial_res: u32,
    /// Lattice nodes along the time axis.
    pub time_res: u32,
}

#[derive(Debug, Clone)]
pub struct HashGrid4d {
    pub levels: Vec<LevelMeta>,
    pub table_log2: u8,
    pub feature_dim: usize,
    pub bbox_min: Vector3<f64>,
    pub bbox_max: Vector3<f64>,
    /// Learnable features, laid out level-major: [level][entry][feature].
    pub features: Vec<f64>,
}

/// Per-level data recorded during `encode` for the backward pass.
#[derive(Debug, Clone)]
pub struct LevelTrace {
    /// Absolute feature slot of each of the 16 cell corners (first feature).
    pub corners: [u32; 16],
    /// Interpolation fractions along (x, y, z, t).
    pub frac: [f64; 4],
    /// d(lattice coordinate)/d(world position) per spatial axis; zero when
    /// the query was clamped to the bounding box on that axis.
    pub coord_scale: [f64; 3],
}

#[derive(Debug, Clone)]
pub struct EncodeTrace {
    pub per_level: Vec<LevelTrace>,
}

impl HashGrid4d {
    pub fn new(
        levels: usize,
        res_min: u32,
        res_max: u32,
        table_log2: u8,
        feature_dim: usize,
        bbox_min: Vector3<f64>,
        bbox_max: Vector3<f64>,
        n_time_steps: usize,
        time_nodes_per_step: u32,
        rng: &mut impl Rng,
    ) -> Self {
        let growth = if levels > 1 {
            ((res_max as f64 / res_min as f64).ln() / (levels as f64 - 1.0)).exp()
        } else {
            1.0
        };
        let metas: Vec<LevelMeta> = (0..levels)
            .map(|l| {
                let spatial = (res_min as f64 * growth.powi(l as i32)).floor() as u32;
                let spatial = spatial.clamp(res_min, res_max);
                LevelMeta { spatial_res: spatial, time_res: spatial }
            })
            .collect();
        let table_size = 1usize << table_log2;
        let mut features = vec![0.0; levels * table_size * feature_dim];
        for f in features.iter_mut() {
            *f = rng.gen_range(-1e-4..1e-4);
        }
        let mut grid = Self {
            levels: metas,
            table_log2,
            feature_dim,
            bbox_min,
            bbox_max,
            features,
        };
        grid.set_time_steps(n_time_steps, time_nodes_per_step);
        grid
    }

    /// Resolve the time axis for the current number of recorded steps.
    pub fn set_time_steps(&mut self, n_steps: usize, nodes_per_step: u32) {
        for meta in self.levels.iter_mut() {
            let want = nodes_per_step.saturating_mul(n_steps.max(1) as u32).max(2);
            meta.time_res = want.min(meta.spatial_res).max(2);
        }
    }

    pub fn table_size(&self) -> usize {
        1 << self.table_log2
    }

    pub fn output_dim(&self) -> usize {
        self.levels.len() * self.feature_dim
    }

    #[inline]
    fn hash(coords: [u32; 4]) -> u32 {
        let mut h = 0u32;
        for (c, p) in coords.iter().zip(HASH_PRIMES) {
            h ^= c.wrapping_mul(p);
        }
        h
    }

    /// Quadrilinear interpolation of per-level features at (pos, t), with the
    /// trace needed for the backward pass. Positions outside the bounding box
    /// are clamped; t is expected in [0, 1].
    pub fn encode(&self, pos: &Vector3<f64>, t: f64) -> (Vec<f64>, EncodeTrace) {
        let mask = (self.table_size() - 1) as u32;
        let extent = self.bbox_max - self.bbox_min;
        let mut u = [0.0f64; 3];
        let mut clamped = [false; 3];
        for d in 0..3 {
            let raw = if extent[d] > 0.0 { (pos[d] - self.bbox_min[d]) / extent[d] } else { 0.5 };
            clamped[d] = !(0.0..=1.0).contains(&raw);
            u[d] = raw.clamp(0.0, 1.0);
        }
        let t = t.clamp(0.0, 1.0);

        let mut out = Vec::with_capacity(self.output_dim());
        let mut per_level = Vec::with_capacity(self.levels.len());
        let table_stride = self.table_size() * self.feature_dim;
        for (li, meta) in self.levels.iter().enumerate() {
            let mut cell = [0u32; 4];
            let mut frac = [0.0f64; 4];
            let mut coord_scale = [0.0f64; 3];
            for d in 0..4 {
                let (coord, nodes) =
                    if d < 3 { (u[d], meta.spatial_res) } else { (t, meta.time_res) };
                let cells = (nodes - 1).max(1);
                let x = coord * cells as f64;
                let i0 = (x.floor() as u32).min(cells - 1);
                cell[d] = i0;
                frac[d] = x - i0 as f64;
                if d < 3 && !clamped[d] && extent[d] > 0.0 {
                    coord_scale[d] = cells as f64 / extent[d];
                }
            }
            let mut corners = [0u32; 16];
            let mut acc = vec![0.0f64; self.feature_dim];
            for (ci, corner) in corners.iter_mut().enumerate() {
                let mut coords = [0u32; 4];
                let mut w = 1.0;
                for d in 0..4 {
                    let bit = (ci >> d) & 1;
                    coords[d] = cell[d] + bit as u32;
                    w *= if bit == 1 { frac[d] } else { 1.0 - frac[d] };
                }
                let entry = (Self::hash(coords) & mask) as usize;
                let slot = li * table_stride + entry * self.feature_dim;
                *corner = slot as u32;
                for f in 0..self.feature_dim {
                    acc[f] += w * self.features[slot + f];
                }
            }
            out.extend_from_slice(&acc);
            per_level.push(LevelTrace { corners, frac, coord_scale });
        }
        (out, EncodeTrace { per_level })
    }

    /// Scatter `d_out` (gradient of the concatenated features) into the
    /// feature-table gradient and return the position gradient.
    pub fn encode_backward(
        &self,
        trace: &EncodeTrace,
        d_out: &[f64],
        d_features: &mut [f64],
    ) -> Vector3<f64> {
        debug_assert_eq!(d_out.len(), self.output_dim());
        let mut d_pos = Vector3::zeros();
        for (li, lt) in trace.per_level.iter().enumerate() {
            let d_level = &d_out[li * self.feature_dim..(li + 1) * self.feature_dim];
            for (ci, &slot) in lt.corners.iter().enumerate() {
                let slot = slot as usize;
                let mut w = 1.0;
                for d in 0..4 {
                    let bit = (ci >> d) & 1;
                    w *= if bit == 1 { lt.frac[d] } else { 1.0 - lt.frac[d] };
                }
                // d(output_f)/d(feature) = w
                let mut g_dot_feat = 0.0;
                for f in 0..self.feature_dim {
                    d_features[slot + f] += w * d_level[f];
                    g_dot_feat += d_level[f] * self.features[slot + f];
                }
                // d(w)/d(frac_d) = sign * product of the other factors.
                for d in 0..3 {
                    if lt.coord_scale[d] == 0.0 {
                        continue;
                    }
                    let mut dw = 1.0;
                    for d2 in 0..4 {
                        if d2 == d {
                            continue;
                        }
                        let bit = (ci >> d2) & 1;
                        dw *= if bit == 1 { lt.frac[d2] } else { 1.0 - lt.frac[d2] };
                    }
                    let sign = if (ci >> d) & 1 == 1 { 1.0 } else { -1.0 };
                    d_pos[d] += g_dot_feat * sign * dw * lt.coord_scale[d];
                }
            }
        }
        d_pos
    }
}

/// One-hidden-layer ReLU MLP. The output layer starts at zero so the model is
/// an exact no-op before training.
#[derive(Debug, Clone)]
pub struct TinyMlp {
    pub in_dim: usize,
    pub hidden_dim: usize,
    pub out_dim: usize,
    pub w1: Vec<f64>, // hidden x in, row-major
    pub b1: Vec<f64>,
    pub w2: Vec<f64>, // out x hidden, row-major
    pub b2: Vec<f64>,
}

impl TinyMlp {
    pub fn new(in_dim: usize, hidden_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        let bound = (6.0 / in_dim as f64).sqrt();
        let w1 = (0..hidden_dim * in_dim).map(|_| rng.gen_range(-bound..bound)).collect();
        // Positive biases keep the rectifier units initially active.
        let b1 = (0..hidden_dim).map(|_| rng.gen_range(0.05..0.3)).collect();
        Self {
            in_dim,
            hidden_dim,
            out_dim,
            w1,
            b1,
            w2: vec![0.0; out_dim * hidden_dim],
            b2: vec![0.0; out_dim],
        }
    }

    /// Forward pass; returns outputs and hidden pre-activations.
    pub fn forward(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        debug_assert_eq!(x.len(), self.in_dim);
        let mut hidden_pre = self.b1.clone();
        for h in 0..self.hidden_dim {
            let row = &self.w1[h * self.in_dim..(h + 1) * self.in_dim];
            let mut acc = 0.0;
            for (w, xi) in row.iter().zip(x) {
                acc += w * xi;
            }
            hidden_pre[h] += acc;
        }
        let mut out = self.b2.clone();
        for o in 0..self.out_dim {
            let row = &self.w2[o * self.hidden_dim..(o + 1) * self.hidden_dim];
            let mut acc = 0.0;
            for (w, hp) in row.iter().zip(&hidden_pre) {
                acc += w * hp.max(0.0);
            }
            out[o] += acc;
        }
        (out, hidden_pre)
    }

    /// Accumulate parameter gradients and return the input gradient.
    pub fn backward(
        &self,
        x: &[f64],
        hidden_pre: &[f64],
        d_out: &[f64],
        grads: &mut MlpGrads,
    ) -> Vec<f64> {
        let mut d_hidden = vec![0.0; self.hidden_dim];
        for o in 0..self.out_dim {
            let g = d_out[o];
            if g == 0.0 {
                continue;
            }
            grads.b2[o] += g;
            let row = &self.w2[o * self.hidden_dim..(o + 1) * self.hidden_dim];
            let grow = &mut grads.w2[o * self.hidden_dim..(o + 1) * self.hidden_dim];
            for h in 0..self.hidden_dim {
                grow[h] += g * hidden_pre[h].max(0.0);
                d_hidden[h] += g * row[h];
            }
        }
        let mut d_x = vec![0.0; self.in_dim];
        for h in 0..self.hidden_dim {
            if hidden_pre[h] <= 0.0 || d_hidden[h] == 0.0 {
                continue;
            }
            let g = d_hidden[h];
            grads.b1[h] += g;
            let row = &self.w1[h * self.in_dim..(h + 1) * self.in_dim];
            let grow = &mut grads.w1[h * self.in_dim..(h + 1) * self.in_dim];
            for i in 0..self.in_dim {
                grow[i] += g * x[i];
                d_x[i] += g * row[i];
            }
        }
        d_x
    }

    pub fn param_count(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }
}

#[derive(Debug, Clone)]
pub struct MlpGrads {
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

impl MlpGrads {
    pub fn zeros_like(mlp: &TinyMlp) -> Self {
        Self {
            w1: vec![0.0; mlp.w1.len()],
            b1: vec![0.0; mlp.b1.len()],
            w2: vec![0.0; mlp.w2.len()],
            b2: vec![0.0; mlp.b2.len()],
        }
    }

    pub fn zero(&mut self) {
        self.w1.iter_mut().for_each(|g| *g = 0.0);
        self.b1.iter_mut().for_each(|g| *g = 0.0);
        self.w2.iter_mut().for_each(|g| *g = 0.0);
        self.b2.iter_mut().for_each(|g| *g = 0.0);
    }
}

/// Incremental properties for one primitive at one time.
#[derive(Debug, Clone)]
pub struct AppearanceDelta {
    pub d_log_scale: Vector3<f64>,
    pub d_sh: Vec<Vector3<f64>>,
}

impl AppearanceDelta {
    pub fn zero(sh_coeffs: usize) -> Self {
        Self { d_log_scale: Vector3::zeros(), d_sh: vec![Vector3::zeros(); sh_coeffs] }
    }
}

/// Intermediates of one `delta_traced` query, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct AppearanceTrace {
    pub encode: EncodeTrace,
    pub features: Vec<f64>,
    pub hidden_pre: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct AppearanceModel {
    pub grid: HashGrid4d,
    pub mlp: TinyMlp,
    pub sh_degree: usize,
    pub enabled: bool,
}

impl AppearanceModel {
    pub fn from_config(
        cfg: &TrainingConfig,
        bbox_min: Vector3<f64>,
        bbox_max: Vector3<f64>,
        n_time_steps: usize,
        seed: u64,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
        let grid = HashGrid4d::new(
            cfg.hash_levels,
            cfg.hash_res_min,
            cfg.hash_res_max,
            cfg.hash_table_log2,
            cfg.hash_feature_dim,
            bbox_min,
            bbox_max,
            n_time_steps,
            cfg.time_nodes_per_step,
            &mut rng,
        );
        let out_dim = 3 + 3 * crate::sh::coeff_count(cfg.sh_degree);
        let mlp = TinyMlp::new(grid.output_dim(), cfg.mlp_hidden, out_dim, &mut rng);
        Self { grid, mlp, sh_degree: cfg.sh_degree, enabled: true }
    }

    /// A placeholder model for fields that never query appearance.
    pub fn disabled(sh_degree: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let grid = HashGrid4d::new(
            1,
            2,
            2,
            4,
            1,
            Vector3::zeros(),
            Vector3::new(1.0, 1.0, 1.0),
            1,
            2,
            &mut rng,
        );
        let mlp = TinyMlp::new(grid.output_dim(), 2, 3 + 3 * crate::sh::coeff_count(sh_degree), &mut rng);
        Self { grid, mlp, sh_degree, enabled: false }
    }

    pub fn sh_coeff_count(&self) -> usize {
        crate::sh::coeff_count(self.sh_degree)
    }

    fn split_output(&self, out: &[f64]) -> AppearanceDelta {
        let n = self.sh_coeff_count();
        let mut d_sh = Vec::with_capacity(n);
        for k in 0..n {
            d_sh.push(Vector3::new(out[3 + 3 * k], out[3 + 3 * k + 1], out[3 + 3 * k + 2]));
        }
        AppearanceDelta {
            d_log_scale: Vector3::new(out[0], out[1], out[2]),
            d_sh,
        }
    }

    pub fn delta(&self, pos: &Vector3<f64>, t: f64) -> AppearanceDelta {
        if !self.enabled {
            return AppearanceDelta::zero(self.sh_coeff_count());
        }
        let (features, _) = self.grid.encode(pos, t);
        let (out, _) = self.mlp.forward(&features);
        self.split_output(&out)
    }

    pub fn delta_traced(&self, pos: &Vector3<f64>, t: f64) -> (AppearanceDelta, AppearanceTrace) {
        let (features, encode) = self.grid.encode(pos, t);
        let (out, hidden_pre) = self.mlp.forward(&features);
        (self.split_output(&out), AppearanceTrace { encode, features, hidden_pre })
    }

    /// Backpropagate output gradients; accumulates into `d_features` /
    /// `d_mlp` and returns the gradient with respect to the query position.
    pub fn backward(
        &self,
        trace: &AppearanceTrace,
        d_log_scale: &Vector3<f64>,
        d_sh: &[Vector3<f64>],
        d_features: &mut [f64],
        d_mlp: &mut MlpGrads,
    ) -> Vector3<f64> {
        let mut d_out = vec![0.0; self.mlp.out_dim];
        d_out[0] = d_log_scale.x;
        d_out[1] = d_log_scale.y;
        d_out[2] = d_log_scale.z;
        for (k, g) in d_sh.iter().enumerate() {
            d_out[3 + 3 * k] = g.x;
            d_out[3 + 3 * k + 1] = g.y;
            d_out[3 + 3 * k + 2] = g.z;
        }
        let d_in = self.mlp.backward(&trace.features, &trace.hidden_pre, &d_out, d_mlp);
        self.grid.encode_backward(&trace.encode, &d_in, d_features)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn test_grid(levels: usize) -> HashGrid4d {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        HashGrid4d::new(
            levels,
            4,
            16,
            10,
            2,
            Vector3::new(-1.0, -1.0, -1.0),
            Vector3::new(1.0, 1.0, 1.0),
            2,
            4,
            &mut rng,
        )
    }

    #[test]
    fn zero_tables_encode_to_zero() {
        let mut grid = test_grid(4);
        grid.features.iter_mut().for_each(|f| *f = 0.0);
        let (out, _) = grid.encode(&Vector3::new(0.3, -0.2, 0.9), 0.7);
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn lattice_corner_returns_stored_feature() {
        let mut grid = test_grid(1);
        grid.features.iter_mut().for_each(|f| *f = 0.0);
        // Corner (0,0,0,0) of level 0: all interpolation weight concentrates.
        let slot = (HashGrid4d::hash([0, 0, 0, 0]) & (grid.table_size() - 1) as u32) as usize
            * grid.feature_dim;
        grid.features[slot] = 1.25;
        grid.features[slot + 1] = -0.5;
        let (out, _) = grid.encode(&grid.bbox_min.clone(), 0.0);
        assert_relative_eq!(out[0], 1.25, epsilon = 1e-15);
        assert_relative_eq!(out[1], -0.5, epsilon = 1e-15);
    }

    #[test]
    fn edge_midpoint_averages_adjacent_corners() {
        let mut grid = test_grid(1);
        grid.features.iter_mut().for_each(|f| *f = 0.0);
        let res = grid.levels[0].spatial_res; // 4 nodes, 3 cells
        assert_eq!(res, 4);
        let mask = (grid.table_size() - 1) as u32;
        // Edge from (0,0,0,0) to (1,0,0,0): set both ends, query the middle.
        let s0 = (HashGrid4d::hash([0, 0, 0, 0]) & mask) as usize * grid.feature_dim;
        let s1 = (HashGrid4d::hash([1, 0, 0, 0]) & mask) as usize * grid.feature_dim;
        grid.features[s0] = 2.0;
        grid.features[s1] = 4.0;
        // Midpoint of the first x-cell: u_x = 0.5/3 of the box.
        let x = -1.0 + (0.5 / 3.0) * 2.0;
        let (out, _) = grid.encode(&Vector3::new(x, -1.0, -1.0), 0.0);
        assert_relative_eq!(out[0], 3.0, epsilon = 1e-12);
    }

    #[test]
    fn encode_is_deterministic_and_continuous() {
        let grid = test_grid(4);
        let p = Vector3::new(0.123, -0.456, 0.789);
        let (a, _) = grid.encode(&p, 0.4);
        let (b, _) = grid.encode(&p, 0.4);
        assert_eq!(a, b);
        // Small steps inside a cell change the encoding proportionally.
        let (c, _) = grid.encode(&(p + Vector3::new(1e-9, 0.0, 0.0)), 0.4);
        for (x, y) in a.iter().zip(&c) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn encode_backward_matches_finite_differences() {
        let grid = test_grid(3);
        let p = Vector3::new(0.21, -0.37, 0.52);
        let t = 0.63;
        let (out, trace) = grid.encode(&p, t);
        // Loss = sum of outputs.
        let d_out = vec![1.0; out.len()];
        let mut d_feat = vec![0.0; grid.features.len()];
        let d_pos = grid.encode_backward(&trace, &d_out, &mut d_feat);
        let eps = 1e-6;
        for d in 0..3 {
            let mut pp = p;
            let mut pm = p;
            pp[d] += eps;
            pm[d] -= eps;
            let (op, _) = grid.encode(&pp, t);
            let (om, _) = grid.encode(&pm, t);
            let fd = (op.iter().sum::<f64>() - om.iter().sum::<f64>()) / (2.0 * eps);
            assert_relative_eq!(d_pos[d], fd, epsilon = 1e-6, max_relative = 1e-6);
        }
        // Feature gradient: perturb one touched feature.
        let touched = d_feat.iter().position(|&g| g != 0.0).unwrap();
        let mut grid2 = grid.clone();
        grid2.features[touched] += eps;
        let (op, _) = grid2.encode(&p, t);
        grid2.features[touched] -= 2.0 * eps;
        let (om, _) = grid2.encode(&p, t);
        let fd = (op.iter().sum::<f64>() - om.iter().sum::<f64>()) / (2.0 * eps);
        assert_relative_eq!(d_feat[touched], fd, epsilon = 1e-8, max_relative = 1e-8);
    }

    #[test]
    fn zero_output_layer_means_zero_delta() {
        let cfg = TrainingConfig::default();
        let model = AppearanceModel::from_config(
            &cfg,
            Vector3::new(-2.0, -2.0, -2.0),
            Vector3::new(2.0, 2.0, 2.0),
            1,
            7,
        );
        for (p, t) in [
            (Vector3::new(0.0, 0.0, 0.0), 0.0),
            (Vector3::new(1.0, -1.0, 0.5), 0.5),
            (Vector3::new(5.0, 5.0, 5.0), 1.0), // clamped
        ] {
            let d = model.delta(&p, t);
            assert_eq!(d.d_log_scale, Vector3::zeros());
            assert!(d.d_sh.iter().all(|v| *v == Vector3::zeros()));
        }
    }

    #[test]
    fn identical_queries_identical_outputs() {
        let cfg = TrainingConfig::default();
        let mut model = AppearanceModel::from_config(
            &cfg,
            Vector3::new(-2.0, -2.0, -2.0),
            Vector3::new(2.0, 2.0, 2.0),
            2,
            7,
        );
        // Give the output layer some weight so outputs are nontrivial.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for w in model.mlp.w2.iter_mut() {
            *w = rng.gen_range(-0.1..0.1);
        }
        let p = Vector3::new(0.4, 0.2, -0.7);
        let a = model.delta(&p, 0.5);
        let b = model.delta(&p, 0.5);
        assert_eq!(a.d_log_scale, b.d_log_scale);
        assert_eq!(a.d_sh, b.d_sh);
    }

    #[test]
    fn mlp_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut mlp = TinyMlp::new(4, 6, 3, &mut rng);
        for w in mlp.w2.iter_mut() {
            *w = rng.gen_range(-0.5..0.5);
        }
        for b in mlp.b2.iter_mut() {
            *b = rng.gen_range(-0.1..0.1);
        }
        let x: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let d_out = vec![0.3, -0.7, 1.1];
        let (_, hidden_pre) = mlp.forward(&x);
        let mut grads = MlpGrads::zeros_like(&mlp);
        let d_x = mlp.backward(&x, &hidden_pre, &d_out, &mut grads);

        let loss = |m: &TinyMlp, x: &[f64]| -> f64 {
            let (o, _) = m.forward(x);
            o.iter().zip(&d_out).map(|(a, b)| a * b).sum()
        };
        let eps = 1e-6;
        // Input gradient.
        for i in 0..4 {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[i] += eps;
            xm[i] -= eps;
            let fd = (loss(&mlp, &xp) - loss(&mlp, &xm)) / (2.0 * eps);
            assert_relative_eq!(d_x[i], fd, epsilon = 1e-7, max_relative = 1e-6);
        }
        // A few weight gradients from each tensor.
        for idx in [0usize, 7, 11] {
            let mut mp = mlp.clone();
            mp.w1[idx] += eps;
            let mut mm = mlp.clone();
            mm.w1[idx] -= eps;
            let fd = (loss(&mp, &x) - loss(&mm, &x)) / (2.0 * eps);
            assert_relative_eq!(grads.w1[idx], fd, epsilon = 1e-7, max_relative = 1e-6);
        }
        for idx in [0usize, 5, 17] {
            let mut mp = mlp.clone();
            mp.w2[idx] += eps;
            let mut mm = mlp.clone();
            mm.w2[idx] -= eps;
            let fd = (loss(&mp, &x) - loss(&mm, &x)) / (2.0 * eps);
            assert_relative_eq!(grads.w2[idx], fd, epsilon = 1e-7, max_relative = 1e-6);
        }
    }
}
