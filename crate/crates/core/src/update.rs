//! Three-stage continual update: appearance, geometric layout, joint
//! refinement — plus seeding, densification, pruning and generative replay.

use crate::camera::CameraView;
use crate::change::{compute_masks, SegmentationProvider};
use crate::config::TrainingConfig;
use crate::dbscan;
use crate::diff::{backward, FieldOptimizer, GradientBundle, GroupSettings, ParamGroups};
use crate::img::{ImageRgb, MaskImage};
use crate::loss::{photometric_loss, removal_regularizer};
use crate::oracle::SeedPoint;
use crate::raster::{render, RenderOptions};
use crate::scene::{logit, sigmoid, FieldSnapshot, Gaussian, GaussianField, Origin};
use crate::sh;
use nalgebra::Vector3;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;
use thiserror::Error;

/// Slope of the removal activation.
pub const PSI_SLOPE: f64 = 1000.0;
/// Initial removal factor; presumes objects present until evidence says
/// otherwise (psi ~ 0.993).
pub const REMOVAL_FACTOR_INIT: f64 = 0.005;

/// Removal activation: a logistic with slope 1000, numerically safe for
/// large |m|.
#[inline]
pub fn psi(m: f64) -> f64 {
    sigmoid(PSI_SLOPE * m)
}

/// d(psi)/dm.
#[inline]
pub fn psi_prime(m: f64) -> f64 {
    let p = psi(m);
    PSI_SLOPE * p * (1.0 - p)
}

#[derive(Debug, Error)]
pub enum UpdateError {
    #[error("empty dataset: an update needs at least one posed image")]
    EmptyDataset,
    #[error("stage {stage} diverged at iteration {iteration} (non-finite loss)")]
    Diverged { stage: &'static str, iteration: usize },
    #[error("gradient error: {0}")]
    Diff(#[from] crate::diff::DiffError),
    #[error("field error: {0}")]
    Field(#[from] crate::scene::FieldError),
}

/// Sparse points seeding new objects; deterministic given inputs.
pub trait PointSeedProvider {
    fn seeds(
        &self,
        views: &[(ImageRgb, CameraView)],
        previous: &FieldSnapshot<'_>,
    ) -> Vec<SeedPoint>;
}

/// A fixed seed list (e.g. loaded from a dataset directory).
pub struct StaticSeedProvider(pub Vec<SeedPoint>);

impl PointSeedProvider for StaticSeedProvider {
    fn seeds(&self, _: &[(ImageRgb, CameraView)], _: &FieldSnapshot<'_>) -> Vec<SeedPoint> {
        self.0.clone()
    }
}

/// What one update did to the field.
#[derive(Debug, Clone, Serialize)]
pub struct UpdateReport {
    pub step: u32,
    pub active_before: usize,
    pub active_after: usize,
    pub added: usize,
    pub removed: usize,
    pub activated_indices: Vec<usize>,
    pub deactivated_indices: Vec<usize>,
    pub stage_losses: Vec<StageLoss>,
}

#[derive(Debug, Clone, Serialize)]
pub struct StageLoss {
    pub stage: String,
    pub final_loss: f64,
}

/// One training sample: a posed image at some recorded step, optionally
/// restricted by a layout-invariant mask.
pub struct TrainView {
    pub image: ImageRgb,
    pub camera: CameraView,
    pub mask: Option<MaskImage>,
    pub step: u32,
}

/// A replayed historical view.
pub struct ReplayView {
    pub image: ImageRgb,
    pub camera: CameraView,
    pub step: u32,
}

/// Re-render up to `n_per_step` stored poses of every recorded step through
/// the field's recall of that step. Pure; the field is not mutated.
pub fn generative_replay(
    field: &GaussianField,
    n_per_step: usize,
    opts: &RenderOptions,
) -> Result<Vec<ReplayView>, UpdateError> {
    let mut out = Vec::new();
    for record in &field.time_records {
        let snapshot = field.recall(record.step)?;
        for cam in record.replay_cameras.iter().take(n_per_step) {
            let rendered = render(&snapshot, cam, opts);
            out.push(ReplayView { image: rendered.color, camera: cam.clone(), step: record.step });
        }
    }
    Ok(out)
}

/// New primitives from seed points: DC color from the seed color, isotropic
/// scale from the mean distance to the 3 nearest seed neighbors (falling
/// back to extent/100 without neighbors), opacity 0.1, identity rotation.
pub fn seed_new_gaussians(
    seeds: &[SeedPoint],
    scene_extent: f64,
    sh_degree: usize,
) -> Vec<Gaussian> {
    let scales = nearest_neighbor_scales(seeds, scene_extent);
    seeds
        .iter()
        .zip(scales)
        .map(|(seed, scale)| {
            let mut g = Gaussian::new(seed.position, sh_degree);
            g.log_scale = Vector3::repeat(scale.ln());
            g.opacity_logit = logit(0.1);
            g.sh[0] = sh::dc_from_color(seed.color);
            g.object_id = seed.object_id;
            g
        })
        .collect()
}

fn nearest_neighbor_scales(points: &[SeedPoint], scene_extent: f64) -> Vec<f64> {
    let fallback = scene_extent / 100.0;
    let n = points.len();
    (0..n)
        .map(|i| {
            let mut d2: Vec<f64> = (0..n)
                .filter(|&j| j != i)
                .map(|j| (points[i].position - points[j].position).norm_squared())
                .collect();
            if d2.is_empty() {
                return fallback;
            }
            d2.sort_by(f64::total_cmp);
            let k = d2.len().min(3);
            let mean: f64 = d2[..k].iter().map(|d| d.sqrt()).sum::<f64>() / k as f64;
            if mean > 0.0 {
                mean
            } else {
                fallback
            }
        })
        .collect()
}

/// Build a fresh field from a dense point cloud (the step-0 analog of the
/// seeding rule) with an appearance model sized to the point bounds.
pub fn build_initial_field(
    points: &[SeedPoint],
    cameras: Vec<CameraView>,
    config: &TrainingConfig,
) -> GaussianField {
    let mut bb_min = Vector3::repeat(f64::INFINITY);
    let mut bb_max = Vector3::repeat(f64::NEG_INFINITY);
    for p in points {
        bb_min = bb_min.inf(&p.position);
        bb_max = bb_max.sup(&p.position);
    }
    if points.is_empty() {
        bb_min = Vector3::zeros();
        bb_max = Vector3::repeat(1.0);
    }
    let scene_extent = (bb_max - bb_min).norm().max(1e-6);
    let margin = (bb_max - bb_min) * 0.1 + Vector3::repeat(1e-3);
    let appearance = crate::appearance::AppearanceModel::from_config(
        config,
        bb_min - margin,
        bb_max + margin,
        1,
        config.seed,
    );
    let primitives = seed_new_gaussians(points, scene_extent, config.sh_degree);
    let mut pool = crate::scene::VisibilityPool::default();
    for _ in 0..primitives.len() {
        pool.push(0, Origin::Initial);
    }
    let mut field = GaussianField {
        primitives,
        appearance,
        pool,
        time_records: Vec::new(),
        current_step: 0,
        sh_degree: config.sh_degree,
        scene_extent,
    };
    field.append_step(cameras);
    field
}

// ---------------------------------------------------------------------------
// Stage runner
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, PartialEq)]
enum Rows {
    All,
    BornAt(u32),
}

impl Rows {
    fn allows(&self, field: &GaussianField, idx: usize) -> bool {
        match self {
            Rows::All => true,
            Rows::BornAt(step) => field.pool.record(idx).birth_step == *step,
        }
    }

    fn born_filter(&self) -> Option<u32> {
        match self {
            Rows::All => None,
            Rows::BornAt(s) => Some(*s),
        }
    }
}

struct StageSetup<'a> {
    name: &'static str,
    iters: usize,
    groups: ParamGroups,
    lambda: f64,
    /// Use per-view layout masks on current-step views.
    use_masks: bool,
    /// Multiply previous-generation opacity by psi(m) on current-step views.
    apply_removal: bool,
    regularize_removal: bool,
    densify: bool,
    densify_rows: Rows,
    dbscan_checkpoints: &'a [usize],
    importance_prune_at: Option<usize>,
    trainable_rows: Rows,
    seed: u64,
}

struct StageOutcome {
    final_loss: f64,
    activated: Vec<usize>,
}

fn run_stage(
    field: &mut GaussianField,
    views: &[TrainView],
    config: &TrainingConfig,
    setup: &StageSetup<'_>,
) -> Result<StageOutcome, UpdateError> {
    assert!(!views.is_empty());
    let opts = RenderOptions { background: config.background, near_plane: config.near_plane };
    let current = field.current_step;
    let mut rng = ChaCha8Rng::seed_from_u64(setup.seed);
    let mut optimizer = FieldOptimizer::new();
    let mut bundle = GradientBundle::new(field, &setup.groups);
    let mut trainable: Vec<bool> = (0..field.primitives.len())
        .map(|i| setup.trainable_rows.allows(field, i) && field.pool.is_active(i, current))
        .collect();
    let mut grad_accum = vec![0.0f64; field.primitives.len()];
    let mut grad_count = vec![0u32; field.primitives.len()];
    let mut activated = Vec::new();
    let mut recent_losses = std::collections::VecDeque::with_capacity(50);

    for iter in 1..=setup.iters {
        let view = &views[rng.gen_range(0..views.len())];
        let is_current = view.step == current;
        let t_norm = field.time_record(view.step)?.t_norm;
        let loss_value;
        {
            let snapshot = FieldSnapshot {
                field,
                active: field.active_indices(view.step)?,
                step: view.step,
                t_norm,
                use_appearance: true,
                apply_removal: setup.apply_removal && is_current,
            };
            let out = render(&snapshot, &view.camera, &opts);
            let mask = if setup.use_masks && is_current { view.mask.as_ref() } else { None };
            let photo = photometric_loss(&out.color, &view.image, mask, setup.lambda);
            bundle.reset(field.primitives.len());
            backward(
                &snapshot,
                &view.camera,
                &opts,
                &out,
                &photo.grad,
                &setup.groups,
                &mut bundle,
            )?;
            loss_value = photo.value;
        }

        let mut total_loss = loss_value;
        if setup.regularize_removal {
            let ms: Vec<(usize, f64)> = field
                .primitives
                .iter()
                .enumerate()
                .filter(|(i, p)| p.removal_factor.is_some() && field.pool.is_active(*i, current))
                .map(|(i, p)| (i, p.removal_factor.unwrap()))
                .collect();
            if !ms.is_empty() {
                let psis: Vec<f64> = ms.iter().map(|(_, m)| psi(*m)).collect();
                let (reg_value, d_psi) = removal_regularizer(&psis, config.lambda2, config.lambda3);
                total_loss += reg_value;
                if let Some(buf) = bundle.removal.as_mut() {
                    for ((i, m), dp) in ms.iter().zip(d_psi) {
                        buf[*i] += dp * psi_prime(*m);
                    }
                }
            }
        }

        if !total_loss.is_finite() {
            return Err(UpdateError::Diverged { stage: setup.name, iteration: iter });
        }
        if recent_losses.len() == 50 {
            recent_losses.pop_front();
        }
        recent_losses.push_back(total_loss);

        optimizer.step(field, &bundle, &setup.groups, &trainable)?;

        if setup.densify {
            for i in 0..field.primitives.len() {
                if bundle.visible[i] && setup.densify_rows.allows(field, i) {
                    grad_accum[i] += bundle.screen_grad_norm[i];
                    grad_count[i] += 1;
                }
            }
            if config.densify_interval > 0 && iter % config.densify_interval == 0 {
                let born = densify(
                    field,
                    &grad_accum,
                    &grad_count,
                    config,
                    setup.densify_rows.born_filter(),
                    &mut rng,
                );
                activated.extend(born);
                grad_accum.clear();
                grad_accum.resize(field.primitives.len(), 0.0);
                grad_count.clear();
                grad_count.resize(field.primitives.len(), 0);
                trainable = (0..field.primitives.len())
                    .map(|i| {
                        setup.trainable_rows.allows(field, i)
                            && field.pool.is_active(i, current)
                    })
                    .collect();
            }
        }

        if setup.dbscan_checkpoints.contains(&iter) {
            for i in prune_missing(field, config) {
                trainable[i] = false;
            }
        }

        if setup.importance_prune_at == Some(iter) {
            let cams: Vec<CameraView> = views
                .iter()
                .filter(|v| v.step == current)
                .map(|v| v.camera.clone())
                .collect();
            for i in importance_prune(field, &cams, config, &opts)? {
                trainable[i] = false;
            }
        }
    }

    let final_loss = if recent_losses.is_empty() {
        0.0
    } else {
        recent_losses.iter().sum::<f64>() / recent_losses.len() as f64
    };
    Ok(StageOutcome { final_loss, activated })
}

// ---------------------------------------------------------------------------
// Densification
// ---------------------------------------------------------------------------

/// Clone small / split large primitives whose mean screen-space positional
/// gradient exceeds the threshold. `born_filter` restricts eligibility to
/// primitives born at that step (updates densify only newly added points;
/// initial training densifies all). Children inherit origin and provenance;
/// split parents are deactivated at the current step. Returns the new
/// indices.
pub fn densify(
    field: &mut GaussianField,
    grad_accum: &[f64],
    grad_count: &[u32],
    config: &TrainingConfig,
    born_filter: Option<u32>,
    rng: &mut ChaCha8Rng,
) -> Vec<usize> {
    let current = field.current_step;
    let n = field.primitives.len();
    let mut born = Vec::new();
    let split_scale_limit = 0.01 * field.scene_extent;
    for i in 0..n {
        if field.primitives.len() >= config.max_primitives {
            break;
        }
        if grad_count[i] == 0 || !field.pool.is_active(i, current) {
            continue;
        }
        if let Some(step) = born_filter {
            if field.pool.record(i).birth_step != step {
                continue;
            }
        }
        let mean_grad = grad_accum[i] / grad_count[i] as f64;
        if mean_grad < config.densify_grad_threshold {
            continue;
        }
        let prim = field.primitives[i].clone();
        let origin = field.pool.record(i).origin;
        if prim.scale().mean() > split_scale_limit {
            // Split: two children sampled from the parent, scales / 1.6.
            for _ in 0..2 {
                let mut child = prim.clone();
                child.position = sample_from_gaussian(&prim, rng);
                child.log_scale -= Vector3::repeat(1.6f64.ln());
                field.primitives.push(child);
                field.pool.push(current, origin);
                born.push(field.primitives.len() - 1);
            }
            field.pool.deactivate(i, current);
        } else {
            // Clone: both copies at perturbed positions.
            let mut twin = prim.clone();
            twin.position = perturb_position(&prim, rng);
            field.primitives[i].position = perturb_position(&prim, rng);
            field.primitives.push(twin);
            field.pool.push(current, origin);
            born.push(field.primitives.len() - 1);
        }
    }
    born
}

fn sample_from_gaussian(prim: &Gaussian, rng: &mut ChaCha8Rng) -> Vector3<f64> {
    let r = crate::scene::quat_to_rotation(&prim.rotation);
    let s = prim.scale();
    let eps = Vector3::new(
        rng.sample::<f64, _>(StandardNormal),
        rng.sample::<f64, _>(StandardNormal),
        rng.sample::<f64, _>(StandardNormal),
    );
    prim.position + r * eps.component_mul(&s)
}

fn perturb_position(prim: &Gaussian, rng: &mut ChaCha8Rng) -> Vector3<f64> {
    let sigma = prim.scale().mean() * 0.5;
    prim.position
        + Vector3::new(
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
        ) * sigma
}

// ---------------------------------------------------------------------------
// Pruning
// ---------------------------------------------------------------------------

/// Candidates are previous-generation actives with psi(m) below tau; DBSCAN
/// drops sparse outliers; every previous-generation active inside any
/// cluster's expanded bounding box is deactivated at the current step.
pub fn prune_missing(field: &mut GaussianField, config: &TrainingConfig) -> Vec<usize> {
    let current = field.current_step;
    let prev_gen_active: Vec<usize> = (0..field.primitives.len())
        .filter(|&i| {
            field.pool.is_active(i, current) && field.pool.record(i).birth_step < current
        })
        .collect();
    let candidates: Vec<usize> = prev_gen_active
        .iter()
        .copied()
        .filter(|&i| {
            field.primitives[i]
                .removal_factor
                .map(|m| psi(m) < config.tau)
                .unwrap_or(false)
        })
        .collect();
    if candidates.is_empty() {
        return Vec::new();
    }
    let eps = config.dbscan_eps_for(field.scene_extent);
    let positions: Vec<Vector3<f64>> =
        candidates.iter().map(|&i| field.primitives[i].position).collect();
    let labels = dbscan::cluster(&positions, eps, config.dbscan_min_pts);
    let boxes = dbscan::cluster_bounding_boxes(&positions, &labels, eps);
    if boxes.is_empty() {
        return Vec::new();
    }
    let mut pruned = Vec::new();
    for &i in &prev_gen_active {
        let p = field.primitives[i].position;
        if boxes.iter().any(|b| dbscan::point_in_box(&p, b)) {
            field.pool.deactivate(i, current);
            pruned.push(i);
        }
    }
    pruned
}

/// Importance score per primitive: max alpha_i T_i over all pixels of the
/// current-step training views. Actives scoring below the threshold are
/// deactivated at the current step. Returns the pruned indices.
pub fn importance_prune(
    field: &mut GaussianField,
    cameras: &[CameraView],
    config: &TrainingConfig,
    opts: &RenderOptions,
) -> Result<Vec<usize>, UpdateError> {
    let current = field.current_step;
    let mut scores = vec![0.0f64; field.primitives.len()];
    {
        let t_norm = field.time_record(current)?.t_norm;
        let snapshot = FieldSnapshot {
            field,
            active: field.active_indices(current)?,
            step: current,
            t_norm,
            use_appearance: true,
            apply_removal: false,
        };
        for cam in cameras {
            let out = render(&snapshot, cam, opts);
            for (s, v) in scores.iter_mut().zip(&out.max_contribution) {
                if *v > *s {
                    *s = *v;
                }
            }
        }
    }
    let mut pruned = Vec::new();
    for i in 0..field.primitives.len() {
        if field.pool.is_active(i, current) && scores[i] < config.importance_threshold {
            field.pool.deactivate(i, current);
            pruned.push(i);
        }
    }
    Ok(pruned)
}

// ---------------------------------------------------------------------------
// Entry points
// ---------------------------------------------------------------------------

/// Fit a fresh field to its step-0 views. All parameter groups train;
/// densification may act on every primitive.
pub fn fit_initial(
    field: &mut GaussianField,
    views: &[(ImageRgb, CameraView)],
    config: &TrainingConfig,
) -> Result<f64, UpdateError> {
    if views.is_empty() {
        return Err(UpdateError::EmptyDataset);
    }
    let train: Vec<TrainView> = views
        .iter()
        .map(|(image, camera)| TrainView {
            image: image.clone(),
            camera: camera.clone(),
            mask: None,
            step: 0,
        })
        .collect();
    let setup = StageSetup {
        name: "init",
        iters: config.iters_init,
        groups: joint_groups(config),
        lambda: config.lambda,
        use_masks: false,
        apply_removal: false,
        regularize_removal: false,
        densify: true,
        densify_rows: Rows::All,
        dbscan_checkpoints: &[],
        importance_prune_at: None,
        trainable_rows: Rows::All,
        seed: config.seed ^ 0x1217,
    };
    let outcome = run_stage(field, &train, config, &setup)?;
    Ok(outcome.final_loss)
}

fn joint_groups(config: &TrainingConfig) -> ParamGroups {
    ParamGroups {
        position: GroupSettings::on(config.lr_position),
        log_scale: GroupSettings::on(config.lr_log_scale),
        rotation: GroupSettings::on(config.lr_rotation),
        opacity: GroupSettings::on(config.lr_opacity),
        sh: GroupSettings::on(config.lr_sh),
        removal: GroupSettings::off(),
        hash: GroupSettings::on(config.lr_hash),
        mlp: GroupSettings::on(config.lr_mlp),
    }
}

/// Run the full three-stage update on newly captured views of a changed
/// scene. Appends a time step, fits appearance on layout-invariant regions,
/// learns removals and additions, refines jointly, and reports what changed.
pub fn update(
    field: &mut GaussianField,
    views: &[(ImageRgb, CameraView)],
    segmenter: &dyn SegmentationProvider,
    seeder: &dyn PointSeedProvider,
    config: &TrainingConfig,
) -> Result<UpdateReport, UpdateError> {
    if views.is_empty() {
        return Err(UpdateError::EmptyDataset);
    }
    let opts = RenderOptions { background: config.background, near_plane: config.near_plane };
    let previous_step = field.current_step;
    let active_before = field.active_indices(previous_step)?;

    // Replay and change detection run against the pre-update field.
    let replay = generative_replay(field, config.replay_views_per_step, &opts)?;
    let (masks, seeds) = {
        let prev_snapshot = field.recall(previous_step)?;
        let masks = compute_masks(&prev_snapshot, views, segmenter, config.iou_threshold, &opts);
        let seeds = seeder.seeds(views, &prev_snapshot);
        (masks, seeds)
    };

    // Open the new step; time renormalizes and the appearance grid's time
    // axis is re-resolved (replay supervision re-anchors past appearance).
    let step = field.append_step(views.iter().map(|(_, c)| c.clone()).collect());
    field
        .appearance
        .grid
        .set_time_steps(field.time_records.len(), config.time_nodes_per_step);

    let mut train_views: Vec<TrainView> = views
        .iter()
        .zip(masks)
        .map(|((image, camera), mask)| TrainView {
            image: image.clone(),
            camera: camera.clone(),
            mask: Some(mask),
            step,
        })
        .collect();
    for r in replay {
        train_views.push(TrainView { image: r.image, camera: r.camera, mask: None, step: r.step });
    }

    let mut stage_losses = Vec::new();
    let mut activated = Vec::new();

    // Stage 1: global appearance only, masked, densification closed.
    let stage1 = StageSetup {
        name: "appearance",
        iters: config.iters_stage1,
        groups: ParamGroups {
            position: GroupSettings::off(),
            log_scale: GroupSettings::off(),
            rotation: GroupSettings::off(),
            opacity: GroupSettings::off(),
            sh: GroupSettings::off(),
            removal: GroupSettings::off(),
            hash: GroupSettings::on(config.lr_hash),
            mlp: GroupSettings::on(config.lr_mlp),
        },
        lambda: config.lambda,
        use_masks: true,
        apply_removal: false,
        regularize_removal: false,
        densify: false,
        densify_rows: Rows::All,
        dbscan_checkpoints: &[],
        importance_prune_at: None,
        trainable_rows: Rows::All,
        seed: config.seed ^ 0x57A6_E001,
    };
    let outcome = run_stage(field, &train_views, config, &stage1)?;
    stage_losses.push(StageLoss { stage: "appearance".into(), final_loss: outcome.final_loss });

    // Stage 2: seed additions, learn removal factors and added geometry with
    // the appearance model fixed; DBSCAN pruning at the checkpoints.
    for i in 0..field.primitives.len() {
        if field.pool.is_active(i, step) && field.pool.record(i).birth_step < step {
            field.primitives[i].removal_factor = Some(REMOVAL_FACTOR_INIT);
        }
    }
    let new_prims = seed_new_gaussians(&seeds, field.scene_extent, field.sh_degree);
    for g in new_prims {
        field.primitives.push(g);
        field.pool.push(step, Origin::AddedAtStep(step));
        activated.push(field.primitives.len() - 1);
    }

    let stage2 = StageSetup {
        name: "layout",
        iters: config.iters_stage2,
        groups: ParamGroups {
            position: GroupSettings::on(config.lr_position),
            log_scale: GroupSettings::on(config.lr_log_scale),
            rotation: GroupSettings::on(config.lr_rotation),
            opacity: GroupSettings::on(config.lr_opacity),
            sh: GroupSettings::on(config.lr_sh),
            removal: GroupSettings::on(config.lr_removal),
            hash: GroupSettings::off(),
            mlp: GroupSettings::off(),
        },
        lambda: config.lambda1,
        use_masks: false,
        apply_removal: true,
        regularize_removal: true,
        densify: true,
        densify_rows: Rows::BornAt(step),
        dbscan_checkpoints: &config.dbscan_checkpoints,
        importance_prune_at: None,
        trainable_rows: Rows::BornAt(step),
        seed: config.seed ^ 0x57A6_E002,
    };
    let outcome = run_stage(field, &train_views, config, &stage2)?;
    stage_losses.push(StageLoss { stage: "layout".into(), final_loss: outcome.final_loss });
    activated.extend(outcome.activated);

    // Removal factors are a stage-2 construct; drop them before refinement.
    for g in field.primitives.iter_mut() {
        g.removal_factor = None;
    }

    // Stage 3: joint refinement of appearance and added geometry, with one
    // importance-pruning pass.
    let stage3 = StageSetup {
        name: "refine",
        iters: config.iters_stage3,
        groups: ParamGroups {
            position: GroupSettings::on(config.lr_position),
            log_scale: GroupSettings::on(config.lr_log_scale),
            rotation: GroupSettings::on(config.lr_rotation),
            opacity: GroupSettings::on(config.lr_opacity),
            sh: GroupSettings::on(config.lr_sh),
            removal: GroupSettings::off(),
            hash: GroupSettings::on(config.lr_hash),
            mlp: GroupSettings::on(config.lr_mlp),
        },
        lambda: config.lambda,
        use_masks: false,
        apply_removal: false,
        regularize_removal: false,
        densify: false,
        densify_rows: Rows::BornAt(step),
        dbscan_checkpoints: &[],
        importance_prune_at: Some(config.importance_prune_at),
        trainable_rows: Rows::BornAt(step),
        seed: config.seed ^ 0x57A6_E003,
    };
    let outcome = run_stage(field, &train_views, config, &stage3)?;
    stage_losses.push(StageLoss { stage: "refine".into(), final_loss: outcome.final_loss });
    activated.extend(outcome.activated);

    let active_after = field.active_indices(step)?;
    let activated_live: Vec<usize> =
        activated.iter().copied().filter(|&i| field.pool.is_active(i, step)).collect();
    let removed: Vec<usize> = active_before
        .iter()
        .copied()
        .filter(|&i| !field.pool.is_active(i, step))
        .collect();
    Ok(UpdateReport {
        step,
        active_before: active_before.len(),
        active_after: active_after.len(),
        added: activated_live.len(),
        removed: removed.len(),
        activated_indices: activated_live,
        deactivated_indices: removed,
        stage_losses,
    })
}

#[cfg(test)]
mod psi_tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn psi_at_zero_is_exactly_half() {
        assert_eq!(psi(0.0), 0.5);
    }

    #[test]
    fn psi_known_value() {
        // Direct evaluation of the logistic at m = 0.01.
        assert_relative_eq!(psi(0.01), 0.999_954_602_131_297_6, epsilon = 1e-15);
    }

    #[test]
    fn psi_monotone_and_safe_for_large_inputs() {
        let mut last = -1.0;
        for i in 0..=1000 {
            let m = -0.02 + 0.04 * (i as f64 / 1000.0);
            let p = psi(m);
            assert!(p > last);
            assert!((0.0..=1.0).contains(&p));
            last = p;
        }
        assert_eq!(psi(1e9), 1.0);
        assert_eq!(psi(-1e9), 0.0);
    }

    #[test]
    fn psi_threshold_equivalence() {
        // psi(m) < 0.01 iff m < -ln(99)/1000.
        let boundary = -(99.0f64.ln()) / PSI_SLOPE;
        assert_relative_eq!(boundary, -0.004_595_1, epsilon = 1e-7);
        assert!(psi(boundary - 1e-7) < 0.01);
        assert!(psi(boundary + 1e-7) > 0.01);
        assert_relative_eq!(psi(boundary), 0.01, epsilon = 1e-12);
    }

    #[test]
    fn psi_prime_matches_finite_differences() {
        for m in [-0.004, -0.001, 0.0, 0.0007, 0.003] {
            let eps = 1e-9;
            let fd = (psi(m + eps) - psi(m - eps)) / (2.0 * eps);
            assert_relative_eq!(psi_prime(m), fd, max_relative = 1e-5);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{make_scene, render_dataset, SceneSpec};

    #[test]
    fn empty_seed_list_means_no_primitives() {
        assert!(seed_new_gaussians(&[], 4.0, 1).is_empty());
    }

    #[test]
    fn single_seed_uses_fallback_scale() {
        let seeds = vec![SeedPoint {
            position: Vector3::new(1.0, 2.0, 3.0),
            color: Vector3::new(0.8, 0.2, 0.1),
            object_id: Some(7),
        }];
        let prims = seed_new_gaussians(&seeds, 4.0, 1);
        assert_eq!(prims.len(), 1);
        let g = &prims[0];
        assert_eq!(g.position, Vector3::new(1.0, 2.0, 3.0));
        assert!((g.scale().x - 4.0 / 100.0).abs() < 1e-12);
        assert!((g.opacity() - 0.1).abs() < 1e-12);
        assert_eq!(g.rotation, nalgebra::Vector4::new(1.0, 0.0, 0.0, 0.0));
        assert_eq!(g.object_id, Some(7));
        // DC reproduces the seed color.
        let c = sh::eval_color(&g.sh, &Vector3::z());
        assert!((c - Vector3::new(0.8, 0.2, 0.1)).norm() < 1e-12);
    }

    #[test]
    fn seed_scale_from_three_nearest_neighbors() {
        let mk = |x: f64| SeedPoint {
            position: Vector3::new(x, 0.0, 0.0),
            color: Vector3::new(0.5, 0.5, 0.5),
            object_id: None,
        };
        // Distances from the first point: 1, 2, 3, 10 → mean of 3 nearest = 2.
        let seeds = vec![mk(0.0), mk(1.0), mk(2.0), mk(3.0), mk(10.0)];
        let prims = seed_new_gaussians(&seeds, 4.0, 1);
        assert!((prims[0].scale().x - 2.0).abs() < 1e-9);
    }

    fn tiny_training_field() -> GaussianField {
        let spec = SceneSpec {
            n_objects: 1,
            gaussians_per_object: 20,
            background_gaussians: 30,
            resolution: (24, 24),
            n_views: 4,
            ..Default::default()
        };
        let scene = make_scene(&spec);
        let ds = render_dataset(&scene, &RenderOptions::default());
        let mut config = TrainingConfig::default();
        config.iters_init = 1;
        build_initial_field(
            &ds.dense_points,
            ds.cameras.clone(),
            &config,
        )
    }

    #[test]
    fn densify_zero_gradients_no_change() {
        let mut field = tiny_training_field();
        let n = field.primitives.len();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let config = TrainingConfig::default();
        let born = densify(
            &mut field,
            &vec![0.0; n],
            &vec![0u32; n],
            &config,
            None,
            &mut rng,
        );
        assert!(born.is_empty());
        assert_eq!(field.primitives.len(), n);
    }

    #[test]
    fn densify_clones_small_and_splits_large() {
        let mut field = tiny_training_field();
        let n = field.primitives.len();
        let config = TrainingConfig::default();
        let split_limit = 0.01 * field.scene_extent;
        // Make prim 0 small and prim 1 large.
        field.primitives[0].log_scale = Vector3::repeat((split_limit * 0.5).ln());
        field.primitives[1].log_scale = Vector3::repeat((split_limit * 4.0).ln());
        let mut accum = vec![0.0; n];
        let mut count = vec![0u32; n];
        accum[0] = 10.0 * config.densify_grad_threshold;
        count[0] = 1;
        accum[1] = 10.0 * config.densify_grad_threshold;
        count[1] = 1;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pos0 = field.primitives[0].position;
        let born = densify(&mut field, &accum, &count, &config, None, &mut rng);
        // Clone adds one; split adds two and retires the parent.
        assert_eq!(born.len(), 3);
        assert_eq!(field.primitives.len(), n + 3);
        assert!(!field.pool.is_active(1, 0), "split parent deactivated");
        assert!(field.pool.is_active(0, 0));
        assert_ne!(field.primitives[0].position, pos0, "clone perturbs the original too");
        // Children scales reduced by 1.6.
        let parent_scale = split_limit * 4.0;
        for &b in &born[1..] {
            let s = field.primitives[b].scale().x;
            assert!((s - parent_scale / 1.6).abs() < 1e-9);
        }
    }

    #[test]
    fn prune_missing_ignores_scattered_candidates() {
        let mut field = tiny_training_field();
        // Pretend we're at step 1 so everything is previous generation.
        field.append_step(Vec::new());
        let config = TrainingConfig::default();
        // Five scattered low-psi candidates.
        for i in 0..5 {
            field.primitives[i * 7].removal_factor = Some(-0.01);
            field.primitives[i * 7].position =
                Vector3::new(i as f64 * 1.9, -(i as f64) * 1.3, i as f64);
        }
        let pruned = prune_missing(&mut field, &config);
        assert!(pruned.is_empty(), "isolated candidates are DBSCAN noise");
    }

    #[test]
    fn prune_missing_takes_dense_cluster_and_box() {
        let mut field = tiny_training_field();
        field.append_step(Vec::new());
        let config = TrainingConfig::default();
        // A dense candidate cluster around the object center.
        let center = Vector3::new(0.5, 0.5, 0.5);
        let eps = config.dbscan_eps_for(field.scene_extent);
        let mut expected = Vec::new();
        for i in 0..15 {
            field.primitives[i].position =
                center + Vector3::new(eps * 0.3 * i as f64 / 15.0, 0.0, 0.0);
            field.primitives[i].removal_factor = Some(-0.01);
            expected.push(i);
        }
        // A non-candidate bystander inside the future box is swept too.
        field.primitives[20].position = center;
        field.primitives[20].removal_factor = Some(0.01);
        let pruned = prune_missing(&mut field, &config);
        for i in expected {
            assert!(pruned.contains(&i));
        }
        assert!(pruned.contains(&20), "everything inside the cluster box is pruned");
        assert!(!field.pool.is_active(20, 1));
        assert!(field.pool.is_active(20, 0), "recall of step 0 still sees it");
    }

    #[test]
    fn replay_views_are_bit_identical_to_recall_renders() {
        let field = tiny_training_field();
        let opts = RenderOptions::default();
        let replays = generative_replay(&field, 2, &opts).unwrap();
        assert_eq!(replays.len(), 2);
        for r in &replays {
            let direct = render(&field.recall(r.step).unwrap(), &r.camera, &opts);
            assert_eq!(direct.color.data, r.image.data);
        }
        // More requested than stored: all poses used, no duplication.
        let all = generative_replay(&field, 99, &opts).unwrap();
        assert_eq!(all.len(), field.time_records[0].replay_cameras.len());
    }

    #[test]
    fn update_rejects_empty_dataset() {
        let mut field = tiny_training_field();
        let seg = crate::oracle::OracleSegmenter::new(Vec::new());
        let seeder = StaticSeedProvider(Vec::new());
        let config = TrainingConfig::default();
        assert!(matches!(
            update(&mut field, &[], &seg, &seeder, &config),
            Err(UpdateError::EmptyDataset)
        ));
    }
}
