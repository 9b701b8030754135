//! Deterministic synthetic scenes with ground-truth Gaussians, renders,
//! instance masks and seed points — the verification bed for the update
//! pipeline.

use crate::appearance::AppearanceModel;
use crate::camera::CameraView;
use crate::change::{ChangeError, InstanceMask, SegmentationInput, SegmentationProvider};
use crate::img::{ImageRgb, LabelImage};
use crate::raster::{render, RenderOptions, NO_PRIM};
use crate::scene::{logit, Gaussian, GaussianField, Origin, VisibilityPool};
use crate::sh;
use nalgebra::Vector3;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("unknown removal object id {0}")]
    UnknownObject(u32),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub seed: u64,
    pub n_objects: usize,
    pub gaussians_per_object: usize,
    pub background_gaussians: usize,
    pub scene_extent: f64,
    /// (height, width) in pixels.
    pub resolution: (usize, usize),
    pub n_views: usize,
    pub orbit_radius_factor: f64,
    /// Elevations of the two camera rings, radians above the ground plane.
    pub orbit_elevations: (f64, f64),
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            n_objects: 3,
            gaussians_per_object: 100,
            background_gaussians: 500,
            scene_extent: 4.0,
            resolution: (64, 64),
            n_views: 40,
            orbit_radius_factor: 1.5,
            orbit_elevations: (0.4, 0.8),
        }
    }
}

/// A new object to drop into the scene.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectDescriptor {
    /// World position; `None` picks a free spot on the object ring.
    pub center: Option<Vector3<f64>>,
    pub radius: f64,
    pub color: Vector3<f64>,
    pub count: usize,
}

/// One step-to-step change: removals by object id, additions, and a global
/// tint multiplying the DC SH coefficients of surviving primitives.
#[derive(Debug, Clone, PartialEq)]
pub struct ChangeSpec {
    pub removals: Vec<u32>,
    pub additions: Vec<ObjectDescriptor>,
    pub tint: Vector3<f64>,
}

impl ChangeSpec {
    pub fn none() -> Self {
        Self { removals: Vec::new(), additions: Vec::new(), tint: Vector3::new(1.0, 1.0, 1.0) }
    }
}

#[derive(Debug, Clone)]
pub struct OracleObject {
    pub id: u32,
    pub center: Vector3<f64>,
    pub radius: f64,
    pub color: Vector3<f64>,
    pub born_step: u32,
    pub removed_step: Option<u32>,
}

/// Ground truth at one step: the true field plus the object registry.
#[derive(Debug, Clone)]
pub struct OracleScene {
    pub spec: SceneSpec,
    pub field: GaussianField,
    pub objects: Vec<OracleObject>,
    pub step: u32,
}

/// A colored 3D point with provenance, used both for dense initialization
/// and for sparse new-object seeding.
#[derive(Debug, Clone, PartialEq)]
pub struct SeedPoint {
    pub position: Vector3<f64>,
    pub color: Vector3<f64>,
    pub object_id: Option<u32>,
}

/// Cluster scale of an object blob: positions are Gaussian with this sigma,
/// truncated at two sigma.
pub fn cluster_sigma(radius: f64) -> f64 {
    radius / 2.0
}

/// Per-primitive footprint scale of an object blob.
pub fn primitive_sigma(radius: f64, count: usize) -> f64 {
    radius / (count as f64).cbrt() * 0.9
}

fn object_blob(
    rng: &mut ChaCha8Rng,
    center: Vector3<f64>,
    radius: f64,
    color: Vector3<f64>,
    count: usize,
    id: u32,
) -> Vec<Gaussian> {
    let sigma_cluster = cluster_sigma(radius);
    let sigma_prim = primitive_sigma(radius, count);
    (0..count)
        .map(|_| {
            // Gaussian cluster (sum of three uniforms), truncated at 2 sigma
            // so the silhouette is predictable.
            let offset = loop {
                let mut o = Vector3::zeros();
                for _ in 0..3 {
                    o += Vector3::new(
                        rng.gen_range(-1.0..1.0f64),
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(-1.0..1.0),
                    );
                }
                if o.norm() <= 2.0 {
                    break o;
                }
            };
            let mut g = Gaussian::new(center + offset * sigma_cluster, 1);
            g.log_scale = Vector3::new(
                (sigma_prim * rng.gen_range(0.7..1.4)).ln(),
                (sigma_prim * rng.gen_range(0.7..1.4)).ln(),
                (sigma_prim * rng.gen_range(0.7..1.4)).ln(),
            );
            g.rotation = nalgebra::Vector4::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            );
            if g.rotation.norm() < 0.1 {
                g.rotation = nalgebra::Vector4::new(1.0, 0.0, 0.0, 0.0);
            }
            g.normalize_rotation();
            g.opacity_logit = logit(rng.gen_range(0.75..0.95));
            let tint = Vector3::new(
                rng.gen_range(0.85..1.15f64),
                rng.gen_range(0.85..1.15),
                rng.gen_range(0.85..1.15),
            );
            let c = Vector3::new(
                (color.x * tint.x).clamp(0.05, 0.95),
                (color.y * tint.y).clamp(0.05, 0.95),
                (color.z * tint.z).clamp(0.05, 0.95),
            );
            g.sh[0] = sh::dc_from_color(c);
            g.object_id = Some(id);
            g
        })
        .collect()
}

fn field_from_ground_truth(prims: Vec<Gaussian>, scene_extent: f64) -> GaussianField {
    let mut pool = VisibilityPool::default();
    for _ in 0..prims.len() {
        pool.push(0, Origin::Initial);
    }
    let mut field = GaussianField {
        primitives: prims,
        appearance: AppearanceModel::disabled(1),
        pool,
        time_records: Vec::new(),
        current_step: 0,
        sh_degree: 1,
        scene_extent,
    };
    field.append_step(Vec::new());
    field
}

/// Distinct saturated colors around the hue wheel.
pub fn object_color(index: usize) -> Vector3<f64> {
    let hue = (index as f64 * 0.381_966).fract() * 6.0;
    let c = 0.75;
    let x = c * (1.0 - ((hue % 2.0) - 1.0).abs());
    let (r, g, b) = match hue as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    Vector3::new(r + 0.15, g + 0.15, b + 0.15)
}

/// Ring slot for the k-th object of a scene.
fn ring_position(spec: &SceneSpec, k: usize, total: usize) -> Vector3<f64> {
    let angle = std::f64::consts::TAU * k as f64 / total.max(1) as f64 + 0.35;
    let ring = spec.scene_extent / 4.0;
    let z = spec.scene_extent * 0.18;
    Vector3::new(ring * angle.cos(), ring * angle.sin(), z)
}

/// Build the step-0 ground truth: compact colored object blobs floating
/// above a flat backdrop slab. Deterministic per seed.
pub fn make_scene(spec: &SceneSpec) -> OracleScene {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let e = spec.scene_extent;
    let mut prims = Vec::new();
    let mut objects = Vec::new();
    // Reserve ring slots for one extra object so later additions have a
    // free, deterministic spot.
    let slots = spec.n_objects + 1;
    for k in 0..spec.n_objects {
        let id = k as u32 + 1;
        let center = ring_position(spec, k, slots);
        let radius = e / 10.0;
        let color = object_color(k);
        prims.extend(object_blob(&mut rng, center, radius, color, spec.gaussians_per_object, id));
        objects.push(OracleObject {
            id,
            center,
            radius,
            color,
            born_step: 0,
            removed_step: None,
        });
    }
    // Backdrop slab.
    let sigma_floor = e / (spec.background_gaussians as f64).sqrt() * 1.4;
    for _ in 0..spec.background_gaussians {
        let mut g = Gaussian::new(
            Vector3::new(
                rng.gen_range(-e / 2.0..e / 2.0),
                rng.gen_range(-e / 2.0..e / 2.0),
                rng.gen_range(-0.02 * e..0.0),
            ),
            1,
        );
        g.log_scale = Vector3::new(
            (sigma_floor * rng.gen_range(0.7..1.3)).ln(),
            (sigma_floor * rng.gen_range(0.7..1.3)).ln(),
            (sigma_floor * 0.3).ln(),
        );
        g.opacity_logit = logit(rng.gen_range(0.8..0.95));
        let v = rng.gen_range(0.52..0.72);
        let c = Vector3::new(
            (v * rng.gen_range(0.95..1.05f64)).clamp(0.05, 0.95),
            (v * rng.gen_range(0.95..1.05)).clamp(0.05, 0.95),
            (v * rng.gen_range(0.95..1.05)).clamp(0.05, 0.95),
        );
        g.sh[0] = sh::dc_from_color(c);
        g.object_id = None;
        prims.push(g);
    }
    OracleScene { spec: spec.clone(), field: field_from_ground_truth(prims, e), objects, step: 0 }
}

/// Apply a change, producing the ground truth of the next step: removed
/// objects' primitives are deleted outright (the oracle is the true next
/// scene), the tint multiplies surviving DC coefficients, additions append.
pub fn apply_change(scene: &OracleScene, change: &ChangeSpec) -> Result<OracleScene, OracleError> {
    let next_step = scene.step + 1;
    for id in &change.removals {
        if !scene
            .objects
            .iter()
            .any(|o| o.id == *id && o.removed_step.is_none())
        {
            return Err(OracleError::UnknownObject(*id));
        }
    }
    let mut prims: Vec<Gaussian> = scene
        .field
        .primitives
        .iter()
        .filter(|g| match g.object_id {
            Some(id) => !change.removals.contains(&id),
            None => true,
        })
        .cloned()
        .collect();
    for g in prims.iter_mut() {
        g.sh[0].component_mul_assign(&change.tint);
    }
    let mut objects: Vec<OracleObject> = scene
        .objects
        .iter()
        .map(|o| {
            let mut o = o.clone();
            if change.removals.contains(&o.id) && o.removed_step.is_none() {
                o.removed_step = Some(next_step);
            }
            o
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(scene.spec.seed ^ (0xadd0 + next_step as u64));
    let slots = scene.spec.n_objects + 1;
    for (a, desc) in change.additions.iter().enumerate() {
        let id = objects.iter().map(|o| o.id).max().unwrap_or(0) + 1;
        let center = desc
            .center
            .unwrap_or_else(|| ring_position(&scene.spec, scene.spec.n_objects + a, slots));
        prims.extend(object_blob(&mut rng, center, desc.radius, desc.color, desc.count, id));
        objects.push(OracleObject {
            id,
            center,
            radius: desc.radius,
            color: desc.color,
            born_step: next_step,
            removed_step: None,
        });
    }
    Ok(OracleScene {
        spec: scene.spec.clone(),
        field: field_from_ground_truth(prims, scene.spec.scene_extent),
        objects,
        step: next_step,
    })
}

/// Two camera rings orbiting the scene centroid; `phase` rotates the whole
/// set (held-out views use a half-spacing phase).
pub fn orbit_cameras(spec: &SceneSpec, n: usize, phase: f64) -> Vec<CameraView> {
    let (h, w) = spec.resolution;
    let fx = w as f64 * 0.9;
    let dist = spec.orbit_radius_factor * spec.scene_extent;
    let target = Vector3::new(0.0, 0.0, spec.scene_extent * 0.08);
    (0..n)
        .map(|i| {
            let az = phase + std::f64::consts::TAU * i as f64 / n as f64;
            let elev = if i % 2 == 0 { spec.orbit_elevations.0 } else { spec.orbit_elevations.1 };
            let eye = target
                + Vector3::new(
                    dist * elev.cos() * az.cos(),
                    dist * elev.cos() * az.sin(),
                    dist * elev.sin(),
                );
            CameraView::look_at(w as u32, h as u32, fx, fx, eye, target, Vector3::z())
                .expect("orbit camera is valid")
        })
        .collect()
}

/// Everything one step's captures provide: images with poses, oracle
/// instance masks, a dense point cloud of the whole scene, and sparse seeds
/// covering objects new at this step.
#[derive(Debug, Clone)]
pub struct OracleDataset {
    pub step: u32,
    pub images: Vec<ImageRgb>,
    pub cameras: Vec<CameraView>,
    pub masks: Vec<LabelImage>,
    pub dense_points: Vec<SeedPoint>,
    pub sparse_seeds: Vec<SeedPoint>,
}

/// Instance labels of a ground-truth render: the object id of the primitive
/// with the largest blending contribution, 0 for background.
pub fn label_render(field: &GaussianField, out: &crate::raster::RenderOutput) -> LabelImage {
    let mut labels = LabelImage::new(out.width, out.height);
    for (i, &p) in out.argmax_prim.iter().enumerate() {
        if p != NO_PRIM {
            labels.data[i] = field.primitives[p as usize].object_id.unwrap_or(0);
        }
    }
    labels
}

pub fn render_dataset(scene: &OracleScene, opts: &RenderOptions) -> OracleDataset {
    let cameras = orbit_cameras(&scene.spec, scene.spec.n_views, 0.0);
    let snapshot = scene.field.current_view(false);
    let mut images = Vec::with_capacity(cameras.len());
    let mut masks = Vec::with_capacity(cameras.len());
    for cam in &cameras {
        let out = render(&snapshot, cam, opts);
        masks.push(label_render(&scene.field, &out));
        images.push(out.color);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(scene.spec.seed ^ (0x5eed + scene.step as u64));
    let jitter = 0.01 * scene.spec.scene_extent;
    let dense_points = scene
        .field
        .primitives
        .iter()
        .map(|g| SeedPoint {
            position: g.position
                + Vector3::new(
                    rng.gen_range(-jitter..jitter),
                    rng.gen_range(-jitter..jitter),
                    rng.gen_range(-jitter..jitter),
                ),
            color: sh::eval_color(&g.sh[..1], &Vector3::z()).map(|v| v.clamp(0.0, 1.0)),
            object_id: g.object_id,
        })
        .collect();
    // 10% subsample of each newly added object's primitives.
    let mut sparse_seeds = Vec::new();
    for obj in scene.objects.iter().filter(|o| o.born_step == scene.step && scene.step > 0) {
        let members: Vec<&Gaussian> = scene
            .field
            .primitives
            .iter()
            .filter(|g| g.object_id == Some(obj.id))
            .collect();
        let stride = 10;
        for g in members.iter().step_by(stride) {
            sparse_seeds.push(SeedPoint {
                position: g.position
                    + Vector3::new(
                        rng.gen_range(-jitter..jitter),
                        rng.gen_range(-jitter..jitter),
                        rng.gen_range(-jitter..jitter),
                    ),
                color: obj.color.map(|v| v.clamp(0.0, 1.0)),
                object_id: Some(obj.id),
            });
        }
    }
    OracleDataset {
        step: scene.step,
        images,
        cameras,
        masks,
        dense_points,
        sparse_seeds,
    }
}

/// Held-out cameras interleaved between the training azimuths.
pub fn test_cameras(spec: &SceneSpec, n: usize) -> Vec<CameraView> {
    orbit_cameras(spec, n, std::f64::consts::TAU / (2.0 * spec.n_views as f64))
}

/// Segmentation oracle: captures are answered from stored ground-truth
/// masks (matched by image content); renders are answered from their
/// argmax-contribution label sidecar.
pub struct OracleSegmenter {
    captures: Vec<(ImageRgb, LabelImage)>,
}

impl OracleSegmenter {
    pub fn new(captures: Vec<(ImageRgb, LabelImage)>) -> Self {
        Self { captures }
    }

    pub fn from_dataset(ds: &OracleDataset) -> Self {
        Self::new(ds.images.iter().cloned().zip(ds.masks.iter().cloned()).collect())
    }
}

impl SegmentationProvider for OracleSegmenter {
    fn segment(&self, input: &SegmentationInput<'_>) -> Result<InstanceMask, ChangeError> {
        if let Some(labels) = input.render_labels {
            return Ok(InstanceMask::from_labels(labels.clone()));
        }
        for (img, labels) in &self.captures {
            if img.width == input.image.width
                && img.height == input.image.height
                && img.data == input.image.data
            {
                return Ok(InstanceMask::from_labels(labels.clone()));
            }
        }
        Err(ChangeError::Provider("capture not recognized by the oracle".into()))
    }
}
