//! Drivers behind the CLI subcommands; kept in the library so integration
//! tests exercise the same code paths.

use crate::change::SegmentationProvider;
use crate::config::TrainingConfig;
use crate::diff::{gradcheck, GradcheckConfig, GradcheckReport};
use crate::io::{load_checkpoint, load_dataset, save_checkpoint, IoError};
use crate::metrics::{forgetting_matrix, psnr, ssim, TestView};
use crate::oracle::OracleSegmenter;
use crate::raster::{render, RenderOptions};
use crate::update::{build_initial_field, fit_initial, update, StaticSeedProvider, UpdateReport};
use serde::Serialize;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CommandError {
    #[error("{0}")]
    Io(#[from] IoError),
    #[error("{0}")]
    Update(#[from] crate::update::UpdateError),
    #[error("{0}")]
    Metrics(#[from] crate::metrics::MetricsError),
    #[error("{0}")]
    Field(#[from] crate::scene::FieldError),
    #[error("{0}")]
    Invalid(String),
}

fn load_config(path: Option<&Path>) -> Result<TrainingConfig, CommandError> {
    match path {
        None => Ok(TrainingConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| IoError::Io { path: p.display().to_string(), source: e })?;
            Ok(TrainingConfig::parse(&text).map_err(IoError::Config)?)
        }
    }
}

fn render_options(config: &TrainingConfig) -> RenderOptions {
    RenderOptions { background: config.background, near_plane: config.near_plane }
}

#[derive(Debug, Serialize)]
pub struct InitSummary {
    pub primitives: usize,
    pub active: usize,
    pub final_loss: f64,
}

/// Train a fresh field at step 0 from a dataset's dense points and views.
pub fn cmd_init(
    dataset_dir: &Path,
    config_path: Option<&Path>,
    out: &Path,
) -> Result<InitSummary, CommandError> {
    let config = load_config(config_path)?;
    let dataset = load_dataset(dataset_dir)?;
    if dataset.step != 0 {
        return Err(CommandError::Invalid(format!(
            "init needs a step-0 dataset, got step {}",
            dataset.step
        )));
    }
    let points = dataset.seed_points.ok_or_else(|| {
        CommandError::Invalid("init needs seed_points in the dataset for initialization".into())
    })?;
    let cameras = dataset.views.iter().map(|(_, c)| c.clone()).collect();
    let mut field = build_initial_field(&points, cameras, &config);
    let final_loss = fit_initial(&mut field, &dataset.views, &config)?;
    save_checkpoint(out, &field, &config)?;
    Ok(InitSummary {
        primitives: field.primitives.len(),
        active: field.active_indices(field.current_step)?.len(),
        final_loss,
    })
}

/// Update a checkpoint with the next step's captures; writes the updated
/// checkpoint and (optionally) the JSON report.
pub fn cmd_update(
    checkpoint_path: &Path,
    dataset_dir: &Path,
    config_path: Option<&Path>,
    out: &Path,
    report_path: Option<&Path>,
) -> Result<UpdateReport, CommandError> {
    let ckpt = load_checkpoint(checkpoint_path)?;
    let mut field = ckpt.field;
    let config = match config_path {
        Some(_) => load_config(config_path)?,
        None => ckpt.config,
    };
    let dataset = load_dataset(dataset_dir)?;
    let segmenter: Box<dyn SegmentationProvider> = match &dataset.masks {
        Some(masks) => Box::new(OracleSegmenter::new(
            dataset.views.iter().map(|(img, _)| img.clone()).zip(masks.iter().cloned()).collect(),
        )),
        None => Box::new(OracleSegmenter::new(Vec::new())),
    };
    let seeder = StaticSeedProvider(dataset.seed_points.clone().unwrap_or_default());
    let report = update(&mut field, &dataset.views, segmenter.as_ref(), &seeder, &config)?;
    save_checkpoint(out, &field, &config)?;
    if let Some(p) = report_path {
        std::fs::write(p, serde_json::to_string_pretty(&report).expect("report serializes"))
            .map_err(|e| IoError::Io { path: p.display().to_string(), source: e })?;
    }
    Ok(report)
}

/// Render a recalled step at the poses of a pose file (or dataset dir),
/// writing PNGs into `out_dir`. Returns the written file names.
pub fn cmd_render(
    checkpoint_path: &Path,
    poses: &Path,
    step: u32,
    out_dir: &Path,
) -> Result<Vec<String>, CommandError> {
    let ckpt = load_checkpoint(checkpoint_path)?;
    let cameras = if poses.is_dir() {
        load_dataset(poses)?.views.into_iter().map(|(_, c)| c).collect()
    } else {
        crate::io::load_poses(poses)?
    };
    let snapshot = ckpt.field.recall(step)?;
    let opts = render_options(&ckpt.config);
    std::fs::create_dir_all(out_dir)
        .map_err(|e| IoError::Io { path: out_dir.display().to_string(), source: e })?;
    let mut written = Vec::new();
    for (i, cam) in cameras.iter().enumerate() {
        let out = render(&snapshot, cam, &opts);
        let name = format!("step{step}_{i:04}.png");
        let path = out_dir.join(&name);
        image::save_buffer(
            &path,
            &out.color.to_rgb8(),
            out.width as u32,
            out.height as u32,
            image::ExtendedColorType::Rgb8,
        )
        .map_err(|source| IoError::Image { path: path.display().to_string(), source })?;
        written.push(name);
    }
    Ok(written)
}

#[derive(Debug, Serialize)]
pub struct EvalRow {
    pub checkpoint_step: u32,
    pub test_step: u32,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Debug, Serialize)]
pub struct EvalSummary {
    pub rows: Vec<EvalRow>,
    pub forgetting_csv: String,
}

/// Evaluate checkpoints against per-step test sets: PSNR/SSIM per
/// (checkpoint, its own step) plus the full forgetting matrix. Expects one
/// checkpoint per step 0..=K and a matching test set per step.
pub fn cmd_eval(
    checkpoint_paths: &[PathBuf],
    test_set_dirs: &[PathBuf],
    csv_out: Option<&Path>,
) -> Result<EvalSummary, CommandError> {
    let mut checkpoints = Vec::new();
    for p in checkpoint_paths {
        checkpoints.push(load_checkpoint(p)?);
    }
    checkpoints.sort_by_key(|c| c.field.current_step);
    let mut test_sets_raw = Vec::new();
    for d in test_set_dirs {
        test_sets_raw.push(load_dataset(d)?);
    }
    test_sets_raw.sort_by_key(|d| d.step);
    for (i, c) in checkpoints.iter().enumerate() {
        if c.field.current_step != i as u32 {
            return Err(crate::metrics::MetricsError::MissingCheckpoint(i as u32).into());
        }
    }
    for (i, t) in test_sets_raw.iter().enumerate() {
        if t.step != i as u32 {
            return Err(CommandError::Invalid(format!("missing test set for step {i}")));
        }
    }
    if checkpoints.len() != test_sets_raw.len() {
        return Err(CommandError::Invalid(format!(
            "{} checkpoints vs {} test sets",
            checkpoints.len(),
            test_sets_raw.len()
        )));
    }

    let opts = render_options(&checkpoints.last().expect("nonempty").config);
    let test_sets: Vec<Vec<TestView>> = test_sets_raw
        .into_iter()
        .map(|d| {
            d.views
                .into_iter()
                .map(|(image, camera)| TestView { image, camera })
                .collect()
        })
        .collect();

    let mut rows = Vec::new();
    for ckpt in &checkpoints {
        let step = ckpt.field.current_step;
        let snapshot = ckpt.field.recall(step)?;
        let tests = &test_sets[step as usize];
        let mut p_acc = 0.0;
        let mut s_acc = 0.0;
        for tv in tests {
            let out = render(&snapshot, &tv.camera, &opts);
            p_acc += psnr(&out.color, &tv.image)?;
            s_acc += ssim(&out.color, &tv.image)?;
        }
        let n = tests.len().max(1) as f64;
        rows.push(EvalRow {
            checkpoint_step: step,
            test_step: step,
            psnr: p_acc / n,
            ssim: s_acc / n,
        });
    }

    let fields: Vec<&crate::scene::GaussianField> =
        checkpoints.iter().map(|c| &c.field).collect();
    let matrix = forgetting_matrix(&fields, &test_sets, &opts)?;
    let csv = matrix.to_csv();
    if let Some(p) = csv_out {
        std::fs::write(p, &csv)
            .map_err(|e| IoError::Io { path: p.display().to_string(), source: e })?;
    }
    Ok(EvalSummary { rows, forgetting_csv: csv })
}

/// Export the geometric changes between two steps as an ASCII PLY cloud.
pub fn cmd_changes(
    checkpoint_path: &Path,
    step_a: u32,
    step_b: u32,
    out: &Path,
) -> Result<(), CommandError> {
    let ckpt = load_checkpoint(checkpoint_path)?;
    let ply = crate::io::changes_ply(&ckpt.field, step_a, step_b)?;
    std::fs::write(out, ply)
        .map_err(|e| IoError::Io { path: out.display().to_string(), source: e })?;
    Ok(())
}

#[derive(Debug, Serialize)]
pub struct GradcheckSummary {
    pub scenes: Vec<GradcheckReport>,
    pub max_rel_err: f64,
    pub pass: bool,
}

/// Audit analytic gradients on `n_scenes` randomized scenes (odd seeds run
/// the layout-stage configuration with removal factors).
pub fn cmd_gradcheck(
    base_seed: u64,
    n_scenes: usize,
    out_json: Option<&Path>,
) -> Result<GradcheckSummary, CommandError> {
    let mut scenes = Vec::new();
    for k in 0..n_scenes as u64 {
        let cfg = GradcheckConfig {
            seed: base_seed + k,
            n_prims: 3 + (k % 8) as usize,
            with_removal: k % 2 == 1,
            ..Default::default()
        };
        scenes.push(gradcheck(&cfg));
    }
    let max_rel_err = scenes.iter().map(|r| r.max_rel_err).fold(0.0, f64::max);
    let pass = scenes.iter().all(|r| r.pass);
    let summary = GradcheckSummary { scenes, max_rel_err, pass };
    if let Some(p) = out_json {
        std::fs::write(p, serde_json::to_string_pretty(&summary).expect("summary serializes"))
            .map_err(|e| IoError::Io { path: p.display().to_string(), source: e })?;
    }
    Ok(summary)
}
