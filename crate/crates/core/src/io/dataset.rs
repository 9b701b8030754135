//! Dataset directory format.
//!
//! ```text
//! <dir>/
//!   images/NNNN.png      8-bit RGB captures
//!   poses.json           per-frame pinhole intrinsics + world-to-camera
//!   meta.json            step number, optional masks / seed-points paths
//!   masks/NNNN.png       16-bit grayscale instance labels (optional)
//!   seed_points.json     colored 3D points (optional)
//! ```
//!
//! Poses are world-to-camera 4x4 row-major. Datasets commonly store
//! camera-to-world; converting is the loader's caller's job, not ours.

use super::{format_err, io_err, IoError};
use crate::camera::CameraView;
use crate::img::{ImageRgb, LabelImage};
use crate::oracle::{OracleDataset, SeedPoint};
use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

#[derive(Debug, Serialize, Deserialize)]
struct PoseEntry {
    file: String,
    world_to_camera: [[f64; 4]; 4],
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    width: u32,
    height: u32,
}

#[derive(Debug, Serialize, Deserialize)]
struct MetaFile {
    step: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    masks: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed_points: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct SeedPointEntry {
    position: [f64; 3],
    color: [f64; 3],
    #[serde(skip_serializing_if = "Option::is_none")]
    object_id: Option<u32>,
}

/// A dataset read back from disk.
#[derive(Debug)]
pub struct LoadedDataset {
    pub step: u32,
    pub views: Vec<(ImageRgb, CameraView)>,
    pub masks: Option<Vec<LabelImage>>,
    pub seed_points: Option<Vec<SeedPoint>>,
}

fn camera_to_pose(cam: &CameraView, file: String) -> PoseEntry {
    let mut m = [[0.0; 4]; 4];
    for r in 0..3 {
        for c in 0..3 {
            m[r][c] = cam.rotation[(r, c)];
        }
        m[r][3] = cam.translation[r];
    }
    m[3][3] = 1.0;
    PoseEntry {
        file,
        world_to_camera: m,
        fx: cam.fx,
        fy: cam.fy,
        cx: cam.cx,
        cy: cam.cy,
        width: cam.width,
        height: cam.height,
    }
}

fn pose_to_camera(p: &PoseEntry) -> Result<CameraView, IoError> {
    let m = &p.world_to_camera;
    let rotation = Matrix3::new(
        m[0][0], m[0][1], m[0][2], m[1][0], m[1][1], m[1][2], m[2][0], m[2][1], m[2][2],
    );
    let translation = Vector3::new(m[0][3], m[1][3], m[2][3]);
    Ok(CameraView::new(
        p.width, p.height, p.fx, p.fy, p.cx, p.cy, rotation, translation,
    )?)
}

fn write_png_rgb(path: &Path, img: &ImageRgb) -> Result<(), IoError> {
    let buf = img.to_rgb8();
    image::save_buffer(
        path,
        &buf,
        img.width as u32,
        img.height as u32,
        image::ExtendedColorType::Rgb8,
    )
    .map_err(|source| IoError::Image { path: path.display().to_string(), source })
}

fn read_png_rgb(path: &Path) -> Result<ImageRgb, IoError> {
    let img = image::open(path)
        .map_err(|source| IoError::Image { path: path.display().to_string(), source })?
        .to_rgb8();
    Ok(ImageRgb::from_rgb8(img.width() as usize, img.height() as usize, img.as_raw()))
}

fn write_png_labels(path: &Path, labels: &LabelImage) -> Result<(), IoError> {
    // save_buffer reinterprets the bytes as native-endian u16 samples.
    let buf: Vec<u8> = labels
        .data
        .iter()
        .flat_map(|&l| (l.min(u16::MAX as u32) as u16).to_ne_bytes())
        .collect();
    image::save_buffer(
        path,
        &buf,
        labels.width as u32,
        labels.height as u32,
        image::ExtendedColorType::L16,
    )
    .map_err(|source| IoError::Image { path: path.display().to_string(), source })
}

fn read_png_labels(path: &Path) -> Result<LabelImage, IoError> {
    let img = image::open(path)
        .map_err(|source| IoError::Image { path: path.display().to_string(), source })?
        .to_luma16();
    let mut labels = LabelImage::new(img.width() as usize, img.height() as usize);
    for (dst, src) in labels.data.iter_mut().zip(img.as_raw()) {
        *dst = *src as u32;
    }
    Ok(labels)
}

/// Write one step's dataset to `dir`.
pub fn write_dataset(dir: &Path, dataset: &OracleDataset) -> Result<(), IoError> {
    let images_dir = dir.join("images");
    fs::create_dir_all(&images_dir).map_err(|e| io_err(&images_dir, e))?;
    let mut poses = Vec::new();
    for (i, (img, cam)) in dataset.images.iter().zip(&dataset.cameras).enumerate() {
        let name = format!("{i:04}.png");
        write_png_rgb(&images_dir.join(&name), img)?;
        poses.push(camera_to_pose(cam, format!("images/{name}")));
    }
    let poses_path = dir.join("poses.json");
    fs::write(
        &poses_path,
        serde_json::to_string_pretty(&poses).expect("poses serialize"),
    )
    .map_err(|e| io_err(&poses_path, e))?;

    let masks_rel = "masks";
    let masks_dir = dir.join(masks_rel);
    fs::create_dir_all(&masks_dir).map_err(|e| io_err(&masks_dir, e))?;
    for (i, labels) in dataset.masks.iter().enumerate() {
        write_png_labels(&masks_dir.join(format!("{i:04}.png")), labels)?;
    }

    // The seed-points file carries the dense cloud for a step-0 dataset and
    // the sparse new-object seeds for an update step.
    let seeds = if dataset.step == 0 { &dataset.dense_points } else { &dataset.sparse_seeds };
    let seeds_rel = "seed_points.json";
    let entries: Vec<SeedPointEntry> = seeds
        .iter()
        .map(|s| SeedPointEntry {
            position: [s.position.x, s.position.y, s.position.z],
            color: [s.color.x, s.color.y, s.color.z],
            object_id: s.object_id,
        })
        .collect();
    let seeds_path = dir.join(seeds_rel);
    fs::write(
        &seeds_path,
        serde_json::to_string_pretty(&entries).expect("seeds serialize"),
    )
    .map_err(|e| io_err(&seeds_path, e))?;

    let meta = MetaFile {
        step: dataset.step,
        masks: Some(masks_rel.to_string()),
        seed_points: Some(seeds_rel.to_string()),
    };
    let meta_path = dir.join("meta.json");
    fs::write(
        &meta_path,
        serde_json::to_string_pretty(&meta).expect("meta serialize"),
    )
    .map_err(|e| io_err(&meta_path, e))?;
    Ok(())
}

/// Load just a poses.json file into camera views.
pub fn load_poses(path: &Path) -> Result<Vec<CameraView>, IoError> {
    if !path.is_file() {
        return Err(IoError::MissingFile(path.display().to_string()));
    }
    let poses: Vec<PoseEntry> =
        serde_json::from_str(&fs::read_to_string(path).map_err(|e| io_err(path, e))?)
            .map_err(|e| format_err(path, e.to_string()))?;
    poses.iter().map(pose_to_camera).collect()
}

/// Load a dataset directory, checking pose/image consistency.
pub fn load_dataset(dir: &Path) -> Result<LoadedDataset, IoError> {
    let poses_path = dir.join("poses.json");
    if !poses_path.is_file() {
        return Err(IoError::MissingFile(poses_path.display().to_string()));
    }
    let meta_path = dir.join("meta.json");
    if !meta_path.is_file() {
        return Err(IoError::MissingFile(meta_path.display().to_string()));
    }
    let poses: Vec<PoseEntry> = serde_json::from_str(
        &fs::read_to_string(&poses_path).map_err(|e| io_err(&poses_path, e))?,
    )
    .map_err(|e| format_err(&poses_path, e.to_string()))?;
    let meta: MetaFile =
        serde_json::from_str(&fs::read_to_string(&meta_path).map_err(|e| io_err(&meta_path, e))?)
            .map_err(|e| format_err(&meta_path, e.to_string()))?;

    let mut views = Vec::with_capacity(poses.len());
    for pose in &poses {
        let img_path = dir.join(&pose.file);
        if !img_path.is_file() {
            return Err(IoError::MissingFile(img_path.display().to_string()));
        }
        let img = read_png_rgb(&img_path)?;
        if img.width != pose.width as usize || img.height != pose.height as usize {
            return Err(format_err(
                &img_path,
                format!(
                    "image is {}x{} but the pose says {}x{}",
                    img.width, img.height, pose.width, pose.height
                ),
            ));
        }
        views.push((img, pose_to_camera(pose)?));
    }

    let masks = match &meta.masks {
        Some(rel) => {
            let mut out = Vec::with_capacity(poses.len());
            for i in 0..poses.len() {
                let p = dir.join(rel).join(format!("{i:04}.png"));
                if !p.is_file() {
                    return Err(IoError::MissingFile(p.display().to_string()));
                }
                out.push(read_png_labels(&p)?);
            }
            Some(out)
        }
        None => None,
    };

    let seed_points = match &meta.seed_points {
        Some(rel) => {
            let p = dir.join(rel);
            if !p.is_file() {
                return Err(IoError::MissingFile(p.display().to_string()));
            }
            let entries: Vec<SeedPointEntry> =
                serde_json::from_str(&fs::read_to_string(&p).map_err(|e| io_err(&p, e))?)
                    .map_err(|e| format_err(&p, e.to_string()))?;
            Some(
                entries
                    .into_iter()
                    .map(|e| SeedPoint {
                        position: Vector3::new(e.position[0], e.position[1], e.position[2]),
                        color: Vector3::new(e.color[0], e.color[1], e.color[2]),
                        object_id: e.object_id,
                    })
                    .collect(),
            )
        }
        None => None,
    };

    Ok(LoadedDataset { step: meta.step, views, masks, seed_points })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{make_scene, render_dataset, SceneSpec};
    use crate::raster::RenderOptions;

    #[test]
    fn dataset_round_trip_within_quantization() {
        let spec = SceneSpec {
            n_views: 3,
            resolution: (24, 24),
            n_objects: 2,
            gaussians_per_object: 20,
            background_gaussians: 40,
            ..Default::default()
        };
        let scene = make_scene(&spec);
        let ds = render_dataset(&scene, &RenderOptions::default());
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &ds).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back.step, 0);
        assert_eq!(back.views.len(), 3);
        for ((img, cam), (orig, orig_cam)) in
            back.views.iter().zip(ds.images.iter().zip(&ds.cameras))
        {
            for (a, b) in img.data.iter().zip(&orig.data) {
                assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
            }
            assert!((cam.rotation - orig_cam.rotation).norm() < 1e-12);
            assert!((cam.translation - orig_cam.translation).norm() < 1e-12);
        }
        let masks = back.masks.unwrap();
        for (m, orig) in masks.iter().zip(&ds.masks) {
            assert_eq!(m.data, orig.data);
        }
        let seeds = back.seed_points.unwrap();
        assert_eq!(seeds.len(), ds.dense_points.len());
        for (s, o) in seeds.iter().zip(&ds.dense_points) {
            assert!((s.position - o.position).norm() < 1e-12);
            assert_eq!(s.object_id, o.object_id);
        }
    }

    #[test]
    fn missing_poses_file_names_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let err = load_dataset(dir.path()).unwrap_err();
        match err {
            IoError::MissingFile(path) => assert!(path.ends_with("poses.json")),
            other => panic!("expected MissingFile, got {other}"),
        }
    }
}
