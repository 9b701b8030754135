//! Binary checkpoint: the full field state plus a config snapshot.
//!
//! Little-endian throughout; an 8-byte magic, a format version, and the
//! hash-prime constants lead the file so checkpoints are self-describing.

use super::{format_err, io_err, IoError};
use crate::appearance::{AppearanceModel, HashGrid4d, LevelMeta, TinyMlp, HASH_PRIMES};
use crate::camera::CameraView;
use crate::config::TrainingConfig;
use crate::scene::{Gaussian, GaussianField, LifecycleRecord, Origin, TimeStepRecord, VisibilityPool};
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use nalgebra::{Matrix3, Vector3, Vector4};
use std::io::{Read, Write};
use std::path::Path;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CHSPLAT1";
const VERSION: u32 = 1;
const DEATH_OPEN: u32 = u32::MAX;

/// A field together with the configuration that produced it.
#[derive(Debug)]
pub struct Checkpoint {
    pub field: GaussianField,
    pub config: TrainingConfig,
}

pub fn save_checkpoint(path: &Path, field: &GaussianField, config: &TrainingConfig) -> Result<(), IoError> {
    let mut buf: Vec<u8> = Vec::new();
    write_all(&mut buf, field, config).expect("in-memory write cannot fail");
    std::fs::write(path, &buf).map_err(|e| io_err(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, IoError> {
    if !path.is_file() {
        return Err(IoError::MissingFile(path.display().to_string()));
    }
    let bytes = std::fs::read(path).map_err(|e| io_err(path, e))?;
    read_all(&mut bytes.as_slice()).map_err(|reason| format_err(path, reason))
}

fn write_all<W: Write>(w: &mut W, field: &GaussianField, config: &TrainingConfig) -> std::io::Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_u32::<LittleEndian>(VERSION)?;
    for p in HASH_PRIMES {
        w.write_u32::<LittleEndian>(p)?;
    }
    let config_text = config.to_text();
    w.write_u32::<LittleEndian>(config_text.len() as u32)?;
    w.write_all(config_text.as_bytes())?;

    w.write_u32::<LittleEndian>(field.sh_degree as u32)?;
    w.write_f64::<LittleEndian>(field.scene_extent)?;
    w.write_u32::<LittleEndian>(field.current_step)?;

    let k = crate::sh::coeff_count(field.sh_degree);
    w.write_u32::<LittleEndian>(field.primitives.len() as u32)?;
    for g in &field.primitives {
        write_vec3(w, &g.position)?;
        write_vec3(w, &g.log_scale)?;
        for d in 0..4 {
            w.write_f64::<LittleEndian>(g.rotation[d])?;
        }
        w.write_f64::<LittleEndian>(g.opacity_logit)?;
        debug_assert_eq!(g.sh.len(), k);
        for c in &g.sh {
            write_vec3(w, c)?;
        }
        match g.removal_factor {
            Some(m) => {
                w.write_u8(1)?;
                w.write_f64::<LittleEndian>(m)?;
            }
            None => w.write_u8(0)?,
        }
        match g.object_id {
            Some(id) => {
                w.write_u8(1)?;
                w.write_u32::<LittleEndian>(id)?;
            }
            None => w.write_u8(0)?,
        }
    }

    for r in field.pool.records() {
        w.write_u32::<LittleEndian>(r.birth_step)?;
        w.write_u32::<LittleEndian>(r.death_step.unwrap_or(DEATH_OPEN))?;
        match r.origin {
            Origin::Initial => {
                w.write_u8(0)?;
                w.write_u32::<LittleEndian>(0)?;
            }
            Origin::AddedAtStep(s) => {
                w.write_u8(1)?;
                w.write_u32::<LittleEndian>(s)?;
            }
        }
    }

    w.write_u32::<LittleEndian>(field.time_records.len() as u32)?;
    for rec in &field.time_records {
        w.write_u32::<LittleEndian>(rec.step)?;
        w.write_f64::<LittleEndian>(rec.t_norm)?;
        w.write_u32::<LittleEndian>(rec.replay_cameras.len() as u32)?;
        for cam in &rec.replay_cameras {
            w.write_u32::<LittleEndian>(cam.width)?;
            w.write_u32::<LittleEndian>(cam.height)?;
            for v in [cam.fx, cam.fy, cam.cx, cam.cy] {
                w.write_f64::<LittleEndian>(v)?;
            }
            for r in 0..3 {
                for c in 0..3 {
                    w.write_f64::<LittleEndian>(cam.rotation[(r, c)])?;
                }
            }
            write_vec3(w, &cam.translation)?;
        }
    }

    // Appearance model.
    let model = &field.appearance;
    w.write_u8(model.enabled as u8)?;
    w.write_u32::<LittleEndian>(model.sh_degree as u32)?;
    let grid = &model.grid;
    w.write_u8(grid.levels.len() as u8)?;
    for level in &grid.levels {
        w.write_u32::<LittleEndian>(level.spatial_res)?;
        w.write_u32::<LittleEndian>(level.time_res)?;
    }
    w.write_u8(grid.table_log2)?;
    w.write_u32::<LittleEndian>(grid.feature_dim as u32)?;
    write_vec3(w, &grid.bbox_min)?;
    write_vec3(w, &grid.bbox_max)?;
    w.write_u64::<LittleEndian>(grid.features.len() as u64)?;
    for f in &grid.features {
        w.write_f64::<LittleEndian>(*f)?;
    }
    let mlp = &model.mlp;
    w.write_u32::<LittleEndian>(mlp.in_dim as u32)?;
    w.write_u32::<LittleEndian>(mlp.hidden_dim as u32)?;
    w.write_u32::<LittleEndian>(mlp.out_dim as u32)?;
    for t in [&mlp.w1, &mlp.b1, &mlp.w2, &mlp.b2] {
        for v in t {
            w.write_f64::<LittleEndian>(*v)?;
        }
    }
    Ok(())
}

fn read_all(r: &mut &[u8]) -> Result<Checkpoint, String> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|e| e.to_string())?;
    if &magic != CHECKPOINT_MAGIC {
        return Err("bad magic; not a checkpoint".into());
    }
    let version = r.read_u32::<LittleEndian>().map_err(|e| e.to_string())?;
    if version != VERSION {
        return Err(format!("unsupported checkpoint version {version}"));
    }
    for expected in HASH_PRIMES {
        let got = r.read_u32::<LittleEndian>().map_err(|e| e.to_string())?;
        if got != expected {
            return Err("hash prime constants differ; checkpoint not portable here".into());
        }
    }
    let config_len = r.read_u32::<LittleEndian>().map_err(|e| e.to_string())? as usize;
    let mut config_bytes = vec![0u8; config_len];
    r.read_exact(&mut config_bytes).map_err(|e| e.to_string())?;
    let config_text = String::from_utf8(config_bytes).map_err(|e| e.to_string())?;
    let config = TrainingConfig::parse(&config_text).map_err(|e| e.to_string())?;

    let sh_degree = r.read_u32::<LittleEndian>().map_err(|e| e.to_string())? as usize;
    let scene_extent = r.read_f64::<LittleEndian>().map_err(|e| e.to_string())?;
    let current_step = r.read_u32::<LittleEndian>().map_err(|e| e.to_string())?;
    let k = crate::sh::coeff_count(sh_degree);

    let n_prims = r.read_u32::<LittleEndian>().map_err(|e| e.to_string())? as usize;
    let mut primitives = Vec::with_capacity(n_prims);
    for _ in 0..n_prims {
        let position = read_vec3(r)?;
        let log_scale = read_vec3(r)?;
        let mut rotation = Vector4::zeros();
        for d in 0..4 {
            rotation[d] = r.read_f64::<LittleEndian>().map_err(|e| e.to_string())?;
        }
        let opacity_logit = r.read_f64::<LittleEndian>().map_err(|e| e.to_string())?;
        let mut sh = Vec::with_capacity(k);
        for _ in 0..k {
            sh.push(read_vec3(r)?);
        }
        let removal_factor = match r.read_u8().map_err(|e| e.to_string())? {
            0 => None,
            _ => Some(r.read_f64::<LittleEndian>().map_err(|e| e.to_string())?),
        };
        let object_id = match r.read_u8().map_err(|e| e.to_string())? {
            0 => None,
            _ => Some(r.read_u32::<LittleEndian>().map_err(|e| e.to_string())?),
        };
        primitives.push(Gaussian {
            position,
            log_scale,
            rotation,
            opacity_logit,
            sh,
            removal_factor,
            object_id,
        });
    }

    let mut records = Vec::with_capacity(n_prims);
    for _ in 0..n_prims {
        let birth_step = r.read_u32::<LittleEndian>().map_err(|e| e.to_string())?;
        let death = r.read_u32::<LittleEndian>().map_err(|e| e.to_string())?;
        let origin_tag = r.read_u8().map_err(|e| e.to_string())?;
        let origin_step = r.read_u32::<LittleEndian>().map_err(|e| e.to_string())?;
        records.push(LifecycleRecord {
            birth_step,
            death_step: (death != DEATH_OPEN).then_some(death),
            origin: if origin_tag == 0 {
                Origin::Initial
            } else {
                Origin::AddedAtStep(origin_step)
            },
        });
    }
    let mut pool = VisibilityPool::default();
    pool.restore(records);

    let n_records = r.read_u32::<LittleEndian>().map_err(|e| e.to_string())? as usize;
    let mut time_records = Vec::with_capacity(n_records);
    for _ in 0..n_records {
        let step = r.read_u32::<LittleEndian>().map_err(|e| e.to_string())?;
        let t_norm = r.read_f64::<LittleEndian>().map_err(|e| e.to_string())?;
        let n_cams = r.read_u32::<LittleEndian>().map_err(|e| e.to_string())? as usize;
        let mut replay_cameras = Vec::with_capacity(n_cams);
        for _ in 0..n_cams {
            let width = r.read_u32::<LittleEndian>().map_err(|e| e.to_string())?;
            let height = r.read_u32::<LittleEndian>().map_err(|e| e.to_string())?;
            let fx = r.read_f64::<LittleEndian>().map_err(|e| e.to_string())?;
            let fy = r.read_f64::<LittleEndian>().map_err(|e| e.to_string())?;
            let cx = r.read_f64::<LittleEndian>().map_err(|e| e.to_string())?;
            let cy = r.read_f64::<LittleEndian>().map_err(|e| e.to_string())?;
            let mut rotation = Matrix3::zeros();
            for row in 0..3 {
                for col in 0..3 {
                    rotation[(row, col)] =
                        r.read_f64::<LittleEndian>().map_err(|e| e.to_string())?;
                }
            }
            let translation = read_vec3(r)?;
            replay_cameras.push(
                CameraView::new(width, height, fx, fy, cx, cy, rotation, translation)
                    .map_err(|e| e.to_string())?,
            );
        }
        time_records.push(TimeStepRecord { step, t_norm, replay_cameras });
    }

    let enabled = r.read_u8().map_err(|e| e.to_string())? != 0;
    let model_sh_degree = r.read_u32::<LittleEndian>().map_err(|e| e.to_string())? as usize;
    let n_levels = r.read_u8().map_err(|e| e.to_string())? as usize;
    let mut levels = Vec::with_capacity(n_levels);
    for _ in 0..n_levels {
        let spatial_res = r.read_u32::<LittleEndian>().map_err(|e| e.to_string())?;
        let time_res = r.read_u32::<LittleEndian>().map_err(|e| e.to_string())?;
        levels.push(LevelMeta { spatial_res, time_res });
    }
    let table_log2 = r.read_u8().map_err(|e| e.to_string())?;
    let feature_dim = r.read_u32::<LittleEndian>().map_err(|e| e.to_string())? as usize;
    let bbox_min = read_vec3(r)?;
    let bbox_max = read_vec3(r)?;
    let n_features = r.read_u64::<LittleEndian>().map_err(|e| e.to_string())? as usize;
    if n_features != n_levels * (1usize << table_log2) * feature_dim {
        return Err("feature table size disagrees with level metadata".into());
    }
    let mut features = Vec::with_capacity(n_features);
    for _ in 0..n_features {
        features.push(r.read_f64::<LittleEndian>().map_err(|e| e.to_string())?);
    }
    let grid = HashGrid4d { levels, table_log2, feature_dim, bbox_min, bbox_max, features };
    let in_dim = r.read_u32::<LittleEndian>().map_err(|e| e.to_string())? as usize;
    let hidden_dim = r.read_u32::<LittleEndian>().map_err(|e| e.to_string())? as usize;
    let out_dim = r.read_u32::<LittleEndian>().map_err(|e| e.to_string())? as usize;
    let mut mlp = TinyMlp {
        in_dim,
        hidden_dim,
        out_dim,
        w1: vec![0.0; hidden_dim * in_dim],
        b1: vec![0.0; hidden_dim],
        w2: vec![0.0; out_dim * hidden_dim],
        b2: vec![0.0; out_dim],
    };
    for t in [&mut mlp.w1, &mut mlp.b1, &mut mlp.w2, &mut mlp.b2] {
        for v in t.iter_mut() {
            *v = r.read_f64::<LittleEndian>().map_err(|e| e.to_string())?;
        }
    }
    if !r.is_empty() {
        return Err(format!("{} trailing bytes", r.len()));
    }

    Ok(Checkpoint {
        field: GaussianField {
            primitives,
            appearance: AppearanceModel { grid, mlp, sh_degree: model_sh_degree, enabled },
            pool,
            time_records,
            current_step,
            sh_degree,
            scene_extent,
        },
        config,
    })
}

fn write_vec3<W: Write>(w: &mut W, v: &Vector3<f64>) -> std::io::Result<()> {
    for d in 0..3 {
        w.write_f64::<LittleEndian>(v[d])?;
    }
    Ok(())
}

fn read_vec3(r: &mut &[u8]) -> Result<Vector3<f64>, String> {
    let mut v = Vector3::zeros();
    for d in 0..3 {
        v[d] = r.read_f64::<LittleEndian>().map_err(|e| e.to_string())?;
    }
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{make_scene, orbit_cameras, render_dataset, SceneSpec};
    use crate::raster::{render, RenderOptions};
    use crate::update::build_initial_field;

    #[test]
    fn round_trip_preserves_renders_bit_exactly() {
        let spec = SceneSpec {
            n_views: 3,
            resolution: (24, 24),
            n_objects: 2,
            gaussians_per_object: 15,
            background_gaussians: 30,
            ..Default::default()
        };
        let scene = make_scene(&spec);
        let ds = render_dataset(&scene, &RenderOptions::default());
        let config = TrainingConfig::default();
        let mut field = build_initial_field(&ds.dense_points, ds.cameras.clone(), &config);
        // Exercise optional fields.
        field.primitives[0].removal_factor = Some(-0.003);
        field.pool.deactivate(3, 0);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("field.ckpt");
        save_checkpoint(&path, &field, &config).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.config, config);
        assert_eq!(loaded.field.primitives.len(), field.primitives.len());

        let cam = &orbit_cameras(&spec, 3, 0.0)[0];
        let opts = RenderOptions::default();
        let a = render(&field.current_view(false), cam, &opts);
        let b = render(&loaded.field.current_view(false), cam, &opts);
        assert_eq!(a.color.data, b.color.data);
        assert_eq!(a.transmittance, b.transmittance);

        // Saving the loaded copy reproduces the bytes.
        let path2 = dir.path().join("field2.ckpt");
        save_checkpoint(&path2, &loaded.field, &loaded.config).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn rejects_corrupt_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        std::fs::write(&path, b"NOTASPLATFILE").unwrap();
        assert!(matches!(load_checkpoint(&path), Err(IoError::Format { .. })));
    }

    #[test]
    fn missing_file_is_reported() {
        let err = load_checkpoint(Path::new("/nonexistent/x.ckpt")).unwrap_err();
        assert!(matches!(err, IoError::MissingFile(_)));
    }
}
