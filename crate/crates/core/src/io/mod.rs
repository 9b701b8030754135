//! On-disk formats: dataset directories, binary checkpoints, PLY change
//! clouds.

mod checkpoint;
mod dataset;
mod ply;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC};
pub use dataset::{load_dataset, load_poses, write_dataset, LoadedDataset};
pub use ply::changes_ply;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("missing file: {0}")]
    MissingFile(String),
    #[error("io failure on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad format in {path}: {reason}")]
    Format { path: String, reason: String },
    #[error("image error on {path}: {source}")]
    Image {
        path: String,
        #[source]
        source: image::ImageError,
    },
    #[error("config error: {0}")]
    Config(#[from] crate::config::ConfigError),
    #[error("camera error: {0}")]
    Camera(#[from] crate::camera::CameraError),
}

pub(crate) fn io_err(path: &std::path::Path, source: std::io::Error) -> IoError {
    IoError::Io { path: path.display().to_string(), source }
}

pub(crate) fn format_err(path: &std::path::Path, reason: impl Into<String>) -> IoError {
    IoError::Format { path: path.display().to_string(), reason: reason.into() }
}
