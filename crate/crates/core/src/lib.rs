//! Continual 3D Gaussian splatting at desk scale.
//!
//! A scene is a set of anisotropic 3D Gaussians rendered by perspective EWA
//! projection and front-to-back alpha blending. When the real scene changes
//! (lighting, objects removed, objects added), [`update::update`] adapts an
//! existing [`scene::GaussianField`] to new captures in three stages —
//! appearance, layout, joint refinement — while a visibility pool keeps every
//! past time step renderable and generative replay guards against forgetting.

pub mod appearance;
pub mod camera;
pub mod change;
pub mod commands;
pub mod config;
pub mod dbscan;
pub mod diff;
pub mod img;
pub mod io;
pub mod loss;
pub mod metrics;
pub mod oracle;
pub mod raster;
pub mod scene;
pub mod sh;
pub mod update;

pub use camera::CameraView;
pub use config::TrainingConfig;
pub use scene::{Gaussian, GaussianField, VisibilityPool};
