//! Pinhole camera with a world-to-camera rigid transform.

use nalgebra::{Matrix3, Vector2, Vector3};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CameraError {
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
}

/// A posed pinhole view. Poses are stored world-to-camera: a world point `p`
/// maps to camera space as `rotation * p + translation`.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraView {
    pub width: u32,
    pub height: u32,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl CameraView {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        width: u32,
        height: u32,
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
    ) -> Result<Self, CameraError> {
        if !(fx > 0.0 && fy > 0.0) {
            return Err(CameraError::InvalidIntrinsics(format!(
                "fx, fy must be positive (got {fx}, {fy})"
            )));
        }
        if !(cx > 0.0 && cx < width as f64 && cy > 0.0 && cy < height as f64) {
            return Err(CameraError::InvalidIntrinsics(format!(
                "principal point ({cx}, {cy}) outside {width}x{height} image"
            )));
        }
        Ok(Self { width, height, fx, fy, cx, cy, rotation, translation })
    }

    /// World point to camera space.
    pub fn world_to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    /// Unit vector from the camera center toward a world point.
    pub fn view_direction(&self, p: &Vector3<f64>) -> Vector3<f64> {
        let d = p - self.center();
        let n = d.norm();
        if n > 0.0 {
            d / n
        } else {
            Vector3::new(0.0, 0.0, 1.0)
        }
    }

    /// Pinhole projection of a camera-space point (caller checks depth > 0).
    pub fn project_camera_point(&self, p_cam: &Vector3<f64>) -> Vector2<f64> {
        let inv_z = 1.0 / p_cam.z;
        Vector2::new(
            self.fx * p_cam.x * inv_z + self.cx,
            self.fy * p_cam.y * inv_z + self.cy,
        )
    }

    /// A camera at `eye` looking at `target` with `up` roughly +z, in the
    /// world-to-camera convention used throughout.
    pub fn look_at(
        width: u32,
        height: u32,
        fx: f64,
        fy: f64,
        eye: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
    ) -> Result<Self, CameraError> {
        let forward = (target - eye).normalize();
        let right = forward.cross(&up).normalize();
        let down = forward.cross(&right);
        // Camera axes: x right, y down, z forward.
        let rotation = Matrix3::from_rows(&[
            right.transpose(),
            down.transpose(),
            forward.transpose(),
        ]);
        let translation = -(rotation * eye);
        Self::new(
            width,
            height,
            fx,
            fy,
            width as f64 / 2.0,
            height as f64 / 2.0,
            rotation,
            translation,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn look_at_puts_target_on_axis() {
        let cam = CameraView::look_at(
            64,
            64,
            60.0,
            60.0,
            Vector3::new(3.0, -2.0, 1.5),
            Vector3::new(0.0, 0.0, 0.0),
            Vector3::new(0.0, 0.0, 1.0),
        )
        .unwrap();
        let p = cam.world_to_camera(&Vector3::zeros());
        assert_relative_eq!(p.x, 0.0, epsilon = 1e-12);
        assert_relative_eq!(p.y, 0.0, epsilon = 1e-12);
        assert!(p.z > 0.0);
        let uv = cam.project_camera_point(&p);
        assert_relative_eq!(uv.x, 32.0, epsilon = 1e-9);
        assert_relative_eq!(uv.y, 32.0, epsilon = 1e-9);
    }

    #[test]
    fn center_round_trips() {
        let cam = CameraView::look_at(
            32,
            32,
            30.0,
            30.0,
            Vector3::new(1.0, 2.0, 3.0),
            Vector3::zeros(),
            Vector3::z(),
        )
        .unwrap();
        assert_relative_eq!(cam.center(), Vector3::new(1.0, 2.0, 3.0), epsilon = 1e-12);
    }

    #[test]
    fn rejects_bad_intrinsics() {
        let r = CameraView::new(64, 64, -1.0, 1.0, 32.0, 32.0, Matrix3::identity(), Vector3::zeros());
        assert!(r.is_err());
        let r = CameraView::new(64, 64, 10.0, 10.0, 70.0, 32.0, Matrix3::identity(), Vector3::zeros());
        assert!(r.is_err());
    }
}
