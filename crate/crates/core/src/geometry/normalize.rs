use nalgebra::{Matrix3, Rotation3, Vector3};
use serde::{Deserialize, Serialize};

use super::{CameraIntrinsics, GeometryError, HeadPose};
use crate::dataset::{EYE_HEIGHT, EYE_WIDTH};

/// Default distance of the normalized camera from the eye, millimetres.
pub const DEFAULT_DISTANCE_MM: f64 = 600.0;
/// Default focal length of the normalized camera, pixels.
pub const DEFAULT_FOCAL: f64 = 960.0;

/// Fixed distance, focal length and resolution of the normalized camera.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizationParams {
    pub distance: f64,
    pub focal: f64,
    pub width: usize,
    pub height: usize,
}

impl Default for NormalizationParams {
    fn default() -> Self {
        NormalizationParams {
            distance: DEFAULT_DISTANCE_MM,
            focal: DEFAULT_FOCAL,
            width: EYE_WIDTH,
            height: EYE_HEIGHT,
        }
    }
}

impl NormalizationParams {
    pub fn validate(&self) -> Result<(), GeometryError> {
        if !(self.distance > 0.0 && self.focal > 0.0) || self.width == 0 || self.height == 0 {
            return Err(GeometryError::InvalidParameter(
                "normalization needs d > 0, f > 0 and a non-empty resolution".into(),
            ));
        }
        Ok(())
    }

    /// Projection matrix of the normalized camera.
    pub fn camera_matrix(&self) -> Matrix3<f64> {
        Matrix3::new(
            self.focal,
            0.0,
            self.width as f64 / 2.0,
            0.0,
            self.focal,
            self.height as f64 / 2.0,
            0.0,
            0.0,
            1.0,
        )
    }
}

/// The normalizing camera change for one eye.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Normalization {
    /// Image-to-image homography `C_n · S · R_n · K⁻¹`.
    pub warp: Matrix3<f64>,
    /// Rotation `R_n` of the normalized camera.
    pub rotation: Rotation3<f64>,
    /// `diag(1, 1, d / |t|)`.
    pub scale: Matrix3<f64>,
}

impl Normalization {
    /// Head rotation expressed in the normalized camera, `R_n · r`.
    pub fn normalized_head_rotation(&self, pose: &HeadPose) -> Rotation3<f64> {
        self.rotation * pose.r
    }
}

/// Builds the rotation and scaling that put the eye at the centre of a
/// virtual camera at distance `d`, with the camera x axis aligned to the
/// projection of the head x axis.
pub fn normalization_transform(
    pose: &HeadPose,
    cam: &CameraIntrinsics,
    params: &NormalizationParams,
) -> Result<Normalization, GeometryError> {
    params.validate()?;
    if !pose.t.iter().all(|v| v.is_finite()) {
        return Err(GeometryError::NonFinite("eye position"));
    }
    let dist = pose.t.norm();
    if dist < 1e-9 {
        return Err(GeometryError::CameraAtOrigin);
    }
    let z = pose.t / dist;
    let head_x: Vector3<f64> = pose.r.matrix().column(0).into_owned();
    let y = z.cross(&head_x);
    if y.norm() < 1e-12 {
        return Err(GeometryError::Degenerate(
            "head x axis points at the camera".into(),
        ));
    }
    let y = y.normalize();
    let x = y.cross(&z);
    let rotation = Rotation3::from_matrix_unchecked(Matrix3::from_rows(&[
        x.transpose(),
        y.transpose(),
        z.transpose(),
    ]));
    let scale = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, params.distance / dist));
    let warp = params.camera_matrix() * scale * rotation.matrix() * cam.inverse();
    Ok(Normalization {
        warp,
        rotation,
        scale,
    })
}

/// Yaw-pitch rotation following the crate's head-angle convention; the
/// inverse of [`head_angle_vector`].
pub fn head_rotation(yaw: f64, pitch: f64) -> Rotation3<f64> {
    Rotation3::from_axis_angle(&Vector3::y_axis(), -yaw)
        * Rotation3::from_axis_angle(&Vector3::x_axis(), -pitch)
}

/// `(yaw, pitch)` of a head rotation given in the normalized camera frame,
/// read off the head's forward (z) axis.
pub fn head_angle_vector(r: &Matrix3<f64>) -> Result<[f64; 2], GeometryError> {
    if !r.iter().all(|v| v.is_finite()) {
        return Err(GeometryError::NonFinite("rotation"));
    }
    let z = r.column(2);
    if z.y.abs() >= 1.0 - 1e-12 {
        return Err(GeometryError::GimbalLock);
    }
    Ok([(-z.x).atan2(z.z), z.y.asin()])
}
