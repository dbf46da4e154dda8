//! Camera-space normalization geometry.
//!
//! Head pose is estimated from six facial landmarks (four eye corners, two
//! mouth corners) with EPnP followed by Levenberg-Marquardt refinement. The
//! normalized camera then looks straight at one eye centre from a fixed
//! distance with head roll removed, and the eye crop is warped into it.
//!
//! Conventions: camera frame is x right, y down, z forward. The head frame
//! has x from the right-eye midpoint to the left-eye midpoint, y from the eye
//! line towards the mouth midpoint inside the eyes-mouth triangle, and
//! z = x × y pointing backwards out of the face. A frontal head therefore has
//! identity rotation. Head angles are `(yaw, pitch)` with +yaw the head
//! turned towards its own left and +pitch the head tilted up.

mod image_ops;
mod normalize;
mod pose;

use nalgebra::{Matrix3, Rotation3, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::EyeSide;

pub use image_ops::{histogram_equalize, warp_eye_image, warp_image, write_pgm};
pub use normalize::{
    head_angle_vector, head_rotation, normalization_transform, Normalization, NormalizationParams,
    DEFAULT_DISTANCE_MM, DEFAULT_FOCAL,
};
pub use pose::{estimate_head_pose, project, PoseEstimate};

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("degenerate configuration: {0}")]
    Degenerate(String),
    #[error("non-finite input: {0}")]
    NonFinite(&'static str),
    #[error("warp matrix is singular")]
    SingularWarp,
    #[error("eye position coincides with the camera centre")]
    CameraAtOrigin,
    #[error("head pitch at +-90 degrees, yaw undefined")]
    GimbalLock,
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

/// Landmark order inside a [`FacialModel`].
pub mod landmark {
    pub const RIGHT_EYE_OUTER: usize = 0;
    pub const RIGHT_EYE_INNER: usize = 1;
    pub const LEFT_EYE_INNER: usize = 2;
    pub const LEFT_EYE_OUTER: usize = 3;
    pub const MOUTH_RIGHT: usize = 4;
    pub const MOUTH_LEFT: usize = 5;
}

/// Six 3D landmarks in head coordinates, millimetres.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FacialModel {
    pub points: [Vector3<f64>; 6],
}

impl FacialModel {
    /// A generic adult face, already expressed in its own head frame.
    pub fn generic() -> Self {
        let raw = [
            Vector3::new(-45.0, 0.0, 8.0),
            Vector3::new(-15.0, 0.0, 0.0),
            Vector3::new(15.0, 0.0, 0.0),
            Vector3::new(45.0, 0.0, 8.0),
            Vector3::new(-25.0, 65.0, 2.0),
            Vector3::new(25.0, 65.0, 2.0),
        ];
        Self::from_raw(raw).expect("generic model is well formed")
    }

    /// Re-expresses six landmarks given in any frame in the head frame
    /// derived from their eyes-mouth triangle.
    pub fn from_raw(points: [Vector3<f64>; 6]) -> Result<Self, GeometryError> {
        let (rot, origin) = head_frame(&points)?;
        Ok(FacialModel {
            points: points.map(|p| rot.inverse() * (p - origin)),
        })
    }

    pub fn eye_center(&self, side: EyeSide) -> Vector3<f64> {
        use landmark::*;
        match side {
            EyeSide::Left => (self.points[LEFT_EYE_INNER] + self.points[LEFT_EYE_OUTER]) / 2.0,
            EyeSide::Right => (self.points[RIGHT_EYE_INNER] + self.points[RIGHT_EYE_OUTER]) / 2.0,
        }
    }

    pub fn mouth_center(&self) -> Vector3<f64> {
        (self.points[landmark::MOUTH_LEFT] + self.points[landmark::MOUTH_RIGHT]) / 2.0
    }
}

/// Head frame of six landmarks: rotation whose columns are the head axes,
/// and the origin (foot of the perpendicular from the mouth midpoint onto the
/// eye line).
pub fn head_frame(
    points: &[Vector3<f64>; 6],
) -> Result<(Rotation3<f64>, Vector3<f64>), GeometryError> {
    use landmark::*;
    if points.iter().any(|p| !p.iter().all(|v| v.is_finite())) {
        return Err(GeometryError::NonFinite("facial model"));
    }
    let re = (points[RIGHT_EYE_INNER] + points[RIGHT_EYE_OUTER]) / 2.0;
    let le = (points[LEFT_EYE_INNER] + points[LEFT_EYE_OUTER]) / 2.0;
    let mo = (points[MOUTH_LEFT] + points[MOUTH_RIGHT]) / 2.0;
    let area = 0.5 * (le - re).cross(&(mo - re)).norm();
    let scale = (le - re).norm().max((mo - re).norm());
    if !(area > 1e-9 * scale * scale) {
        return Err(GeometryError::Degenerate(
            "eyes-mouth triangle has zero area".into(),
        ));
    }
    let x = (le - re).normalize();
    let origin = re + x * (mo - re).dot(&x);
    let y = (mo - origin).normalize();
    let z = x.cross(&y);
    let m = Matrix3::from_columns(&[x, y, z]);
    Ok((Rotation3::from_matrix_unchecked(m), origin))
}

/// Pinhole intrinsics with zero skew.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self, GeometryError> {
        if !(fx > 0.0 && fy > 0.0)
            || !cx.is_finite()
            || !cy.is_finite()
            || !fx.is_finite()
            || !fy.is_finite()
        {
            return Err(GeometryError::InvalidParameter(
                "focal lengths must be positive and finite".into(),
            ));
        }
        Ok(CameraIntrinsics { fx, fy, cx, cy })
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    pub fn inverse(&self) -> Matrix3<f64> {
        Matrix3::new(
            1.0 / self.fx,
            0.0,
            -self.cx / self.fx,
            0.0,
            1.0 / self.fy,
            -self.cy / self.fy,
            0.0,
            0.0,
            1.0,
        )
    }

    pub fn project(&self, p: &Vector3<f64>) -> Vector2<f64> {
        Vector2::new(self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy)
    }
}

/// Rigid head-to-camera transform.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RigidPose {
    pub rotation: Rotation3<f64>,
    pub translation: Vector3<f64>,
}

impl RigidPose {
    pub fn transform(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Pose of one eye: same rotation, position at that eye's corner midpoint.
    pub fn eye_pose(&self, model: &FacialModel, side: EyeSide) -> HeadPose {
        HeadPose {
            r: self.rotation,
            t: self.transform(&model.eye_center(side)),
        }
    }
}

/// Head rotation `r` (head to camera) and eye position `t` in camera
/// coordinates, millimetres.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadPose {
    pub r: Rotation3<f64>,
    pub t: Vector3<f64>,
}

/// Orthonormality and handedness defect of a rotation:
/// `max(|rᵀr - I|, |det r - 1|)`.
pub fn rotation_defect(r: &Matrix3<f64>) -> f64 {
    let ortho = (r.transpose() * r - Matrix3::identity()).abs().max();
    ortho.max((r.determinant() - 1.0).abs())
}

/// Angle of the relative rotation between `a` and `b`, radians.
pub fn rotation_angle_between(a: &Rotation3<f64>, b: &Rotation3<f64>) -> f64 {
    let m = a.matrix().transpose() * b.matrix();
    let sin = Vector3::new(
        m[(2, 1)] - m[(1, 2)],
        m[(0, 2)] - m[(2, 0)],
        m[(1, 0)] - m[(0, 1)],
    )
    .norm()
        / 2.0;
    let cos = (m.trace() - 1.0) / 2.0;
    sin.atan2(cos)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generic_model_in_own_frame() {
        let m = FacialModel::generic();
        let (rot, origin) = head_frame(&m.points).unwrap();
        assert!((rot.matrix() - Matrix3::identity()).abs().max() < 1e-12);
        assert!(origin.norm() < 1e-12);
        let le = m.eye_center(EyeSide::Left);
        let re = m.eye_center(EyeSide::Right);
        assert!(le.y.abs() < 1e-12 && le.z.abs() < 1e-12 && le.x > 0.0);
        assert!(re.y.abs() < 1e-12 && re.z.abs() < 1e-12 && re.x < 0.0);
        assert!(m.mouth_center().y > 0.0);
        // outer eye corners sit behind the inner ones: the model is not planar
        assert!(m.points[landmark::LEFT_EYE_OUTER].z > m.points[landmark::LEFT_EYE_INNER].z);
    }

    #[test]
    fn collapsed_triangle_rejected() {
        let p = Vector3::new(1.0, 2.0, 3.0);
        assert!(matches!(
            FacialModel::from_raw([p; 6]),
            Err(GeometryError::Degenerate(_))
        ));
    }

    #[test]
    fn intrinsics_inverse() {
        let k = CameraIntrinsics::new(900.0, 910.0, 320.0, 240.0).unwrap();
        assert!((k.matrix() * k.inverse() - Matrix3::identity()).abs().max() < 1e-15);
        assert!(CameraIntrinsics::new(0.0, 1.0, 0.0, 0.0).is_err());
    }
}
