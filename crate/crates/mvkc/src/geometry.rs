//! Pose representation, rotation algebra, and template keypoint projection.
//!
//! Angle convention (fixed for the whole toolkit): a pose is the tuple
//! (azimuth, elevation, tilt) in degrees. The model frame coincides with
//! the camera frame at the zero pose: +X right, +Y down, +Z along the
//! optical axis away from the camera. The rotation applied to model points
//! is
//!
//! ```text
//! R = Rz(tilt) · Rx(-elevation) · Ry(-azimuth)
//! ```
//!
//! so azimuth spins the object about the vertical axis (turntable),
//! elevation pitches it about the horizontal axis (positive elevation =
//! camera above the object), and tilt rolls about the optical axis.
//! `euler_to_rotation(0, 0, 0)` is the identity.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

/// Orthonormality / determinant tolerance for [`RotationMatrix`].
pub const ROTATION_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("elevation {0} out of range [-90, 90]")]
    ElevationOutOfRange(f64),
    #[error("matrix is not a rotation: {0}")]
    NotARotation(String),
    #[error("invalid camera: {0}")]
    InvalidCamera(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("degenerate pose: every keypoint is behind the camera")]
    DegeneratePose,
    #[error("duplicate keypoint name `{0}`")]
    DuplicateKeypoint(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

/// Object viewpoint as (azimuth, elevation, tilt) in degrees.
///
/// Azimuth is stored modulo 360, tilt normalized to [-180, 180).
/// Elevation outside [-90, 90] is rejected.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EulerPose {
    azimuth: f64,
    elevation: f64,
    tilt: f64,
}

impl EulerPose {
    pub fn new(azimuth: f64, elevation: f64, tilt: f64) -> Result<Self, GeometryError> {
        if !(-90.0..=90.0).contains(&elevation) || !elevation.is_finite() {
            return Err(GeometryError::ElevationOutOfRange(elevation));
        }
        Ok(Self {
            azimuth: azimuth.rem_euclid(360.0),
            elevation,
            tilt: (tilt + 180.0).rem_euclid(360.0) - 180.0,
        })
    }

    pub fn azimuth(&self) -> f64 {
        self.azimuth
    }

    pub fn elevation(&self) -> f64 {
        self.elevation
    }

    pub fn tilt(&self) -> f64 {
        self.tilt
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.azimuth, self.elevation, self.tilt]
    }
}

/// Validated 3x3 rotation matrix (orthonormal, det +1 within 1e-9).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RotationMatrix(Matrix3<f64>);

impl RotationMatrix {
    /// Validates orthonormality and determinant before wrapping.
    pub fn new(m: Matrix3<f64>) -> Result<Self, GeometryError> {
        let gram = m.transpose() * m;
        let dev = (gram - Matrix3::identity()).abs().max();
        if dev > ROTATION_TOL {
            return Err(GeometryError::NotARotation(format!(
                "R^T R deviates from identity by {dev:.3e}"
            )));
        }
        let det = m.determinant();
        if (det - 1.0).abs() > ROTATION_TOL {
            return Err(GeometryError::NotARotation(format!("det(R) = {det}")));
        }
        Ok(Self(m))
    }

    /// Row-major 9-entry view of the matrix.
    pub fn to_row_major(&self) -> [f64; 9] {
        let m = &self.0;
        [
            m[(0, 0)],
            m[(0, 1)],
            m[(0, 2)],
            m[(1, 0)],
            m[(1, 1)],
            m[(1, 2)],
            m[(2, 0)],
            m[(2, 1)],
            m[(2, 2)],
        ]
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.0 * p
    }
}

fn rot_x(deg: f64) -> Matrix3<f64> {
    let (s, c) = deg.to_radians().sin_cos();
    Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c)
}

fn rot_y(deg: f64) -> Matrix3<f64> {
    let (s, c) = deg.to_radians().sin_cos();
    Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

fn rot_z(deg: f64) -> Matrix3<f64> {
    let (s, c) = deg.to_radians().sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

/// Composes the pose rotation `Rz(tilt) · Rx(-elev) · Ry(-azim)`.
pub fn euler_to_rotation(pose: &EulerPose) -> RotationMatrix {
    let m = rot_z(pose.tilt) * rot_x(-pose.elevation) * rot_y(-pose.azimuth);
    // The product of elementary rotations is a rotation; the constructor
    // check only guards against numerical drift.
    RotationMatrix::new(m).expect("composition of elementary rotations")
}

/// Geodesic distance on SO(3) in radians: arccos((trace(R1^T R2) - 1) / 2),
/// with the trace argument clamped to [-1, 1].
pub fn geodesic_distance(r1: &RotationMatrix, r2: &RotationMatrix) -> f64 {
    let rel = r1.matrix().transpose() * r2.matrix();
    let arg = ((rel.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    arg.acos()
}

/// The fixed rendering schedule: pose k (k = 1..m) has azimuth
/// (360/m * k) mod 360, elevation 10, tilt 0.
pub fn viewpoint_schedule(m: usize) -> Result<Vec<EulerPose>, GeometryError> {
    if m == 0 {
        return Err(GeometryError::InvalidArgument(
            "view count m must be >= 1".into(),
        ));
    }
    (1..=m)
        .map(|k| EulerPose::new((360.0 / m as f64 * k as f64).rem_euclid(360.0), 10.0, 0.0))
        .collect()
}

/// Named 3D keypoint in the template model's local frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Keypoint3D {
    pub name: String,
    pub position: Vector3<f64>,
}

impl Keypoint3D {
    pub fn new(name: impl Into<String>, x: f64, y: f64, z: f64) -> Self {
        Self {
            name: name.into(),
            position: Vector3::new(x, y, z),
        }
    }
}

/// Pinhole camera for template keypoint projection. The object sits at
/// `distance` along the optical axis; `height`/`width` bound visibility.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub focal: f64,
    pub cx: f64,
    pub cy: f64,
    pub distance: f64,
    pub height: u32,
    pub width: u32,
}

impl Camera {
    pub fn validate(&self) -> Result<(), GeometryError> {
        if self.focal <= 0.0 || !self.focal.is_finite() {
            return Err(GeometryError::InvalidCamera(format!(
                "focal must be > 0, got {}",
                self.focal
            )));
        }
        if self.distance <= 0.0 || !self.distance.is_finite() {
            return Err(GeometryError::InvalidCamera(format!(
                "distance must be > 0, got {}",
                self.distance
            )));
        }
        if self.height < 1 || self.width < 1 {
            return Err(GeometryError::InvalidCamera(format!(
                "image size must be >= 1x1, got {}x{}",
                self.height, self.width
            )));
        }
        if !self.cx.is_finite() || !self.cy.is_finite() {
            return Err(GeometryError::InvalidCamera(
                "principal point must be finite".into(),
            ));
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, GeometryError> {
        let cam: Camera = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        cam.validate()?;
        Ok(cam)
    }
}

/// A template keypoint projected into the image plane.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectedKeypoint {
    pub name: String,
    pub x: f64,
    pub y: f64,
    /// Camera-frame depth, for occlusion pruning downstream.
    pub depth: f64,
    pub visible: bool,
}

/// Projects template keypoints under `pose` through the pinhole camera.
///
/// A point is visible iff its depth is positive and its projection lies
/// inside the image bounds. Points at non-positive depth get coordinates
/// (0, 0); their position in the image plane is undefined.
pub fn project_keypoints(
    keypoints: &[Keypoint3D],
    pose: &EulerPose,
    camera: &Camera,
) -> Result<Vec<ProjectedKeypoint>, GeometryError> {
    camera.validate()?;
    if keypoints.is_empty() {
        return Err(GeometryError::InvalidArgument(
            "keypoint set must be non-empty".into(),
        ));
    }
    let rotation = euler_to_rotation(pose);
    let mut projected = Vec::with_capacity(keypoints.len());
    let mut any_in_front = false;
    for kp in keypoints {
        let cam_point = rotation.apply(&kp.position) + Vector3::new(0.0, 0.0, camera.distance);
        let depth = cam_point.z;
        let (x, y, visible) = if depth > 0.0 {
            any_in_front = true;
            let x = camera.focal * cam_point.x / depth + camera.cx;
            let y = camera.focal * cam_point.y / depth + camera.cy;
            let inside = x >= 0.0
                && x <= (camera.width - 1) as f64
                && y >= 0.0
                && y <= (camera.height - 1) as f64;
            (x, y, inside)
        } else {
            (0.0, 0.0, false)
        };
        projected.push(ProjectedKeypoint {
            name: kp.name.clone(),
            x,
            y,
            depth,
            visible,
        });
    }
    if !any_in_front {
        return Err(GeometryError::DegeneratePose);
    }
    Ok(projected)
}
