//! Coordinate frames, the pinhole camera and the anchor observation model.
//!
//! The world frame is right-handed with z up and its origin on the ground
//! plane. An anchor observes tags in its own local frame, whose +x axis is
//! the antenna boresight; measurements are reported as
//! `(radial, azimuth, elevation)` with azimuth in the local x-y plane and
//! elevation measured from that plane.
//!
//! Anchor orientation is a 3-vector `[roll, pitch, yaw]` applied as the
//! intrinsic Z-Y-X sequence, i.e. `R = Rz(yaw) * Ry(pitch) * Rx(roll)` maps
//! anchor-local vectors into the world frame.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use thiserror::Error;

pub type Vec3 = Vector3<f64>;

/// Below this range the polar angles are undefined.
pub const MIN_RANGE: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("point coincides with the anchor (range {0:e} m), angles undefined")]
    DegeneratePoint(f64),
    #[error("head box width must be positive, got {0}")]
    BadBox(f64),
    #[error("head width must be positive, got {0}")]
    BadHeadWidth(f64),
    #[error("rotation matrix is not a proper orthonormal rotation")]
    InvalidRotation,
    #[error("focal lengths must be positive (fx={fx}, fy={fy})")]
    InvalidIntrinsics { fx: f64, fy: f64 },
}

/// One anchor-frame UWB observation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolarMeasurement {
    pub radial: f64,
    pub azimuth: f64,
    pub elevation: f64,
}

impl PolarMeasurement {
    pub fn new(radial: f64, azimuth: f64, elevation: f64) -> Self {
        Self {
            radial,
            azimuth,
            elevation,
        }
    }

    pub fn to_vector(self) -> Vec3 {
        Vec3::new(self.radial, self.azimuth, self.elevation)
    }

    pub fn from_vector(v: &Vec3) -> Self {
        Self::new(v[0], v[1], v[2])
    }

    pub fn is_valid(&self) -> bool {
        self.radial.is_finite()
            && self.radial >= 0.0
            && self.azimuth > -PI - 1e-12
            && self.azimuth <= PI + 1e-12
            && self.elevation.abs() <= PI / 2.0 + 1e-12
    }
}

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    let mut w = a.rem_euclid(2.0 * PI);
    if w > PI {
        w -= 2.0 * PI;
    }
    // rem_euclid maps -pi to pi already; guard the float edge the other way
    if w <= -PI {
        w += 2.0 * PI;
    }
    w
}

/// Rotation for intrinsic Z-Y-X Euler angles given as `[roll, pitch, yaw]`.
pub fn euler_zyx_rotation(angles: [f64; 3]) -> Matrix3<f64> {
    let [roll, pitch, yaw] = angles;
    let (sr, cr) = roll.sin_cos();
    let (sp, cp) = pitch.sin_cos();
    let (sy, cy) = yaw.sin_cos();
    let rz = Matrix3::new(cy, -sy, 0.0, sy, cy, 0.0, 0.0, 0.0, 1.0);
    let ry = Matrix3::new(cp, 0.0, sp, 0.0, 1.0, 0.0, -sp, 0.0, cp);
    let rx = Matrix3::new(1.0, 0.0, 0.0, 0.0, cr, -sr, 0.0, sr, cr);
    rz * ry * rx
}

/// Installed pose of a UWB anchor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnchorPose {
    pub position: Vec3,
    /// `[roll, pitch, yaw]` in radians.
    pub orientation: [f64; 3],
}

impl AnchorPose {
    pub fn new(position: Vec3, orientation: [f64; 3]) -> Self {
        Self {
            position,
            orientation,
        }
    }

    pub fn identity() -> Self {
        Self::new(Vec3::zeros(), [0.0; 3])
    }

    /// Anchor-local to world rotation.
    pub fn rotation(&self) -> Matrix3<f64> {
        euler_zyx_rotation(self.orientation)
    }

    pub fn is_finite(&self) -> bool {
        self.position.iter().all(|c| c.is_finite()) && self.orientation.iter().all(|a| a.is_finite())
    }
}

/// Converts an anchor-local Cartesian vector to polar form.
pub fn local_to_polar(local: &Vec3) -> Result<PolarMeasurement, GeometryError> {
    let r = local.norm();
    if r < MIN_RANGE {
        return Err(GeometryError::DegeneratePoint(r));
    }
    let az = wrap_angle(local.y.atan2(local.x));
    let el = (local.z / r).clamp(-1.0, 1.0).asin();
    Ok(PolarMeasurement::new(r, az, el))
}

pub fn polar_to_local(z: &PolarMeasurement) -> Vec3 {
    let (se, ce) = z.elevation.sin_cos();
    let (sa, ca) = z.azimuth.sin_cos();
    z.radial * Vec3::new(ce * ca, ce * sa, se)
}

/// The observation model `h`: world point to anchor polar measurement.
pub fn world_to_anchor_polar(p: &Vec3, pose: &AnchorPose) -> Result<PolarMeasurement, GeometryError> {
    let local = pose.rotation().transpose() * (p - pose.position);
    local_to_polar(&local)
}

pub fn anchor_polar_to_world(z: &PolarMeasurement, pose: &AnchorPose) -> Vec3 {
    pose.rotation() * polar_to_local(z) + pose.position
}

/// Distortion-free pinhole intrinsics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self, GeometryError> {
        if !(fx > 0.0 && fy > 0.0) {
            return Err(GeometryError::InvalidIntrinsics { fx, fy });
        }
        Ok(Self { fx, fy, cx, cy })
    }

    /// Projects a camera-frame point (OpenCV axes: x right, y down, z forward).
    pub fn project(&self, p_cam: &Vec3) -> (f64, f64) {
        (
            self.fx * p_cam.x / p_cam.z + self.cx,
            self.fy * p_cam.y / p_cam.z + self.cy,
        )
    }

    /// Camera-frame point at optical-axis depth `depth` behind pixel `(u, v)`.
    pub fn back_project(&self, u: f64, v: f64, depth: f64) -> Vec3 {
        Vec3::new(
            (u - self.cx) * depth / self.fx,
            (v - self.cy) * depth / self.fy,
            depth,
        )
    }
}

/// World-to-camera rigid transform: `p_cam = rotation * p_world + translation`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawExtrinsics")]
pub struct CameraExtrinsics {
    pub rotation: Matrix3<f64>,
    pub translation: Vec3,
}

#[derive(Deserialize)]
struct RawExtrinsics {
    rotation: Matrix3<f64>,
    translation: Vec3,
}

impl TryFrom<RawExtrinsics> for CameraExtrinsics {
    type Error = GeometryError;
    fn try_from(raw: RawExtrinsics) -> Result<Self, Self::Error> {
        CameraExtrinsics::new(raw.rotation, raw.translation)
    }
}

impl CameraExtrinsics {
    pub fn new(rotation: Matrix3<f64>, translation: Vec3) -> Result<Self, GeometryError> {
        if !is_rotation(&rotation, 1e-9) {
            return Err(GeometryError::InvalidRotation);
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    /// Camera at `center` whose optical axis points at `target`, with image
    /// "down" aligned to world -z as far as possible.
    pub fn look_at(center: Vec3, target: Vec3) -> Result<Self, GeometryError> {
        let forward = (target - center).normalize();
        let down_hint = Vec3::new(0.0, 0.0, -1.0);
        let right = down_hint.cross(&forward);
        if right.norm() < 1e-9 {
            return Err(GeometryError::InvalidRotation);
        }
        let right = right.normalize();
        let down = forward.cross(&right);
        let rotation = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let translation = -(rotation * center);
        Self::new(rotation, translation)
    }

    pub fn world_to_camera(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    pub fn camera_to_world(&self, p_cam: &Vec3) -> Vec3 {
        self.rotation.transpose() * (p_cam - self.translation)
    }

    pub fn center(&self) -> Vec3 {
        -(self.rotation.transpose() * self.translation)
    }
}

pub fn is_rotation(m: &Matrix3<f64>, tol: f64) -> bool {
    let ortho = (m.transpose() * m - Matrix3::identity()).abs().max() <= tol;
    ortho && (m.determinant() - 1.0).abs() <= tol
}

/// A head bounding box from the people tracker. `(u, v)` is the box center.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadDetection {
    pub tracklet_id: u64,
    #[serde(rename = "t")]
    pub timestamp: f64,
    #[serde(rename = "u_px")]
    pub u: f64,
    #[serde(rename = "v_px")]
    pub v: f64,
    #[serde(rename = "w_px")]
    pub width: f64,
    #[serde(rename = "h_px")]
    pub height: f64,
}

/// Depth from apparent head width: `d = fx * w_r / w_p`.
pub fn head_depth(fx: f64, head_width_m: f64, box_width_px: f64) -> Result<f64, GeometryError> {
    if !(box_width_px > 0.0) {
        return Err(GeometryError::BadBox(box_width_px));
    }
    if !(head_width_m > 0.0) {
        return Err(GeometryError::BadHeadWidth(head_width_m));
    }
    Ok(fx * head_width_m / box_width_px)
}

/// World position of the head center seen in `det`.
pub fn head_box_to_world(
    det: &HeadDetection,
    intr: &CameraIntrinsics,
    extr: &CameraExtrinsics,
    head_width_m: f64,
) -> Result<Vec3, GeometryError> {
    let depth = head_depth(intr.fx, head_width_m, det.width)?;
    let p_cam = intr.back_project(det.u, det.v, depth);
    Ok(extr.camera_to_world(&p_cam))
}

/// Head position with its height replaced by the tag height, the point that
/// is compared against tag estimates.
pub fn head_box_to_tag_plane(
    det: &HeadDetection,
    intr: &CameraIntrinsics,
    extr: &CameraExtrinsics,
    head_width_m: f64,
    tag_height_m: f64,
) -> Result<Vec3, GeometryError> {
    let mut p = head_box_to_world(det, intr, extr, head_width_m)?;
    p.z = tag_height_m;
    Ok(p)
}
