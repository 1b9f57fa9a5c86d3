//! Rigid-body transforms, pinhole projection, and the motion-aware pose warp.
//!
//! Conventions used throughout the crate:
//! - Camera frame: x right, y down, z forward (KITTI camera frame).
//! - `Se3` composition acts right-to-left on column vectors:
//!   `a.compose(&b)` applies `b` first, then `a`.
//! - Ego poses map camera coordinates of their frame to world coordinates,
//!   where the world frame is the camera frame at time 0.
//! - Object yaw rotates about the camera vertical (y) axis with
//!   `R(yaw) = [[cos, 0, sin], [0, 1, 0], [-sin, 0, cos]]` and is wrapped to
//!   `(-pi, pi]` at every operation boundary.

use nalgebra::{Matrix3, Vector2, Vector3};
use thiserror::Error;

/// Image-plane position in pixels.
pub type Pixel2d = Vector2<f64>;
/// Metric position, camera or world frame depending on context.
pub type Point3d = Vector3<f64>;

/// Orthonormality / determinant tolerance for a valid rotation.
pub const ROTATION_TOL: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum GeomError {
    #[error("rotation is not a proper orthonormal matrix (max deviation {0:.3e})")]
    InvalidRotation(f64),
    #[error("no pose for frame {0}")]
    MissingFrame(usize),
    #[error("point is behind the camera (z = {0})")]
    BehindCamera(f64),
    #[error("depth must be positive (got {0})")]
    InvalidDepth(f64),
    #[error("object sits on the camera origin; viewing ray undefined")]
    DegenerateGeometry,
    #[error("invalid camera intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("invalid object pose: {0}")]
    InvalidPose(String),
}

/// Wrap an angle to `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    let two_pi = std::f64::consts::TAU;
    let r = a.rem_euclid(two_pi);
    if r > std::f64::consts::PI {
        r - two_pi
    } else {
        r
    }
}

/// Rigid transform in SE(3): `p_out = rotation * p_in + translation`.
#[derive(Debug, Clone, PartialEq)]
pub struct Se3 {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

fn rotation_deviation(r: &Matrix3<f64>) -> f64 {
    let ortho = (r.transpose() * r - Matrix3::identity()).abs().max();
    let det = (r.determinant() - 1.0).abs();
    ortho.max(det)
}

/// Project a near-rotation back onto SO(3) by Gram-Schmidt on the columns.
fn orthonormalize(r: &Matrix3<f64>) -> Matrix3<f64> {
    let c0 = r.column(0).normalize();
    let mut c1 = r.column(1) - c0 * r.column(1).dot(&c0);
    c1.normalize_mut();
    let c2 = c0.cross(&c1);
    Matrix3::from_columns(&[c0, c1, c2])
}

impl Se3 {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Construct from a rotation and translation, validating the rotation.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self, GeomError> {
        let dev = rotation_deviation(&rotation);
        if dev > ROTATION_TOL {
            // Accept small numerical drift, reject anything that is not a
            // rotation at all.
            if dev > 1e-6 {
                return Err(GeomError::InvalidRotation(dev));
            }
            return Ok(Self {
                rotation: orthonormalize(&rotation),
                translation,
            });
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: t,
        }
    }

    /// Rotation about the camera vertical (y) axis.
    pub fn rot_y(angle: f64) -> Self {
        Self {
            rotation: yaw_matrix(angle),
            translation: Vector3::zeros(),
        }
    }

    /// Rotation about the z (forward) axis.
    pub fn rot_z(angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        Self {
            rotation: Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0),
            translation: Vector3::zeros(),
        }
    }

    /// Rotation about the x (right) axis.
    pub fn rot_x(angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        Self {
            rotation: Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c),
            translation: Vector3::zeros(),
        }
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn apply(&self, p: &Point3d) -> Point3d {
        self.rotation * p + self.translation
    }

    /// Rotate a direction vector (no translation).
    pub fn rotate(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * v
    }

    /// `self` after `other`: `p_out = self * (other * p_in)`.
    pub fn compose(&self, other: &Se3) -> Se3 {
        let mut rotation = self.rotation * other.rotation;
        if rotation_deviation(&rotation) > ROTATION_TOL {
            rotation = orthonormalize(&rotation);
        }
        Se3 {
            rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Se3 {
        let rt = self.rotation.transpose();
        Se3 {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }
}

/// Yaw rotation about the camera vertical axis, KITTI sense.
pub fn yaw_matrix(yaw: f64) -> Matrix3<f64> {
    let (s, c) = yaw.sin_cos();
    Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

/// Relative transform taking frame-i camera points to frame-k camera points.
///
/// `poses[f]` maps frame-f camera coordinates to world coordinates, so the
/// result is `poses[k]^-1 * poses[i]`.
pub fn frame_transform(poses: &[Se3], i: usize, k: usize) -> Result<Se3, GeomError> {
    let pi = poses.get(i).ok_or(GeomError::MissingFrame(i))?;
    let pk = poses.get(k).ok_or(GeomError::MissingFrame(k))?;
    Ok(pk.inverse().compose(pi))
}

/// Pinhole camera intrinsics.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraIntrinsics {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: u32,
        height: u32,
    ) -> Result<Self, GeomError> {
        if fx <= 0.0 || fy <= 0.0 {
            return Err(GeomError::InvalidIntrinsics(format!(
                "focal lengths must be positive (fx={fx}, fy={fy})"
            )));
        }
        if width == 0 || height == 0 {
            return Err(GeomError::InvalidIntrinsics(format!(
                "image size must be positive ({width}x{height})"
            )));
        }
        if cx < 0.0 || cx >= width as f64 || cy < 0.0 || cy >= height as f64 {
            return Err(GeomError::InvalidIntrinsics(format!(
                "principal point ({cx}, {cy}) outside {width}x{height} image"
            )));
        }
        Ok(Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        })
    }

    /// Unit-z ray direction through a pixel.
    pub fn ray(&self, px: &Pixel2d) -> Vector3<f64> {
        Vector3::new((px.x - self.cx) / self.fx, (px.y - self.cy) / self.fy, 1.0)
    }
}

/// Perspective projection. The result may land outside the image bounds.
pub fn project(intr: &CameraIntrinsics, p: &Point3d) -> Result<Pixel2d, GeomError> {
    if p.z <= 0.0 {
        return Err(GeomError::BehindCamera(p.z));
    }
    Ok(Pixel2d::new(
        intr.fx * p.x / p.z + intr.cx,
        intr.fy * p.y / p.z + intr.cy,
    ))
}

/// Back-project a pixel at a known depth (z-coordinate, meters).
pub fn backproject(intr: &CameraIntrinsics, px: &Pixel2d, depth: f64) -> Result<Point3d, GeomError> {
    if depth <= 0.0 {
        return Err(GeomError::InvalidDepth(depth));
    }
    Ok(intr.ray(px) * depth)
}

/// Box dimensions in meters. Height spans y, width x, length z at yaw 0.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BoxSize {
    pub height: f64,
    pub width: f64,
    pub length: f64,
}

impl BoxSize {
    pub fn new(height: f64, width: f64, length: f64) -> Result<Self, GeomError> {
        if height <= 0.0 || width <= 0.0 || length <= 0.0 {
            return Err(GeomError::InvalidPose(format!(
                "size components must be positive ({height}, {width}, {length})"
            )));
        }
        Ok(Self {
            height,
            width,
            length,
        })
    }

    /// Per-axis scale factors in (x, y, z) order.
    pub fn axis_scale(&self) -> Vector3<f64> {
        Vector3::new(self.width, self.height, self.length)
    }
}

/// Per-frame optimizable object state. `t_c` is the 3D box center in the
/// camera frame.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectPose {
    pub t_c: Vector3<f64>,
    pub yaw: f64,
    pub size: BoxSize,
    pub embedding: Vec<f64>,
}

impl ObjectPose {
    pub fn new(t_c: Vector3<f64>, yaw: f64, size: BoxSize, embedding: Vec<f64>) -> Self {
        Self {
            t_c,
            yaw: wrap_angle(yaw),
            size,
            embedding,
        }
    }

    /// Object-to-camera transform.
    pub fn to_camera(&self) -> Se3 {
        Se3 {
            rotation: yaw_matrix(self.yaw),
            translation: self.t_c,
        }
    }
}

/// Yaw component of a rotation: its action about the camera vertical axis.
///
/// Roll/pitch of an ego rotation affect only the translation of a warped
/// pose, never the single yaw degree of freedom.
pub fn yaw_of_rotation(r: &Matrix3<f64>) -> f64 {
    // For R = yaw_matrix(a): r02 = sin a, r00 = cos a.
    wrap_angle(r[(0, 2)].atan2(r[(0, 0)]))
}

/// Motion-aware pose warp from frame i to frame k.
///
/// `g_ik` is the ego motion (frame-i camera to frame-k camera) and `v` the
/// object displacement expressed in frame-k camera coordinates (zero for
/// static objects). Size and embedding are carried over unchanged; the
/// Jacobian of the output translation with respect to `pose.t_c` is the
/// rotation block of `g_ik`.
pub fn warp_pose(pose: &ObjectPose, g_ik: &Se3, v: &Vector3<f64>) -> ObjectPose {
    ObjectPose {
        t_c: g_ik.apply(&pose.t_c) + v,
        yaw: wrap_angle(pose.yaw + yaw_of_rotation(g_ik.rotation())),
        size: pose.size,
        embedding: pose.embedding.clone(),
    }
}

/// Object orientation relative to the camera viewing ray.
pub fn allocentric_angle(pose: &ObjectPose) -> Result<f64, GeomError> {
    let (x, z) = (pose.t_c.x, pose.t_c.z);
    if x.hypot(z) <= f64::EPSILON {
        return Err(GeomError::DegenerateGeometry);
    }
    Ok(wrap_angle(pose.yaw - x.atan2(z)))
}
