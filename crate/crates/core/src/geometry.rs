//! Rigid-body transforms, the se(3) exponential map and the pinhole camera.
//!
//! Quaternions are Hamilton, stored as nalgebra `UnitQuaternion` and
//! serialized as `(w, x, y, z)` unless a file format says otherwise. Camera
//! frames are +z forward, +x right, +y down.

use std::ops::Mul;

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3, Vector6};

use crate::error::{Error, Result};

/// Rotation angles closer than this to pi make the logarithm ambiguous.
const PI_TOLERANCE: f64 = 1e-9;

/// A rigid transform. When used as a camera pose it maps camera
/// coordinates to world coordinates (world <- camera).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vector3<f64>,
}

/// Tangent vector of SE(3): rotation part first (radians), then translation
/// (meters).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Twist(pub Vector6<f64>);

impl Twist {
    pub fn new(rot: Vector3<f64>, trans: Vector3<f64>) -> Self {
        Twist(Vector6::new(rot.x, rot.y, rot.z, trans.x, trans.y, trans.z))
    }

    pub fn zero() -> Self {
        Twist(Vector6::zeros())
    }

    pub fn rot(&self) -> Vector3<f64> {
        self.0.fixed_rows::<3>(0).into_owned()
    }

    pub fn trans(&self) -> Vector3<f64> {
        self.0.fixed_rows::<3>(3).into_owned()
    }

    pub fn norm(&self) -> f64 {
        self.0.norm()
    }
}

/// Skew-symmetric cross-product matrix.
pub fn hat(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Coefficients (a, b) of `I + a W + b W^2`, the left Jacobian of SO(3).
fn left_jacobian_coeffs(theta: f64) -> (f64, f64) {
    if theta < 1e-5 {
        let t2 = theta * theta;
        (0.5 - t2 / 24.0, 1.0 / 6.0 - t2 / 120.0)
    } else {
        let t2 = theta * theta;
        (
            (1.0 - theta.cos()) / t2,
            (theta - theta.sin()) / (t2 * theta),
        )
    }
}

fn so3_exp(omega: &Vector3<f64>) -> UnitQuaternion<f64> {
    let theta = omega.norm();
    let half = 0.5 * theta;
    // sin(theta/2)/theta, expanded near zero
    let k = if theta < 1e-8 {
        0.5 - theta * theta / 48.0
    } else {
        half.sin() / theta
    };
    UnitQuaternion::new_normalize(Quaternion::new(
        half.cos(),
        k * omega.x,
        k * omega.y,
        k * omega.z,
    ))
}

/// Axis-angle of a unit quaternion on the positive-w branch.
fn so3_log(q: &UnitQuaternion<f64>) -> Vector3<f64> {
    let mut w = q.w;
    let mut v = q.imag();
    if w < 0.0 {
        w = -w;
        v = -v;
    }
    let s = v.norm();
    if s < 1e-12 {
        // 2 v / w with the cubic correction of atan
        return v * (2.0 / w) * (1.0 - s * s / (3.0 * w * w));
    }
    let angle = 2.0 * s.atan2(w);
    v * (angle / s)
}

impl Pose {
    pub fn identity() -> Self {
        Pose {
            rotation: UnitQuaternion::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Pose {
            rotation,
            translation,
        }
    }

    /// Builds a pose from raw `(w, x, y, z)` quaternion components, normalizing them.
    pub fn from_wxyz(w: f64, x: f64, y: f64, z: f64, translation: Vector3<f64>) -> Self {
        Pose {
            rotation: UnitQuaternion::new_normalize(Quaternion::new(w, x, y, z)),
            translation,
        }
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Pose {
            rotation: UnitQuaternion::identity(),
            translation: t,
        }
    }

    pub fn from_rotation_matrix(r: &Matrix3<f64>, translation: Vector3<f64>) -> Self {
        let rot = nalgebra::Rotation3::from_matrix_unchecked(*r);
        Pose {
            rotation: UnitQuaternion::from_rotation_matrix(&rot),
            translation,
        }
    }

    /// Rotation about +z by `angle` radians.
    pub fn rot_z(angle: f64) -> Self {
        Pose::exp(&Twist::new(Vector3::new(0.0, 0.0, angle), Vector3::zeros()))
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Pose) -> Pose {
        let q = self.rotation.quaternion() * other.rotation.quaternion();
        Pose {
            rotation: UnitQuaternion::new_normalize(q),
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let r_inv = self.rotation.inverse();
        Pose {
            rotation: r_inv,
            translation: -(r_inv * self.translation),
        }
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.rotation.to_rotation_matrix().into_inner()
    }

    pub fn exp(xi: &Twist) -> Pose {
        let omega = xi.rot();
        let (a, b) = left_jacobian_coeffs(omega.norm());
        let w = hat(&omega);
        let v = Matrix3::identity() + w * a + w * w * b;
        Pose {
            rotation: so3_exp(&omega),
            translation: v * xi.trans(),
        }
    }

    /// Logarithm on the positive-w branch. Always succeeds; at an angle of
    /// exactly pi it returns one of the two valid answers.
    pub fn log(&self) -> Twist {
        let omega = so3_log(&self.rotation);
        let theta = omega.norm();
        let w = hat(&omega);
        let c = if theta < 1e-5 {
            1.0 / 12.0 + theta * theta / 720.0
        } else {
            (1.0 - theta * theta.sin() / (2.0 * (1.0 - theta.cos()))) / (theta * theta)
        };
        let v_inv = Matrix3::identity() - w * 0.5 + w * w * c;
        Twist::new(omega, v_inv * self.translation)
    }

    /// Like [`Pose::log`] but reports the ambiguous angle-pi case.
    pub fn checked_log(&self) -> Result<Twist> {
        if (self.angle() - std::f64::consts::PI).abs() < PI_TOLERANCE {
            return Err(Error::DegenerateLog);
        }
        Ok(self.log())
    }

    /// Rotation angle in [0, pi].
    pub fn angle(&self) -> f64 {
        so3_log(&self.rotation).norm()
    }

    /// Rotation angle (radians) and translation distance between two poses.
    pub fn distance(&self, other: &Pose) -> (f64, f64) {
        let d = self.inverse().compose(other);
        (d.angle(), (self.translation - other.translation).norm())
    }
}

impl Mul for Pose {
    type Output = Pose;

    fn mul(self, rhs: Pose) -> Pose {
        self.compose(&rhs)
    }
}

impl Mul<&Pose> for &Pose {
    type Output = Pose;

    fn mul(self, rhs: &Pose) -> Pose {
        self.compose(rhs)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let ok = fx > 0.0
            && fy > 0.0
            && cx >= 0.0
            && cy >= 0.0
            && cx < width as f64
            && cy < height as f64;
        if !ok {
            return Err(Error::Config(format!(
                "invalid intrinsics fx={fx} fy={fy} cx={cx} cy={cy} {width}x{height}"
            )));
        }
        Ok(CameraIntrinsics {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        })
    }

    /// Scales the intrinsics for an image downsampled by an integer factor.
    pub fn downsampled(&self, factor: usize) -> Self {
        let f = factor as f64;
        CameraIntrinsics {
            fx: self.fx / f,
            fy: self.fy / f,
            cx: self.cx / f,
            cy: self.cy / f,
            width: self.width / factor,
            height: self.height / factor,
        }
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn contains(&self, u: f64, v: f64) -> bool {
        u >= 0.0 && v >= 0.0 && u < self.width as f64 && v < self.height as f64
    }
}

/// Projects a camera-frame point to pixel coordinates and depth.
pub fn project(point: &Vector3<f64>, k: &CameraIntrinsics) -> Result<(f64, f64, f64)> {
    let z = point.z;
    if z <= 0.0 {
        return Err(Error::BehindCamera(z));
    }
    Ok((k.fx * point.x / z + k.cx, k.fy * point.y / z + k.cy, z))
}

/// Lifts a pixel with metric depth to a camera-frame point.
pub fn backproject(u: f64, v: f64, depth: f64, k: &CameraIntrinsics) -> Result<Vector3<f64>> {
    if !(depth > 0.0) || !depth.is_finite() || !k.contains(u, v) {
        return Err(Error::RejectedPixel { u, v, depth });
    }
    Ok(Vector3::new(
        (u - k.cx) * depth / k.fx,
        (v - k.cy) * depth / k.fy,
        depth,
    ))
}
