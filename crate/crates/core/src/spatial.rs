//! SE(3) poses and 6-D spatial vector algebra.
//!
//! All spatial vectors in this crate are ordered `[angular; linear]`:
//! a [`Twist`] is `[ω; v]` and a [`Wrench`] is `[m; f]`, so the x-force of a
//! wrench sits at index 3. Twist and wrench transforms are the usual Plücker
//! pair, with the wrench matrix equal to the inverse transpose of the twist
//! matrix.

use nalgebra::{Matrix3, Matrix4, Matrix6, Rotation3, UnitQuaternion, Vector3, Vector6};
use thiserror::Error;

pub type Vec3 = Vector3<f64>;
pub type Vec6 = Vector6<f64>;
pub type Mat3 = Matrix3<f64>;
pub type Mat6 = Matrix6<f64>;

/// Rotation angles closer than this to π make the log map ill-conditioned.
pub const LOG_SINGULARITY_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpatialError {
    #[error("rotation angle {angle} rad is within {LOG_SINGULARITY_TOL} of pi; rotation log is ill-defined")]
    NearSingularLog { angle: f64 },
    #[error("cannot compose transforms: inner target {inner:?} does not match outer source {outer:?}")]
    FrameMismatch { inner: FrameId, outer: FrameId },
}

/// Skew-symmetric cross-product matrix, `skew(a) * b == a × b`.
#[inline]
pub fn skew(v: &Vec3) -> Mat3 {
    Mat3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Rigid transform. `rotation` maps child-frame coordinates into the parent,
/// `translation` is the child origin expressed in the parent.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: Rotation3<f64>,
    pub translation: Vec3,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: Rotation3::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn new(rotation: Rotation3<f64>, translation: Vec3) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn from_translation(translation: Vec3) -> Self {
        Self::new(Rotation3::identity(), translation)
    }

    pub fn from_rotation(rotation: Rotation3<f64>) -> Self {
        Self::new(rotation, Vec3::zeros())
    }

    /// Fixed-axis roll/pitch/yaw (URDF convention) plus translation.
    pub fn from_xyz_rpy(xyz: [f64; 3], rpy: [f64; 3]) -> Self {
        Self::new(
            Rotation3::from_euler_angles(rpy[0], rpy[1], rpy[2]),
            Vec3::new(xyz[0], xyz[1], xyz[2]),
        )
    }

    /// Rotation of `angle` about the unit `axis`, no translation.
    pub fn from_axis_angle(axis: &Vec3, angle: f64) -> Self {
        Self::from_rotation(Rotation3::from_scaled_axis(axis * angle))
    }

    /// `self ∘ other`: `other` is expressed in the frame described by `self`.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.inverse();
        Pose {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    pub fn transform_point(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    pub fn rotation_matrix(&self) -> Mat3 {
        *self.rotation.matrix()
    }

    pub fn to_homogeneous(&self) -> Matrix4<f64> {
        let mut h = Matrix4::identity();
        h.fixed_view_mut::<3, 3>(0, 0).copy_from(self.rotation.matrix());
        h.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        h
    }

    pub fn from_homogeneous(h: &Matrix4<f64>) -> Pose {
        let r: Mat3 = h.fixed_view::<3, 3>(0, 0).into_owned();
        Pose {
            rotation: Rotation3::from_matrix_unchecked(r),
            translation: h.fixed_view::<3, 1>(0, 3).into_owned(),
        }
    }

    /// Unit quaternion `(w, x, y, z)` used in logs.
    pub fn quaternion_wxyz(&self) -> [f64; 4] {
        let q = UnitQuaternion::from_rotation_matrix(&self.rotation);
        [q.w, q.i, q.j, q.k]
    }

    pub fn from_quaternion_wxyz(q: [f64; 4], translation: Vec3) -> Pose {
        let uq = UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(q[0], q[1], q[2], q[3]));
        Pose::new(uq.to_rotation_matrix(), translation)
    }

    /// Checks orthonormality and handedness of the rotation within `tol`.
    pub fn is_valid(&self, tol: f64) -> bool {
        let r = self.rotation.matrix();
        let ortho = (r.transpose() * r - Mat3::identity()).abs().max() <= tol;
        ortho
            && (r.determinant() - 1.0).abs() <= tol
            && self.translation.iter().all(|x| x.is_finite())
    }
}

/// Free-function form of [`Pose::compose`].
pub fn compose(a: &Pose, b: &Pose) -> Pose {
    a.compose(b)
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Twist {
    pub angular: Vec3,
    pub linear: Vec3,
}

impl Twist {
    pub fn new(angular: Vec3, linear: Vec3) -> Self {
        Self { angular, linear }
    }

    pub fn zero() -> Self {
        Self::default()
    }

    pub fn from_vector(v: &Vec6) -> Self {
        Self {
            angular: v.fixed_rows::<3>(0).into_owned(),
            linear: v.fixed_rows::<3>(3).into_owned(),
        }
    }

    pub fn to_vector(&self) -> Vec6 {
        Vec6::new(
            self.angular.x,
            self.angular.y,
            self.angular.z,
            self.linear.x,
            self.linear.y,
            self.linear.z,
        )
    }

    /// Instantaneous power delivered by `w` along this twist.
    pub fn power(&self, w: &Wrench) -> f64 {
        self.angular.dot(&w.moment) + self.linear.dot(&w.force)
    }

    pub fn is_finite(&self) -> bool {
        self.angular.iter().chain(self.linear.iter()).all(|x| x.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Wrench {
    pub moment: Vec3,
    pub force: Vec3,
}

impl Wrench {
    pub fn new(moment: Vec3, force: Vec3) -> Self {
        Self { moment, force }
    }

    pub fn zero() -> Self {
        Self::default()
    }

    pub fn from_force(force: Vec3) -> Self {
        Self::new(Vec3::zeros(), force)
    }

    pub fn from_vector(v: &Vec6) -> Self {
        Self {
            moment: v.fixed_rows::<3>(0).into_owned(),
            force: v.fixed_rows::<3>(3).into_owned(),
        }
    }

    pub fn to_vector(&self) -> Vec6 {
        Vec6::new(
            self.moment.x,
            self.moment.y,
            self.moment.z,
            self.force.x,
            self.force.y,
            self.force.z,
        )
    }

    pub fn is_finite(&self) -> bool {
        self.moment.iter().chain(self.force.iter()).all(|x| x.is_finite())
    }
}

impl std::ops::Add for Wrench {
    type Output = Wrench;
    fn add(self, rhs: Wrench) -> Wrench {
        Wrench::new(self.moment + rhs.moment, self.force + rhs.force)
    }
}

impl std::ops::Neg for Wrench {
    type Output = Wrench;
    fn neg(self) -> Wrench {
        Wrench::new(-self.moment, -self.force)
    }
}

impl std::ops::Mul<f64> for Wrench {
    type Output = Wrench;
    fn mul(self, s: f64) -> Wrench {
        Wrench::new(self.moment * s, self.force * s)
    }
}

/// Frame labels carried by [`SpatialTransform`] so that compositions can be
/// checked.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct FrameId(pub u32);

impl FrameId {
    pub const BASE: FrameId = FrameId(0);
    pub const CONTACT_1: FrameId = FrameId(1);
    pub const CONTACT_2: FrameId = FrameId(2);
    pub const OBJECT: FrameId = FrameId(3);
}

/// Plücker transform re-expressing twists and wrenches from `source` to
/// `target` coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpatialTransform {
    pub source: FrameId,
    pub target: FrameId,
    pub twist: Mat6,
    pub wrench: Mat6,
}

impl SpatialTransform {
    pub fn identity(frame: FrameId) -> Self {
        Self {
            source: frame,
            target: frame,
            twist: Mat6::identity(),
            wrench: Mat6::identity(),
        }
    }

    /// `pose` is the pose of `source` expressed in `target`.
    pub fn from_pose(source: FrameId, target: FrameId, pose: &Pose) -> Self {
        let r = pose.rotation_matrix();
        let tr = skew(&pose.translation) * r;
        let mut twist = Mat6::zeros();
        twist.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
        twist.fixed_view_mut::<3, 3>(3, 0).copy_from(&tr);
        twist.fixed_view_mut::<3, 3>(3, 3).copy_from(&r);
        let mut wrench = Mat6::zeros();
        wrench.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
        wrench.fixed_view_mut::<3, 3>(0, 3).copy_from(&tr);
        wrench.fixed_view_mut::<3, 3>(3, 3).copy_from(&r);
        Self {
            source,
            target,
            twist,
            wrench,
        }
    }

    pub fn inverse(&self) -> Self {
        // The inverse of [[R,0],[pR,R]] is [[Rᵀ,0],[-Rᵀp,Rᵀ]]; derive it from
        // the blocks instead of a general 6x6 inverse.
        let r: Mat3 = self.twist.fixed_view::<3, 3>(0, 0).into_owned();
        let pr: Mat3 = self.twist.fixed_view::<3, 3>(3, 0).into_owned();
        let rt = r.transpose();
        let lower = -rt * pr * rt;
        let mut twist = Mat6::zeros();
        twist.fixed_view_mut::<3, 3>(0, 0).copy_from(&rt);
        twist.fixed_view_mut::<3, 3>(3, 0).copy_from(&lower);
        twist.fixed_view_mut::<3, 3>(3, 3).copy_from(&rt);
        let mut wrench = Mat6::zeros();
        wrench.fixed_view_mut::<3, 3>(0, 0).copy_from(&rt);
        wrench.fixed_view_mut::<3, 3>(0, 3).copy_from(&lower);
        wrench.fixed_view_mut::<3, 3>(3, 3).copy_from(&rt);
        Self {
            source: self.target,
            target: self.source,
            twist,
            wrench,
        }
    }

    /// `self ∘ inner`: first apply `inner`, then `self`.
    pub fn compose(&self, inner: &SpatialTransform) -> Result<SpatialTransform, SpatialError> {
        if inner.target != self.source {
            return Err(SpatialError::FrameMismatch {
                inner: inner.target,
                outer: self.source,
            });
        }
        Ok(Self {
            source: inner.source,
            target: self.target,
            twist: self.twist * inner.twist,
            wrench: self.wrench * inner.wrench,
        })
    }

    pub fn apply_twist(&self, v: &Twist) -> Twist {
        Twist::from_vector(&(self.twist * v.to_vector()))
    }

    pub fn apply_wrench(&self, w: &Wrench) -> Wrench {
        Wrench::from_vector(&(self.wrench * w.to_vector()))
    }
}

pub fn wrench_transform(x: &SpatialTransform, w: &Wrench) -> Wrench {
    x.apply_wrench(w)
}

pub fn twist_transform(x: &SpatialTransform, v: &Twist) -> Twist {
    x.apply_twist(v)
}

/// Scaled rotation axis through the quaternion, accurate for tiny angles
/// where the trace-based `acos` loses half the digits or returns NaN.
pub fn rotation_vector(r: &Rotation3<f64>) -> Vec3 {
    nalgebra::UnitQuaternion::from_rotation_matrix(r).scaled_axis()
}

/// Rotation angle in [0, π], accurate for tiny angles.
pub fn rotation_angle(r: &Rotation3<f64>) -> f64 {
    nalgebra::UnitQuaternion::from_rotation_matrix(r).angle()
}

/// Rotation log as a scaled axis, refusing angles near π.
pub fn rotation_log(r: &Rotation3<f64>) -> Result<Vec3, SpatialError> {
    let angle = rotation_angle(r);
    if (std::f64::consts::PI - angle).abs() <= LOG_SINGULARITY_TOL {
        return Err(SpatialError::NearSingularLog { angle });
    }
    Ok(rotation_vector(r))
}

/// Six-vector error between `x` and the desired `x_d`:
/// `[log(R_d⁻¹ R) rotated into the base frame; t − t_d]`.
pub fn pose_error(x: &Pose, x_d: &Pose) -> Result<Vec6, SpatialError> {
    let rel = x_d.rotation.inverse() * x.rotation;
    let w = x_d.rotation * rotation_log(&rel)?;
    let dt = x.translation - x_d.translation;
    Ok(Vec6::new(w.x, w.y, w.z, dt.x, dt.y, dt.z))
}

/// Inverse of [`pose_error`]: the pose whose error against `x_d` is `e`.
pub fn pose_from_error(x_d: &Pose, e: &Vec6) -> Pose {
    let w = Vec3::new(e[0], e[1], e[2]);
    let body = x_d.rotation.inverse() * w;
    Pose::new(
        x_d.rotation * Rotation3::from_scaled_axis(body),
        x_d.translation + Vec3::new(e[3], e[4], e[5]),
    )
}
