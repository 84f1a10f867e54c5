//! Grasp and internal-force maps for two rigid contacts on one object.
//!
//! Contact wrench `Wᵢ` is the wrench end-effector `i` applies to the object,
//! expressed in its own contact frame `Σᵢ`; contact twists are likewise
//! expressed in `Σᵢ`. The object wrench `Wa` and twist `ẋa` live in the object
//! frame `Σa`; the internal wrench `Wr` and relative twist `ẋr` live in `Σ1`.
//!
//! ```text
//! [Wa; Wr] = Q [W1; W2]        Q = [G; Ē]
//! [ẋa; ẋr] = Q⁻ᵀ [ẋ1; ẋ2]      G = [ᵃX*₁  ᵃX*₂],  Ē = [−½I  ½·¹X*₂]
//! ```

use nalgebra::{Rotation3, SMatrix, SVector};
use thiserror::Error;

use crate::spatial::{rotation_vector, FrameId, Mat6, Pose, SpatialTransform, Twist, Vec3, Wrench};

pub type Mat12 = SMatrix<f64, 12, 12>;
pub type Mat6x12 = SMatrix<f64, 6, 12>;
pub type Vec12 = SVector<f64, 12>;

/// Largest accepted condition number of `Q`.
pub const MAX_CONDITION: f64 = 1e12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraspError {
    #[error("degenerate grasp: condition number of Q is {condition:.3e}")]
    Degenerate { condition: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct GraspMaps {
    pub g: Mat6x12,
    pub e_bar: Mat6x12,
    pub q: Mat12,
    pub q_inv: Mat12,
    /// Frobenius-norm condition number `‖Q‖·‖Q⁻¹‖`.
    pub condition: f64,
    /// Contact and object poses the maps were built from (base frame).
    pub contacts: [Pose; 2],
    pub object: Pose,
}

fn stack(a: &Mat6, b: &Mat6) -> Mat6x12 {
    let mut m = Mat6x12::zeros();
    m.fixed_view_mut::<6, 6>(0, 0).copy_from(a);
    m.fixed_view_mut::<6, 6>(0, 6).copy_from(b);
    m
}

fn pair(a: &SVector<f64, 6>, b: &SVector<f64, 6>) -> Vec12 {
    let mut v = Vec12::zeros();
    v.fixed_rows_mut::<6>(0).copy_from(a);
    v.fixed_rows_mut::<6>(6).copy_from(b);
    v
}

fn halves(v: &Vec12) -> (SVector<f64, 6>, SVector<f64, 6>) {
    (v.fixed_rows::<6>(0).into_owned(), v.fixed_rows::<6>(6).into_owned())
}

/// Re-express a base-frame twist (taken at the contact origin) in the
/// contact frame.
pub fn twist_to_local(contact: &Pose, v: &Twist) -> Twist {
    let rt = contact.rotation.inverse();
    Twist::new(rt * v.angular, rt * v.linear)
}

pub fn twist_to_base(contact: &Pose, v: &Twist) -> Twist {
    Twist::new(contact.rotation * v.angular, contact.rotation * v.linear)
}

pub fn wrench_to_local(contact: &Pose, w: &Wrench) -> Wrench {
    let rt = contact.rotation.inverse();
    Wrench::new(rt * w.moment, rt * w.force)
}

pub fn wrench_to_base(contact: &Pose, w: &Wrench) -> Wrench {
    Wrench::new(contact.rotation * w.moment, contact.rotation * w.force)
}

impl GraspMaps {
    /// Build the maps from contact poses and the object pose, all in the
    /// base frame.
    pub fn build(contacts: [Pose; 2], object: Pose) -> Result<Self, GraspError> {
        let a_inv = object.inverse();
        let a_x_1 = SpatialTransform::from_pose(FrameId::CONTACT_1, FrameId::OBJECT, &a_inv.compose(&contacts[0]));
        let a_x_2 = SpatialTransform::from_pose(FrameId::CONTACT_2, FrameId::OBJECT, &a_inv.compose(&contacts[1]));
        let one_x_2 = SpatialTransform::from_pose(
            FrameId::CONTACT_2,
            FrameId::CONTACT_1,
            &contacts[0].inverse().compose(&contacts[1]),
        );
        let g = stack(&a_x_1.wrench, &a_x_2.wrench);
        let e_bar = stack(&(Mat6::identity() * -0.5), &(one_x_2.wrench * 0.5));
        let mut q = Mat12::zeros();
        q.fixed_view_mut::<6, 12>(0, 0).copy_from(&g);
        q.fixed_view_mut::<6, 12>(6, 0).copy_from(&e_bar);
        if !q.iter().all(|v| v.is_finite()) {
            return Err(GraspError::Degenerate { condition: f64::INFINITY });
        }
        let q_inv = q.try_inverse().ok_or(GraspError::Degenerate { condition: f64::INFINITY })?;
        let condition = q.norm() * q_inv.norm();
        if !(condition.is_finite() && condition <= MAX_CONDITION) {
            return Err(GraspError::Degenerate { condition });
        }
        Ok(Self { g, e_bar, q, q_inv, condition, contacts, object })
    }

    /// `[Wa; Wr] = Q [W1; W2]` with local contact wrenches.
    pub fn decompose(&self, w1: &Wrench, w2: &Wrench) -> (Wrench, Wrench) {
        let (a, r) = halves(&(self.q * pair(&w1.to_vector(), &w2.to_vector())));
        (Wrench::from_vector(&a), Wrench::from_vector(&r))
    }

    /// `[W1; W2] = Q⁻¹ [Wa; Wr]`.
    pub fn recompose(&self, wa: &Wrench, wr: &Wrench) -> (Wrench, Wrench) {
        let (a, b) = halves(&(self.q_inv * pair(&wa.to_vector(), &wr.to_vector())));
        (Wrench::from_vector(&a), Wrench::from_vector(&b))
    }

    /// `[ẋa; ẋr] = Q⁻ᵀ [ẋ1; ẋ2]` with local contact twists.
    pub fn task_velocities(&self, v1: &Twist, v2: &Twist) -> (Twist, Twist) {
        let (a, r) = halves(&(self.q_inv.transpose() * pair(&v1.to_vector(), &v2.to_vector())));
        (Twist::from_vector(&a), Twist::from_vector(&r))
    }

    /// `ẋcmd = Qᵀ [ẋa,c; ẋr,c]`, stacked local contact twists.
    pub fn command_contact_velocities(&self, va: &Twist, vr: &Twist) -> Vec12 {
        self.q.transpose() * pair(&va.to_vector(), &vr.to_vector())
    }

    /// Local contact twists of `command_contact_velocities` re-expressed in
    /// the base frame (the convention of the contact Jacobian).
    pub fn command_base_velocities(&self, va: &Twist, vr: &Twist) -> Vec12 {
        let (a, b) = halves(&self.command_contact_velocities(va, vr));
        let v1 = twist_to_base(&self.contacts[0], &Twist::from_vector(&a));
        let v2 = twist_to_base(&self.contacts[1], &Twist::from_vector(&b));
        pair(&v1.to_vector(), &v2.to_vector())
    }

    /// Task velocities from base-frame contact twists.
    pub fn task_velocities_from_base(&self, v1: &Twist, v2: &Twist) -> (Twist, Twist) {
        self.task_velocities(
            &twist_to_local(&self.contacts[0], v1),
            &twist_to_local(&self.contacts[1], v2),
        )
    }

    /// Decompose base-frame contact wrenches.
    pub fn decompose_base(&self, w1: &Wrench, w2: &Wrench) -> (Wrench, Wrench) {
        self.decompose(
            &wrench_to_local(&self.contacts[0], w1),
            &wrench_to_local(&self.contacts[1], w2),
        )
    }

    /// Pose of `Σ2` expressed in `Σ1`.
    pub fn relative_pose(&self) -> Pose {
        self.contacts[0].inverse().compose(&self.contacts[1])
    }
}

/// Object-level task state derived from contact kinematics.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectState {
    pub pose: Pose,
    pub twist: Twist,
    /// Pose of `Σ2` in `Σ1`.
    pub relative_pose: Pose,
    pub relative_twist: Twist,
}

impl ObjectState {
    /// State from the maps and base-frame contact twists.
    pub fn from_contacts(maps: &GraspMaps, v1: &Twist, v2: &Twist) -> Self {
        let (twist, relative_twist) = maps.task_velocities_from_base(v1, v2);
        Self {
            pose: maps.object,
            twist,
            relative_pose: maps.relative_pose(),
            relative_twist,
        }
    }
}

/// Object frame at the midpoint of the contact origins, axes aligned with
/// the base.
pub fn midpoint_frame(contacts: &[Pose; 2]) -> Pose {
    Pose::from_translation((contacts[0].translation + contacts[1].translation) * 0.5)
}

/// Object frame carried rigidly by the hands.
///
/// Created at the midpoint frame of the initial grasp; afterwards each hand
/// predicts the object frame through its fixed offset and the two
/// predictions are averaged (translation mean, rotation geodesic midpoint).
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectFrameTracker {
    offsets: [Pose; 2],
}

impl ObjectFrameTracker {
    pub fn new(contacts: &[Pose; 2]) -> Self {
        let object = midpoint_frame(contacts);
        Self { offsets: [0, 1].map(|i| contacts[i].inverse().compose(&object)) }
    }

    pub fn object_pose(&self, contacts: &[Pose; 2]) -> Pose {
        let [a, b] = [0, 1].map(|i| contacts[i].compose(&self.offsets[i]));
        let half = Rotation3::from_scaled_axis(rotation_vector(&(a.rotation.inverse() * b.rotation)) * 0.5);
        Pose::new(a.rotation * half, (a.translation + b.translation) * 0.5)
    }
}

/// Contact frames of the symmetric reference grasp: contacts at `±half_width`
/// on the object y-axis, x-axes pointing outward toward each hand.
pub fn symmetric_contacts(center: Vec3, half_width: f64) -> [Pose; 2] {
    use std::f64::consts::FRAC_PI_2;
    [
        Pose::from_xyz_rpy([center.x, center.y + half_width, center.z], [0.0, 0.0, FRAC_PI_2]),
        Pose::from_xyz_rpy([center.x, center.y - half_width, center.z], [0.0, 0.0, -FRAC_PI_2]),
    ]
}
