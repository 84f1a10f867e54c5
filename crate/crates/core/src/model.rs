//! Dual-arm kinematic and dynamic model.
//!
//! Two independent serial chains of revolute joints. Generalized coordinates
//! are stacked `[arm 1; arm 2]`. All Jacobians map joint rates to twists
//! expressed in the base frame at the referenced point, angular rows first.
//!
//! The model file is TOML; see `config/models/dual_arm_7dof.toml` for the
//! shipped anthropomorphic stand-in and the README for the grammar.

use std::path::Path;

use nalgebra::{DMatrix, DVector, Matrix6};
use serde::Deserialize;
use thiserror::Error;

use crate::spatial::{skew, Mat3, Pose, Twist, Vec3};

pub const GRAVITY: f64 = 9.81;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("reading model file: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: {message}")]
    Invalid { line: usize, message: String },
    #[error("dimension mismatch: expected {expected} joint values, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("arm {arm} has no link {link} (valid links are 0..={max})")]
    InvalidLink { arm: usize, link: usize, max: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct JointSpec {
    pub name: String,
    /// Unit rotation axis in the joint frame.
    pub axis: Vec3,
    /// Parent link frame to joint frame at zero angle.
    pub origin: Pose,
    pub mass: f64,
    /// Center of mass in the link frame.
    pub com: Vec3,
    /// Rotational inertia about the CoM, link frame.
    pub inertia: Mat3,
    pub q_min: f64,
    pub q_max: f64,
    pub qd_min: f64,
    pub qd_max: f64,
    pub tau_max: f64,
    pub viscous: f64,
    pub coulomb: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArmSpec {
    pub name: String,
    pub base: Pose,
    pub joints: Vec<JointSpec>,
    /// Contact frame relative to the terminal link.
    pub contact: Pose,
    /// Contact patch side lengths `(δy, δz)`.
    pub patch: (f64, f64),
    /// Documented contact pose at `q = 0`, checked by the loader when present.
    pub home_contact: Option<Pose>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DualArmModel {
    pub arms: [ArmSpec; 2],
    pub gravity: Vec3,
    /// Include viscous + Coulomb joint friction in the dynamics.
    pub joint_friction: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct JointState {
    pub q: DVector<f64>,
    pub qd: DVector<f64>,
}

impl JointState {
    pub fn zeros(dof: usize) -> Self {
        Self {
            q: DVector::zeros(dof),
            qd: DVector::zeros(dof),
        }
    }
}

/// Forward kinematics of one arm. `links[0]` is the fixed arm base and
/// `links[k]` the frame of the link moved by joint `k`.
#[derive(Debug, Clone)]
pub struct ArmKinematics {
    pub links: Vec<Pose>,
    pub contact: Pose,
}

#[derive(Debug, Clone)]
pub struct Kinematics {
    pub arms: [ArmKinematics; 2],
    /// Midpoint of the contact origins with base-aligned axes.
    pub object_proxy: Pose,
}

impl Kinematics {
    pub fn contact(&self, arm: usize) -> &Pose {
        &self.arms[arm].contact
    }
}

#[derive(Debug, Clone)]
pub struct BiasTerms {
    /// `C(q, q̇) q̇`
    pub coriolis: DVector<f64>,
    /// `G(q)`
    pub gravity: DVector<f64>,
    /// `Ṁ(q, q̇) q̇`
    pub mdot_qd: DVector<f64>,
    /// `C(q, q̇)ᵀ q̇ = Ṁq̇ − Cq̇`
    pub coriolis_transpose: DVector<f64>,
}

impl DualArmModel {
    pub fn dof(&self) -> usize {
        self.arms[0].joints.len() + self.arms[1].joints.len()
    }

    pub fn arm_dof(&self, arm: usize) -> usize {
        self.arms[arm].joints.len()
    }

    /// Index of the first generalized coordinate of `arm`.
    pub fn arm_offset(&self, arm: usize) -> usize {
        if arm == 0 {
            0
        } else {
            self.arms[0].joints.len()
        }
    }

    pub fn joints(&self) -> impl Iterator<Item = &JointSpec> {
        self.arms.iter().flat_map(|a| a.joints.iter())
    }

    pub fn q_min(&self) -> DVector<f64> {
        DVector::from_iterator(self.dof(), self.joints().map(|j| j.q_min))
    }

    pub fn q_max(&self) -> DVector<f64> {
        DVector::from_iterator(self.dof(), self.joints().map(|j| j.q_max))
    }

    pub fn qd_min(&self) -> DVector<f64> {
        DVector::from_iterator(self.dof(), self.joints().map(|j| j.qd_min))
    }

    pub fn qd_max(&self) -> DVector<f64> {
        DVector::from_iterator(self.dof(), self.joints().map(|j| j.qd_max))
    }

    pub fn tau_max(&self) -> DVector<f64> {
        DVector::from_iterator(self.dof(), self.joints().map(|j| j.tau_max))
    }

    pub fn check_dim(&self, v: &DVector<f64>) -> Result<(), ModelError> {
        if v.len() != self.dof() {
            return Err(ModelError::Dimension {
                expected: self.dof(),
                got: v.len(),
            });
        }
        Ok(())
    }

    fn arm_slice<'a>(&self, v: &'a DVector<f64>, arm: usize) -> &'a [f64] {
        let o = self.arm_offset(arm);
        &v.as_slice()[o..o + self.arm_dof(arm)]
    }

    fn arm_fk(&self, arm: usize, q: &[f64]) -> ArmKinematics {
        let spec = &self.arms[arm];
        let mut links = Vec::with_capacity(spec.joints.len() + 1);
        links.push(spec.base);
        for (j, angle) in spec.joints.iter().zip(q) {
            let parent = links.last().expect("base pushed above");
            let joint = parent
                .compose(&j.origin)
                .compose(&Pose::from_axis_angle(&j.axis, *angle));
            links.push(joint);
        }
        let contact = links.last().expect("base pushed above").compose(&spec.contact);
        ArmKinematics { links, contact }
    }

    pub fn forward_kinematics(&self, q: &DVector<f64>) -> Result<Kinematics, ModelError> {
        self.check_dim(q)?;
        let a0 = self.arm_fk(0, self.arm_slice(q, 0));
        let a1 = self.arm_fk(1, self.arm_slice(q, 1));
        let mid = 0.5 * (a0.contact.translation + a1.contact.translation);
        Ok(Kinematics {
            arms: [a0, a1],
            object_proxy: Pose::from_translation(mid),
        })
    }

    fn fk(&self, q: &DVector<f64>) -> Kinematics {
        self.forward_kinematics(q)
            .unwrap_or_else(|e| panic!("{e}"))
    }

    fn joint_axis_world(&self, kin: &Kinematics, arm: usize, k: usize) -> Vec3 {
        kin.arms[arm].links[k + 1].rotation * self.arms[arm].joints[k].axis
    }

    /// 6×2n Jacobian of a frame at world point `p` rigidly attached to `link`.
    fn jacobian_at(&self, kin: &Kinematics, arm: usize, link: usize, p: &Vec3) -> DMatrix<f64> {
        let mut jac = DMatrix::zeros(6, self.dof());
        let off = self.arm_offset(arm);
        for k in 0..link {
            let a = self.joint_axis_world(kin, arm, k);
            let pk = kin.arms[arm].links[k + 1].translation;
            let lin = a.cross(&(p - pk));
            for r in 0..3 {
                jac[(r, off + k)] = a[r];
                jac[(r + 3, off + k)] = lin[r];
            }
        }
        jac
    }

    /// 12×2n contact Jacobian, rows `[contact 1 twist; contact 2 twist]`.
    pub fn contact_jacobian_from(&self, kin: &Kinematics) -> DMatrix<f64> {
        let mut jc = DMatrix::zeros(12, self.dof());
        for arm in 0..2 {
            let n = self.arm_dof(arm);
            let p = kin.arms[arm].contact.translation;
            let block = self.jacobian_at(kin, arm, n, &p);
            jc.view_mut((6 * arm, 0), (6, self.dof())).copy_from(&block);
        }
        jc
    }

    pub fn contact_jacobian(&self, q: &DVector<f64>) -> DMatrix<f64> {
        self.contact_jacobian_from(&self.fk(q))
    }

    /// Jacobian of the frame at `point` (link coordinates) on `link` of `arm`.
    /// Link 0 is the fixed arm base.
    pub fn point_jacobian_from(
        &self,
        kin: &Kinematics,
        arm: usize,
        link: usize,
        point: &Vec3,
    ) -> Result<DMatrix<f64>, ModelError> {
        let max = self.arm_dof(arm);
        if arm > 1 || link > max {
            return Err(ModelError::InvalidLink { arm, link, max });
        }
        let p = kin.arms[arm].links[link].transform_point(point);
        Ok(self.jacobian_at(kin, arm, link, &p))
    }

    pub fn point_jacobian(
        &self,
        q: &DVector<f64>,
        arm: usize,
        link: usize,
        point: &Vec3,
    ) -> Result<DMatrix<f64>, ModelError> {
        let kin = self.forward_kinematics(q)?;
        self.point_jacobian_from(&kin, arm, link, point)
    }

    /// Contact twists expressed in base coordinates.
    pub fn contact_twists(&self, jc: &DMatrix<f64>, qd: &DVector<f64>) -> [Twist; 2] {
        let v = jc * qd;
        [0, 1].map(|i| {
            Twist::new(
                Vec3::new(v[6 * i], v[6 * i + 1], v[6 * i + 2]),
                Vec3::new(v[6 * i + 3], v[6 * i + 4], v[6 * i + 5]),
            )
        })
    }

    /// Spatial inertia of `link` (≥ 1) about the world origin.
    fn link_spatial_inertia(&self, kin: &Kinematics, arm: usize, link: usize) -> Matrix6<f64> {
        let j = &self.arms[arm].joints[link - 1];
        let frame = &kin.arms[arm].links[link];
        let c = frame.transform_point(&j.com);
        let r = frame.rotation_matrix();
        let ic = r * j.inertia * r.transpose();
        let cx = skew(&c);
        let mut out = Matrix6::zeros();
        out.fixed_view_mut::<3, 3>(0, 0)
            .copy_from(&(ic + j.mass * cx * cx.transpose()));
        out.fixed_view_mut::<3, 3>(0, 3).copy_from(&(j.mass * cx));
        out.fixed_view_mut::<3, 3>(3, 0)
            .copy_from(&(j.mass * cx.transpose()));
        out.fixed_view_mut::<3, 3>(3, 3)
            .copy_from(&(Mat3::identity() * j.mass));
        out
    }

    /// Composite-rigid-body mass matrix; block diagonal per arm.
    pub fn mass_matrix_from(&self, kin: &Kinematics) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.dof(), self.dof());
        for arm in 0..2 {
            let n = self.arm_dof(arm);
            let off = self.arm_offset(arm);
            let subspace: Vec<nalgebra::Vector6<f64>> = (0..n)
                .map(|k| {
                    let a = self.joint_axis_world(kin, arm, k);
                    let p = kin.arms[arm].links[k + 1].translation;
                    Twist::new(a, p.cross(&a)).to_vector()
                })
                .collect();
            let mut composite = Matrix6::zeros();
            for i in (0..n).rev() {
                composite += self.link_spatial_inertia(kin, arm, i + 1);
                let f = composite * subspace[i];
                for j in 0..=i {
                    let v = subspace[j].dot(&f);
                    m[(off + i, off + j)] = v;
                    m[(off + j, off + i)] = v;
                }
            }
        }
        m
    }

    pub fn mass_matrix(&self, q: &DVector<f64>) -> DMatrix<f64> {
        self.mass_matrix_from(&self.fk(q))
    }

    /// Recursive Newton–Euler for one arm with world-frame quantities.
    /// `base_accel` is the linear acceleration imposed on the base (−g for
    /// gravity).
    fn rnea_arm(
        &self,
        kin: &Kinematics,
        arm: usize,
        qd: &[f64],
        qdd: &[f64],
        base_accel: &Vec3,
    ) -> Vec<f64> {
        let spec = &self.arms[arm];
        let links = &kin.arms[arm].links;
        let n = spec.joints.len();
        let mut forces = Vec::with_capacity(n);
        let mut moments = Vec::with_capacity(n);
        let mut omega = Vec3::zeros();
        let mut omega_dot = Vec3::zeros();
        let mut acc = *base_accel;
        let mut prev_origin = links[0].translation;
        for k in 0..n {
            let j = &spec.joints[k];
            let frame = &links[k + 1];
            let a = frame.rotation * j.axis;
            let p = frame.translation;
            let d = p - prev_origin;
            acc += omega_dot.cross(&d) + omega.cross(&omega.cross(&d));
            let omega_prev = omega;
            omega += a * qd[k];
            omega_dot += a * qdd[k] + omega_prev.cross(&(a * qd[k]));
            let r = frame.rotation * j.com;
            let acc_c = acc + omega_dot.cross(&r) + omega.cross(&omega.cross(&r));
            let rot = frame.rotation_matrix();
            let iw = rot * j.inertia * rot.transpose();
            let f = acc_c * j.mass;
            let nm = iw * omega_dot + omega.cross(&(iw * omega)) + r.cross(&f);
            forces.push(f);
            moments.push(nm);
            prev_origin = p;
        }
        let mut tau = vec![0.0; n];
        let mut f_child = Vec3::zeros();
        let mut n_child = Vec3::zeros();
        for k in (0..n).rev() {
            let frame = &links[k + 1];
            let lever = if k + 1 < n {
                links[k + 2].translation - frame.translation
            } else {
                Vec3::zeros()
            };
            let nk = moments[k] + n_child + lever.cross(&f_child);
            let fk = forces[k] + f_child;
            tau[k] = (frame.rotation * spec.joints[k].axis).dot(&nk);
            f_child = fk;
            n_child = nk;
        }
        tau
    }

    fn rnea(
        &self,
        kin: &Kinematics,
        qd: &DVector<f64>,
        qdd: &DVector<f64>,
        with_gravity: bool,
    ) -> DVector<f64> {
        let base_accel = if with_gravity { -self.gravity } else { Vec3::zeros() };
        let mut out = DVector::zeros(self.dof());
        for arm in 0..2 {
            let off = self.arm_offset(arm);
            let tau = self.rnea_arm(
                kin,
                arm,
                self.arm_slice(qd, arm),
                self.arm_slice(qdd, arm),
                &base_accel,
            );
            out.rows_mut(off, tau.len()).copy_from_slice(&tau);
        }
        out
    }

    pub fn gravity_torque_from(&self, kin: &Kinematics) -> DVector<f64> {
        let z = DVector::zeros(self.dof());
        self.rnea(kin, &z, &z, true)
    }

    pub fn coriolis_from(&self, kin: &Kinematics, qd: &DVector<f64>) -> DVector<f64> {
        let z = DVector::zeros(self.dof());
        self.rnea(kin, qd, &z, false)
    }

    /// `Ṁ q̇` by central difference of the mass matrix along `q̇`. The
    /// displacement along `q̇` has norm at most 1e-6.
    pub fn mdot_qd(&self, q: &DVector<f64>, qd: &DVector<f64>) -> DVector<f64> {
        let norm = qd.norm();
        if norm == 0.0 {
            return DVector::zeros(self.dof());
        }
        let h = 1e-6 / norm.max(1.0);
        let mp = self.mass_matrix(&(q + qd * h));
        let mm = self.mass_matrix(&(q - qd * h));
        (mp - mm) * qd / (2.0 * h)
    }

    pub fn bias_terms_from(&self, kin: &Kinematics, q: &DVector<f64>, qd: &DVector<f64>) -> BiasTerms {
        let coriolis = self.coriolis_from(kin, qd);
        let gravity = self.gravity_torque_from(kin);
        let mdot_qd = self.mdot_qd(q, qd);
        let coriolis_transpose = &mdot_qd - &coriolis;
        BiasTerms {
            coriolis,
            gravity,
            mdot_qd,
            coriolis_transpose,
        }
    }

    pub fn bias_terms(&self, q: &DVector<f64>, qd: &DVector<f64>) -> BiasTerms {
        self.bias_terms_from(&self.fk(q), q, qd)
    }

    /// Joint friction `τf(q̇)`; zero unless `joint_friction` is set.
    pub fn friction_torque(&self, qd: &DVector<f64>) -> DVector<f64> {
        if !self.joint_friction {
            return DVector::zeros(self.dof());
        }
        DVector::from_iterator(
            self.dof(),
            self.joints().zip(qd.iter()).map(|(j, v)| {
                let sign = if *v > 0.0 {
                    1.0
                } else if *v < 0.0 {
                    -1.0
                } else {
                    0.0
                };
                j.viscous * v + j.coulomb * sign
            }),
        )
    }

    /// `τ = M q̈ + C q̇ + G + τf − τ_ext`.
    pub fn inverse_dynamics_from(
        &self,
        kin: &Kinematics,
        qd: &DVector<f64>,
        qdd: &DVector<f64>,
        tau_ext: &DVector<f64>,
    ) -> DVector<f64> {
        self.rnea(kin, qd, qdd, true) + self.friction_torque(qd) - tau_ext
    }

    pub fn inverse_dynamics(
        &self,
        q: &DVector<f64>,
        qd: &DVector<f64>,
        qdd: &DVector<f64>,
        tau_ext: &DVector<f64>,
    ) -> Result<DVector<f64>, ModelError> {
        for v in [q, qd, qdd, tau_ext] {
            self.check_dim(v)?;
        }
        let kin = self.forward_kinematics(q)?;
        Ok(self.inverse_dynamics_from(&kin, qd, qdd, tau_ext))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ModelError> {
        let src = std::fs::read_to_string(path)?;
        Self::from_toml_str(&src)
    }

    pub fn from_toml_str(src: &str) -> Result<Self, ModelError> {
        let raw: RawModel = toml::from_str(src).map_err(|e| ModelError::Parse {
            line: e.span().map(|s| line_of(src, s.start)).unwrap_or(0),
            message: e.message().to_string(),
        })?;
        raw.into_model(src)
    }
}

fn line_of(src: &str, offset: usize) -> usize {
    src[..offset.min(src.len())].matches('\n').count() + 1
}

#[derive(Debug, Deserialize, Default, Clone, Copy)]
#[serde(deny_unknown_fields)]
struct RawPose {
    #[serde(default)]
    xyz: [f64; 3],
    #[serde(default)]
    rpy: [f64; 3],
}

impl From<RawPose> for Pose {
    fn from(p: RawPose) -> Pose {
        Pose::from_xyz_rpy(p.xyz, p.rpy)
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawJoint {
    name: String,
    axis: [f64; 3],
    #[serde(default)]
    origin: RawPose,
    mass: f64,
    com: [f64; 3],
    /// `[ixx, iyy, izz, ixy, ixz, iyz]`
    inertia: [f64; 6],
    position_limits: [f64; 2],
    velocity_limits: [f64; 2],
    torque_limit: f64,
    #[serde(default)]
    viscous: f64,
    #[serde(default)]
    coulomb: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawArm {
    name: String,
    #[serde(default)]
    base: RawPose,
    contact: RawPose,
    /// `[δy, δz]`
    patch: [f64; 2],
    home_contact: Option<RawPose>,
    joint: Vec<toml::Spanned<RawJoint>>,
}

fn default_gravity() -> [f64; 3] {
    [0.0, 0.0, -GRAVITY]
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawModel {
    #[serde(default = "default_gravity")]
    gravity: [f64; 3],
    #[serde(default)]
    joint_friction: bool,
    arm: Vec<toml::Spanned<RawArm>>,
}

impl RawModel {
    fn into_model(self, src: &str) -> Result<DualArmModel, ModelError> {
        if self.arm.len() != 2 {
            return Err(ModelError::Invalid {
                line: self.arm.get(2).map(|a| line_of(src, a.span().start)).unwrap_or(1),
                message: format!("expected exactly two [[arm]] chains, found {}", self.arm.len()),
            });
        }
        let mut arms = Vec::with_capacity(2);
        for spanned in self.arm {
            let arm_line = line_of(src, spanned.span().start);
            let raw = spanned.into_inner();
            let fail = |line: usize, message: String| Err(ModelError::Invalid { line, message });
            if raw.joint.is_empty() {
                return fail(arm_line, format!("arm '{}' has no joints", raw.name));
            }
            if !(raw.patch[0] > 0.0 && raw.patch[1] > 0.0) {
                return fail(arm_line, format!("arm '{}': patch side lengths must be positive", raw.name));
            }
            let mut joints = Vec::with_capacity(raw.joint.len());
            for sj in raw.joint {
                let line = line_of(src, sj.span().start);
                let j = sj.into_inner();
                let axis = Vec3::from(j.axis);
                if (axis.norm() - 1.0).abs() > 1e-6 {
                    return fail(line, format!("joint '{}': axis must have unit norm (got {:.6})", j.name, axis.norm()));
                }
                if !(j.mass > 0.0) {
                    return fail(line, format!("joint '{}': mass must be positive", j.name));
                }
                if !(j.position_limits[0] < j.position_limits[1]) {
                    return fail(line, format!("joint '{}': position_limits must satisfy min < max", j.name));
                }
                if !(j.velocity_limits[0] < 0.0 && 0.0 < j.velocity_limits[1]) {
                    return fail(line, format!("joint '{}': velocity_limits must satisfy min < 0 < max", j.name));
                }
                if !(j.torque_limit > 0.0) {
                    return fail(line, format!("joint '{}': torque_limit must be positive", j.name));
                }
                if j.viscous < 0.0 || j.coulomb < 0.0 {
                    return fail(line, format!("joint '{}': friction coefficients must be non-negative", j.name));
                }
                let [ixx, iyy, izz, ixy, ixz, iyz] = j.inertia;
                let inertia = Mat3::new(ixx, ixy, ixz, ixy, iyy, iyz, ixz, iyz, izz);
                if inertia.cholesky().is_none() {
                    return fail(line, format!("joint '{}': inertia is not positive definite", j.name));
                }
                joints.push(JointSpec {
                    name: j.name,
                    axis,
                    origin: j.origin.into(),
                    mass: j.mass,
                    com: Vec3::from(j.com),
                    inertia,
                    q_min: j.position_limits[0],
                    q_max: j.position_limits[1],
                    qd_min: j.velocity_limits[0],
                    qd_max: j.velocity_limits[1],
                    tau_max: j.torque_limit,
                    viscous: j.viscous,
                    coulomb: j.coulomb,
                });
            }
            arms.push((
                arm_line,
                ArmSpec {
                    name: raw.name,
                    base: raw.base.into(),
                    joints,
                    contact: raw.contact.into(),
                    patch: (raw.patch[0], raw.patch[1]),
                    home_contact: raw.home_contact.map(Pose::from),
                },
            ));
        }
        let (line1, arm1) = arms.pop().expect("two arms");
        let (line0, arm0) = arms.pop().expect("two arms");
        let model = DualArmModel {
            arms: [arm0, arm1],
            gravity: Vec3::from(self.gravity),
            joint_friction: self.joint_friction,
        };
        let kin = model.fk(&DVector::zeros(model.dof()));
        for (arm, line) in [(0, line0), (1, line1)] {
            if let Some(home) = &model.arms[arm].home_contact {
                let actual = kin.contact(arm);
                let err = (actual.to_homogeneous() - home.to_homogeneous()).abs().max();
                if err > 1e-6 {
                    return Err(ModelError::Invalid {
                        line,
                        message: format!(
                            "arm '{}': home_contact differs from forward kinematics at q = 0 by {err:.3e}",
                            model.arms[arm].name
                        ),
                    });
                }
            }
        }
        Ok(model)
    }
}

/// The shipped 7-DOF-per-arm model, embedded so tests and examples do not
/// depend on the working directory.
pub const DEFAULT_MODEL_TOML: &str = include_str!("../config/models/dual_arm_7dof.toml");

impl Default for DualArmModel {
    fn default() -> Self {
        Self::from_toml_str(DEFAULT_MODEL_TOML).expect("shipped model file is valid")
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::Matrix4;
    use proptest::prelude::*;
    use std::f64::consts::FRAC_PI_2;

    /// Two one-joint arms: a point mass `m` at distance `r` along x from a
    /// y-axis hinge.
    pub(crate) fn pendulum_model(m: f64, r: f64) -> DualArmModel {
        let joint = |name: &str| JointSpec {
            name: name.into(),
            axis: Vec3::y(),
            origin: Pose::identity(),
            mass: m,
            com: Vec3::new(r, 0.0, 0.0),
            inertia: Mat3::identity() * 1e-9,
            q_min: -3.0,
            q_max: 3.0,
            qd_min: -5.0,
            qd_max: 5.0,
            tau_max: 100.0,
            viscous: 0.0,
            coulomb: 0.0,
        };
        let arm = |name: &str, y: f64| ArmSpec {
            name: name.into(),
            base: Pose::from_translation(Vec3::new(0.0, y, 0.0)),
            joints: vec![joint(name)],
            contact: Pose::from_translation(Vec3::new(r, 0.0, 0.0)),
            patch: (0.04, 0.04),
            home_contact: None,
        };
        DualArmModel {
            arms: [arm("a", 0.1), arm("b", -0.1)],
            gravity: Vec3::new(0.0, 0.0, -GRAVITY),
            joint_friction: false,
        }
    }

    fn q_strategy() -> impl Strategy<Value = DVector<f64>> {
        prop::collection::vec(-1.2f64..1.2, 14).prop_map(DVector::from_vec)
    }

    fn qd_strategy() -> impl Strategy<Value = DVector<f64>> {
        prop::collection::vec(-1.5f64..1.5, 14).prop_map(DVector::from_vec)
    }

    /// Independent chain product with Rodrigues' formula on 4×4 matrices.
    fn homogeneous_chain(model: &DualArmModel, arm: usize, q: &[f64]) -> Matrix4<f64> {
        let spec = &model.arms[arm];
        let mut h = spec.base.to_homogeneous();
        for (j, angle) in spec.joints.iter().zip(q) {
            let k = skew(&j.axis);
            let r = Mat3::identity() + k * angle.sin() + k * k * (1.0 - angle.cos());
            let mut rot = Matrix4::identity();
            rot.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
            h = h * j.origin.to_homogeneous() * rot;
        }
        h * spec.contact.to_homogeneous()
    }

    fn rotation_rate(r_plus: &Mat3, r_minus: &Mat3, r: &Mat3, h: f64) -> Vec3 {
        let w = (r_plus - r_minus) / (2.0 * h) * r.transpose();
        Vec3::new(w[(2, 1)] - w[(1, 2)], w[(0, 2)] - w[(2, 0)], w[(1, 0)] - w[(0, 1)]) * 0.5
    }

    fn fd_contact_jacobian(model: &DualArmModel, q: &DVector<f64>, h: f64) -> DMatrix<f64> {
        let mut jac = DMatrix::zeros(12, model.dof());
        let base = model.forward_kinematics(q).unwrap();
        for c in 0..model.dof() {
            let mut qp = q.clone();
            qp[c] += h;
            let mut qm = q.clone();
            qm[c] -= h;
            let kp = model.forward_kinematics(&qp).unwrap();
            let km = model.forward_kinematics(&qm).unwrap();
            for arm in 0..2 {
                let w = rotation_rate(
                    &kp.contact(arm).rotation_matrix(),
                    &km.contact(arm).rotation_matrix(),
                    &base.contact(arm).rotation_matrix(),
                    h,
                );
                let v = (kp.contact(arm).translation - km.contact(arm).translation) / (2.0 * h);
                for r in 0..3 {
                    jac[(6 * arm + r, c)] = w[r];
                    jac[(6 * arm + 3 + r, c)] = v[r];
                }
            }
        }
        jac
    }

    #[test]
    fn home_contacts_match_shipped_documentation() {
        let model = DualArmModel::default();
        let kin = model.forward_kinematics(&DVector::zeros(14)).unwrap();
        for arm in 0..2 {
            let home = model.arms[arm].home_contact.expect("documented in model file");
            assert_relative_eq!(
                kin.contact(arm).to_homogeneous(),
                home.to_homogeneous(),
                epsilon = 1e-12
            );
        }
        assert_relative_eq!(kin.contact(0).translation, Vec3::new(0.33, 0.1, -0.25), epsilon = 1e-12);
        assert_relative_eq!(kin.contact(1).translation, Vec3::new(0.33, -0.1, -0.25), epsilon = 1e-12);
    }

    #[test]
    fn first_joint_rotates_contact_rigidly() {
        let model = DualArmModel::default();
        let mut q = DVector::zeros(14);
        q[0] = FRAC_PI_2;
        let home = model.forward_kinematics(&DVector::zeros(14)).unwrap();
        let moved = model.forward_kinematics(&q).unwrap();
        let j0 = &model.arms[0].joints[0];
        let pivot = model.arms[0].base.compose(&j0.origin);
        let axis_w = pivot.rotation * j0.axis;
        let rot = Pose::from_axis_angle(&axis_w, FRAC_PI_2);
        let expected = Pose::from_translation(pivot.translation)
            .compose(&rot)
            .compose(&Pose::from_translation(-pivot.translation))
            .compose(home.contact(0));
        assert_relative_eq!(
            moved.contact(0).to_homogeneous(),
            expected.to_homogeneous(),
            epsilon = 1e-12
        );
        // the other arm does not move
        assert_relative_eq!(
            moved.contact(1).to_homogeneous(),
            home.contact(1).to_homogeneous(),
            epsilon = 1e-15
        );
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let model = DualArmModel::default();
        assert!(matches!(
            model.forward_kinematics(&DVector::zeros(13)),
            Err(ModelError::Dimension { expected: 14, got: 13 })
        ));
    }

    #[test]
    fn contact_jacobian_is_block_decoupled() {
        let model = DualArmModel::default();
        let q = DVector::from_fn(14, |i, _| 0.1 * i as f64 - 0.5);
        let jc = model.contact_jacobian(&q);
        assert_eq!(jc.view((0, 7), (6, 7)).abs().max(), 0.0);
        assert_eq!(jc.view((6, 0), (6, 7)).abs().max(), 0.0);
        assert_eq!((&jc * DVector::zeros(14)).abs().max(), 0.0);
    }

    #[test]
    fn home_configuration_is_not_singular() {
        let model = DualArmModel::default();
        let jc = model.contact_jacobian(&DVector::zeros(14));
        let sv = jc.clone().svd(false, false).singular_values;
        assert!(sv.min() > 1e-2, "singular values {sv}");
    }

    #[test]
    fn point_jacobian_edge_cases() {
        let model = DualArmModel::default();
        let q = DVector::from_fn(14, |i, _| 0.05 * i as f64);
        let base = model.point_jacobian(&q, 0, 0, &Vec3::new(0.1, 0.2, 0.3)).unwrap();
        assert_eq!(base.abs().max(), 0.0);
        for arm in 0..2 {
            let kin = model.forward_kinematics(&q).unwrap();
            let contact_point = model.arms[arm].contact.translation;
            let pj = model.point_jacobian_from(&kin, arm, 7, &contact_point).unwrap();
            let jc = model.contact_jacobian(&q);
            assert_relative_eq!(pj, jc.rows(6 * arm, 6).into_owned(), epsilon = 1e-15);
        }
        assert!(matches!(
            model.point_jacobian(&q, 0, 8, &Vec3::zeros()),
            Err(ModelError::InvalidLink { .. })
        ));
    }

    #[test]
    fn interior_point_jacobian_matches_finite_differences() {
        let model = DualArmModel::default();
        let q = DVector::from_fn(14, |i, _| ((i * 7) % 5) as f64 * 0.2 - 0.4);
        let point = Vec3::new(0.05, -0.02, 0.01);
        let link = 4;
        let jac = model.point_jacobian(&q, 1, link, &point).unwrap();
        let h = 1e-6;
        for c in 0..14 {
            let mut qp = q.clone();
            qp[c] += h;
            let mut qm = q.clone();
            qm[c] -= h;
            let kp = model.forward_kinematics(&qp).unwrap();
            let km = model.forward_kinematics(&qm).unwrap();
            let k0 = model.forward_kinematics(&q).unwrap();
            let v = (kp.arms[1].links[link].transform_point(&point)
                - km.arms[1].links[link].transform_point(&point))
                / (2.0 * h);
            let w = rotation_rate(
                &kp.arms[1].links[link].rotation_matrix(),
                &km.arms[1].links[link].rotation_matrix(),
                &k0.arms[1].links[link].rotation_matrix(),
                h,
            );
            for r in 0..3 {
                assert!((jac[(r, c)] - w[r]).abs() < 1e-6);
                assert!((jac[(r + 3, c)] - v[r]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn pendulum_mass_and_gravity() {
        let (m, r) = (1.3, 0.4);
        let model = pendulum_model(m, r);
        let q = DVector::zeros(2);
        let mm = model.mass_matrix(&q);
        assert_relative_eq!(mm[(0, 0)], m * r * r, epsilon = 1e-8);
        let g = model.bias_terms(&q, &DVector::zeros(2)).gravity;
        // mass on +x, hinge about +y: gravity rotates it positively about y, so
        // the holding torque is negative
        assert_relative_eq!(g[0], -m * GRAVITY * r, epsilon = 1e-12);
        assert_relative_eq!(g[1], -m * GRAVITY * r, epsilon = 1e-12);
    }

    #[test]
    fn zero_velocity_bias_terms_vanish() {
        let model = DualArmModel::default();
        let q = DVector::from_fn(14, |i, _| 0.03 * i as f64);
        let b = model.bias_terms(&q, &DVector::zeros(14));
        assert_eq!(b.coriolis.abs().max(), 0.0);
        assert_eq!(b.mdot_qd.abs().max(), 0.0);
        assert_eq!(b.coriolis_transpose.abs().max(), 0.0);
    }

    #[test]
    fn inverse_dynamics_at_rest_is_gravity() {
        let model = DualArmModel::default();
        let q = DVector::from_fn(14, |i, _| -0.02 * i as f64);
        let z = DVector::zeros(14);
        let tau = model.inverse_dynamics(&q, &z, &z, &z).unwrap();
        let g = model.bias_terms(&q, &z).gravity;
        assert_relative_eq!(tau, g, epsilon = 1e-12);
    }

    #[test]
    fn viscous_friction_enters_inverse_dynamics() {
        let mut model = DualArmModel { joint_friction: true, ..DualArmModel::default() };
        for arm in model.arms.iter_mut() {
            for j in arm.joints.iter_mut() {
                j.viscous = 0.5;
                j.coulomb = 0.1;
            }
        }
        let q = DVector::zeros(14);
        let qd = DVector::from_element(14, 0.2);
        let z = DVector::zeros(14);
        let kin = model.forward_kinematics(&q).unwrap();
        let with = model.inverse_dynamics_from(&kin, &qd, &z, &z);
        model.joint_friction = false;
        let without = model.inverse_dynamics_from(&kin, &qd, &z, &z);
        assert_relative_eq!(with - without, DVector::from_element(14, 0.5 * 0.2 + 0.1), epsilon = 1e-12);
    }

    #[test]
    fn loader_reports_line_of_bad_joint() {
        let bad = DEFAULT_MODEL_TOML.replacen("axis = [0.0, 1.0, 0.0]", "axis = [0.0, 2.0, 0.0]", 1);
        let err = DualArmModel::from_toml_str(&bad).unwrap_err();
        let expected_line = bad
            .lines()
            .position(|l| l.trim_start().starts_with("[[arm.joint]]"))
            .unwrap()
            + 1;
        match err {
            ModelError::Invalid { line, message } => {
                assert_eq!(line, expected_line, "{message}");
                assert!(message.contains("unit norm"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn loader_rejects_bad_limits_and_syntax() {
        let bad = DEFAULT_MODEL_TOML.replacen("velocity_limits = [-2.0, 2.0]", "velocity_limits = [0.5, 2.0]", 1);
        assert!(matches!(DualArmModel::from_toml_str(&bad), Err(ModelError::Invalid { .. })));
        let bad = DEFAULT_MODEL_TOML.replacen("mass = ", "mass = -", 1);
        assert!(matches!(DualArmModel::from_toml_str(&bad), Err(ModelError::Invalid { .. })));
        let err = DualArmModel::from_toml_str("arm = [[[").unwrap_err();
        assert!(matches!(err, ModelError::Parse { line: 1, .. }));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn fk_matches_homogeneous_chain(q in q_strategy()) {
            let model = DualArmModel::default();
            let kin = model.forward_kinematics(&q).unwrap();
            for arm in 0..2 {
                let qs = &q.as_slice()[7 * arm..7 * arm + 7];
                let h = homogeneous_chain(&model, arm, qs);
                prop_assert!((kin.contact(arm).to_homogeneous() - h).abs().max() < 1e-12);
            }
        }

        #[test]
        fn contact_jacobian_matches_finite_differences(q in q_strategy()) {
            let model = DualArmModel::default();
            let jc = model.contact_jacobian(&q);
            let fd = fd_contact_jacobian(&model, &q, 1e-6);
            prop_assert!((jc - fd).abs().max() < 1e-6);
        }

        #[test]
        fn mass_matrix_symmetric_positive_definite(q in q_strategy()) {
            let model = DualArmModel::default();
            let m = model.mass_matrix(&q);
            prop_assert!((&m - m.transpose()).abs().max() < 1e-10);
            let eig = m.clone().symmetric_eigenvalues();
            prop_assert!(eig.min() > 0.0);
            prop_assert_eq!(m.view((0, 7), (7, 7)).abs().max(), 0.0);
        }

        #[test]
        fn kinetic_energy_matches_link_velocities(q in q_strategy(), qd in qd_strategy()) {
            let model = DualArmModel::default();
            let ke = 0.5 * qd.dot(&(model.mass_matrix(&q) * &qd));
            // per-link velocities from finite differences of FK along q̇
            let h = 1e-5;
            let kp = model.forward_kinematics(&(&q + &qd * h)).unwrap();
            let km = model.forward_kinematics(&(&q - &qd * h)).unwrap();
            let k0 = model.forward_kinematics(&q).unwrap();
            let mut oracle = 0.0;
            for arm in 0..2 {
                for (k, j) in model.arms[arm].joints.iter().enumerate() {
                    let (fp, fm, f0) = (&kp.arms[arm].links[k + 1], &km.arms[arm].links[k + 1], &k0.arms[arm].links[k + 1]);
                    let v = (fp.transform_point(&j.com) - fm.transform_point(&j.com)) / (2.0 * h);
                    let w = rotation_rate(&fp.rotation_matrix(), &fm.rotation_matrix(), &f0.rotation_matrix(), h);
                    let r = f0.rotation_matrix();
                    let iw = r * j.inertia * r.transpose();
                    oracle += 0.5 * (j.mass * v.norm_squared() + w.dot(&(iw * w)));
                }
            }
            prop_assert!((ke - oracle).abs() < 1e-8, "ke {} oracle {}", ke, oracle);
        }

        #[test]
        fn coriolis_skew_symmetry(q in q_strategy(), qd in qd_strategy()) {
            let model = DualArmModel::default();
            let b = model.bias_terms(&q, &qd);
            let lhs = qd.dot(&(&b.mdot_qd - &b.coriolis * 2.0));
            let scale = qd.dot(&b.mdot_qd).abs().max(qd.dot(&b.coriolis).abs()).max(1e-12);
            // absolute floor covers the central-difference noise in Ṁq̇
            prop_assert!(lhs.abs() < 1e-6 * scale + 1e-9, "lhs {} scale {}", lhs, scale);
        }

        #[test]
        fn inverse_dynamics_round_trips_through_forward_dynamics(
            q in q_strategy(), qd in qd_strategy(), qdd in prop::collection::vec(-3.0f64..3.0, 14)
        ) {
            let model = DualArmModel::default();
            let qdd = DVector::from_vec(qdd);
            let z = DVector::zeros(14);
            let tau = model.inverse_dynamics(&q, &qd, &qdd, &z).unwrap();
            // forward dynamics oracle: M q̈ = τ − C q̇ − G
            let b = model.bias_terms(&q, &qd);
            let m = model.mass_matrix(&q);
            let rhs = &tau - &b.coriolis - &b.gravity - model.friction_torque(&qd);
            let solved = m.lu().solve(&rhs).unwrap();
            prop_assert!((solved - qdd).abs().max() < 1e-8);
        }

        #[test]
        fn external_torque_shifts_inverse_dynamics(q in q_strategy(), w in prop::array::uniform12(-10.0f64..10.0)) {
            let model = DualArmModel::default();
            let z = DVector::zeros(14);
            let jc = model.contact_jacobian(&q);
            let wc = DVector::from_column_slice(&w);
            let tau_ext = jc.transpose() * &wc;
            let base = model.inverse_dynamics(&q, &z, &z, &z).unwrap();
            let shifted = model.inverse_dynamics(&q, &z, &z, &tau_ext).unwrap();
            prop_assert!((shifted - base + jc.transpose() * wc).abs().max() < 1e-12);
        }
    }
}
