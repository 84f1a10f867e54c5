//! Deterministic plant for the clamping loop.
//!
//! Joints follow the velocity command through a first-order lag and are not
//! pushed back by contact forces (a stiff position-controlled robot). The
//! object is a free rigid body held by two penalty contacts, each a
//! spring-damper between the hand contact frame and an anchor on the object
//! face. Tangential force and torsion are capped by the true friction `μ*`,
//! `λ*`; when a cap is reached the anchor slides and the contact reports slip.
//! Actuator torques are reconstructed by inverse dynamics so an observer sees
//! the same interface as on the real robot.

use nalgebra::{DMatrix, DVector, Rotation3, UnitQuaternion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Deserialize;
use thiserror::Error;

use crate::model::{DualArmModel, Kinematics, ModelError};
use crate::spatial::{rotation_vector, Mat3, Pose, Twist, Vec3, Vec6, Wrench};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("contact {contact} penetrates {penetration:.4e} m (limit {limit:.4e} m): step too stiff")]
    Instability { contact: usize, penetration: f64, limit: f64 },
    #[error("non-finite simulator state at t = {t:.4}")]
    NonFinite { t: f64 },
    #[error("invalid simulator parameter: {0}")]
    Invalid(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

fn invalid<T>(msg: impl Into<String>) -> Result<T, SimError> {
    Err(SimError::Invalid(msg.into()))
}

fn wrench6(v: &[f64; 6]) -> Wrench {
    Wrench::from_vector(&Vec6::from_column_slice(v))
}

/// Solid box inertia about its center.
pub fn box_inertia(mass: f64, dims: [f64; 3]) -> Mat3 {
    let [x, y, z] = dims.map(|d| d * d);
    Mat3::from_diagonal(&Vec3::new(y + z, x + z, x + y)) * (mass / 12.0)
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectParams {
    pub mass: f64,
    /// Box side lengths, used for the inertia when none is given.
    pub dims: [f64; 3],
    /// `[ixx, iyy, izz, ixy, ixz, iyz]` about the center of mass.
    #[serde(default)]
    pub inertia: Option<[f64; 6]>,
}

impl Default for ObjectParams {
    fn default() -> Self {
        Self { mass: 0.4, dims: [0.15, 0.2, 0.15], inertia: None }
    }
}

impl ObjectParams {
    pub fn inertia_matrix(&self) -> Mat3 {
        match self.inertia {
            Some([xx, yy, zz, xy, xz, yz]) => Mat3::new(xx, xy, xz, xy, yy, yz, xz, yz, zz),
            None => box_inertia(self.mass, self.dims),
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if !(self.mass > 0.0 && self.mass.is_finite()) {
            return invalid("object.mass must be positive");
        }
        if self.inertia.is_none() && !self.dims.iter().all(|d| *d > 0.0 && d.is_finite()) {
            return invalid("object.dims must be positive");
        }
        if self.inertia_matrix().cholesky().is_none() {
            return invalid("object inertia must be symmetric positive definite");
        }
        Ok(())
    }
}

/// Penalty-contact constants and the true friction of the plant.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContactPlantParams {
    pub kn: f64,
    /// Normal damping; `None` gives critical damping for the initial object mass.
    pub bn: Option<f64>,
    pub kt: f64,
    pub bt: Option<f64>,
    /// Torsional stiffness about the contact normal (N·m/rad).
    pub k_torsion: f64,
    pub b_torsion: f64,
    /// Patch tilt stiffness about the in-plane axes (N·m/rad).
    pub k_tilt: f64,
    pub b_tilt: f64,
    pub mu: f64,
    pub lambda: f64,
    /// Contact patch side lengths `(δy, δz)` bounding the center of pressure.
    pub patch: [f64; 2],
    /// Reference load for the static deflection; penetration beyond ten
    /// times `reference_load / kn` aborts the run.
    pub reference_load: f64,
}

impl Default for ContactPlantParams {
    fn default() -> Self {
        Self {
            kn: 5e4,
            bn: None,
            kt: 2e4,
            bt: None,
            k_torsion: 20.0,
            b_torsion: 0.2,
            k_tilt: 50.0,
            b_tilt: 0.5,
            mu: 0.2,
            lambda: 0.0133,
            patch: [0.04, 0.04],
            reference_load: 50.0,
        }
    }
}

impl ContactPlantParams {
    pub fn validate(&self) -> Result<(), SimError> {
        let pos = [
            ("kn", self.kn),
            ("kt", self.kt),
            ("k_torsion", self.k_torsion),
            ("b_torsion", self.b_torsion),
            ("k_tilt", self.k_tilt),
            ("b_tilt", self.b_tilt),
            ("mu", self.mu),
            ("lambda", self.lambda),
            ("patch[0]", self.patch[0]),
            ("patch[1]", self.patch[1]),
            ("reference_load", self.reference_load),
            ("bn", self.bn.unwrap_or(1.0)),
            ("bt", self.bt.unwrap_or(1.0)),
        ];
        for (name, v) in pos {
            if !(v > 0.0 && v.is_finite()) {
                return invalid(format!("contact.{name} must be positive"));
            }
        }
        Ok(())
    }

    pub fn penetration_limit(&self) -> f64 {
        10.0 * self.reference_load / self.kn
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum DisturbanceTarget {
    Object,
    /// Point given in the frame of `link` (0 is the arm base).
    Arm { arm: usize, link: usize, point: [f64; 3] },
}

/// Wrenches are `[mx, my, mz, fx, fy, fz]` in base coordinates; object
/// wrenches act at the object center of mass.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum Profile {
    Constant { wrench: [f64; 6] },
    /// Linear from `from` at `t_start` to `to` at `t_end`.
    Ramp { from: [f64; 6], to: [f64; 6] },
    /// `offset + amplitude·sin(2π·frequency·(t − t_start) + phase)`.
    Sine {
        amplitude: [f64; 6],
        frequency: f64,
        #[serde(default)]
        phase: f64,
        #[serde(default)]
        offset: [f64; 6],
    },
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DisturbanceEvent {
    pub t_start: f64,
    pub t_end: f64,
    pub target: DisturbanceTarget,
    pub profile: Profile,
}

impl DisturbanceEvent {
    pub fn active(&self, t: f64) -> bool {
        t >= self.t_start && t < self.t_end
    }

    pub fn wrench_at(&self, t: f64) -> Wrench {
        if !self.active(t) {
            return Wrench::zero();
        }
        match &self.profile {
            Profile::Constant { wrench } => wrench6(wrench),
            Profile::Ramp { from, to } => {
                let s = (t - self.t_start) / (self.t_end - self.t_start);
                wrench6(from) * (1.0 - s) + wrench6(to) * s
            }
            Profile::Sine { amplitude, frequency, phase, offset } => {
                let arg = 2.0 * std::f64::consts::PI * frequency * (t - self.t_start) + phase;
                wrench6(offset) + wrench6(amplitude) * arg.sin()
            }
        }
    }

    pub fn validate(&self, model: &DualArmModel) -> Result<(), SimError> {
        if !(self.t_start < self.t_end) || !self.t_start.is_finite() || !self.t_end.is_finite() {
            return invalid(format!("disturbance needs t_start < t_end (got {} .. {})", self.t_start, self.t_end));
        }
        let finite = |w: &[f64; 6]| w.iter().all(|v| v.is_finite());
        let ok = match &self.profile {
            Profile::Constant { wrench } => finite(wrench),
            Profile::Ramp { from, to } => finite(from) && finite(to),
            Profile::Sine { amplitude, frequency, phase, offset } => {
                finite(amplitude) && finite(offset) && frequency.is_finite() && phase.is_finite()
            }
        };
        if !ok {
            return invalid("disturbance wrench must be finite");
        }
        if let DisturbanceTarget::Arm { arm, link, point } = &self.target {
            if *arm > 1 || *link > model.arm_dof(*arm) {
                return Err(ModelError::InvalidLink { arm: *arm, link: *link, max: model.arm_dof((*arm).min(1)) }.into());
            }
            if !point.iter().all(|v| v.is_finite()) {
                return invalid("disturbance point must be finite");
            }
        }
        Ok(())
    }
}

/// Wrench on an arm link at a point given in base coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinkLoad {
    pub arm: usize,
    pub link: usize,
    /// Point in link coordinates.
    pub point: Vec3,
    pub wrench: Wrench,
}

#[derive(Debug, Clone, PartialEq, Default, Deserialize)]
#[serde(transparent)]
pub struct DisturbanceSchedule {
    pub events: Vec<DisturbanceEvent>,
}

impl DisturbanceSchedule {
    /// Object wrench and link loads active at `t` (half-open intervals).
    pub fn apply(&self, t: f64) -> (Wrench, Vec<LinkLoad>) {
        let mut object = Wrench::zero();
        let mut links = Vec::new();
        for e in self.events.iter().filter(|e| e.active(t)) {
            let w = e.wrench_at(t);
            match &e.target {
                DisturbanceTarget::Object => object = object + w,
                DisturbanceTarget::Arm { arm, link, point } => links.push(LinkLoad {
                    arm: *arm,
                    link: *link,
                    point: Vec3::from(*point),
                    wrench: w,
                }),
            }
        }
        (object, links)
    }
}

/// A load placed on the object, its mass blended in linearly over `ramp`.
#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StackEvent {
    pub t: f64,
    pub mass: f64,
    #[serde(default)]
    pub ramp: f64,
}

impl StackEvent {
    pub fn mass_at(&self, t: f64) -> f64 {
        if t < self.t {
            0.0
        } else if self.ramp <= 0.0 || t >= self.t + self.ramp {
            self.mass
        } else {
            self.mass * (t - self.t) / self.ramp
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimParams {
    pub dt: f64,
    /// Object/contact substeps per control period.
    pub substeps: usize,
    /// Joint velocity tracking time constant (s).
    pub tau_m: f64,
    pub object: ObjectParams,
    pub contact: ContactPlantParams,
    pub stacking: Vec<StackEvent>,
    pub schedule: DisturbanceSchedule,
    /// F/T noise standard deviation per component.
    pub ft_noise: f64,
    pub seed: u64,
    /// Object displacement that raises the drop alarm (m).
    pub drop_distance: f64,
}

impl Default for SimParams {
    fn default() -> Self {
        Self {
            dt: 1e-3,
            substeps: 4,
            tau_m: 0.01,
            object: ObjectParams::default(),
            contact: ContactPlantParams::default(),
            stacking: Vec::new(),
            schedule: DisturbanceSchedule::default(),
            ft_noise: 0.0,
            seed: 0,
            drop_distance: 0.05,
        }
    }
}

impl SimParams {
    pub fn validate(&self, model: &DualArmModel) -> Result<(), SimError> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return invalid("dt must be positive");
        }
        if self.substeps == 0 {
            return invalid("substeps must be at least 1");
        }
        if !(self.tau_m > 0.0 && self.tau_m.is_finite()) {
            return invalid("tau_m must be positive");
        }
        if !(self.ft_noise >= 0.0 && self.ft_noise.is_finite()) {
            return invalid("ft_noise must be non-negative");
        }
        if !(self.drop_distance > 0.0) {
            return invalid("drop_distance must be positive");
        }
        self.object.validate()?;
        self.contact.validate()?;
        for s in &self.stacking {
            if !(s.mass > 0.0 && s.mass.is_finite() && s.ramp >= 0.0 && s.t.is_finite()) {
                return invalid("stacking events need positive mass, non-negative ramp and finite time");
            }
        }
        for e in &self.schedule.events {
            e.validate(model)?;
        }
        Ok(())
    }
}

/// Per-contact state: a face plane fixed on the object and an anchor that
/// slides within it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContactState {
    /// Face frame in object coordinates: origin on the surface, x-axis the
    /// outward normal.
    pub face: Pose,
    /// Anchor position on the face (face y, z).
    pub anchor: [f64; 2],
    /// Anchor rotation about the face normal.
    pub torsion: f64,
    pub slip: bool,
    pub in_contact: bool,
    pub penetration: f64,
    /// Wrench this hand applies to the object, base coordinates, about the
    /// hand contact point.
    pub wrench: Wrench,
}

impl ContactState {
    fn anchor_pose(&self) -> Pose {
        self.face.compose(&Pose::new(
            Rotation3::from_axis_angle(&Vec3::x_axis(), self.torsion),
            Vec3::new(0.0, self.anchor[0], self.anchor[1]),
        ))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimState {
    pub t: f64,
    pub q: DVector<f64>,
    pub qd: DVector<f64>,
    /// Joint acceleration applied over the last step.
    pub qdd: DVector<f64>,
    pub object: Pose,
    /// Object twist, base coordinates, linear part at the center of mass.
    pub object_twist: Twist,
    pub object_mass: f64,
    pub contacts: [ContactState; 2],
    /// Actuator torque applied over the last step.
    pub tau: DVector<f64>,
    /// True external joint torque (contact reactions and link loads).
    pub tau_ext: DVector<f64>,
    /// Object disturbance active over the last step.
    pub object_disturbance: Wrench,
    /// Object moved further than the drop distance from its start pose.
    pub dropped: bool,
}

impl SimState {
    pub fn slip(&self) -> [bool; 2] {
        [self.contacts[0].slip, self.contacts[1].slip]
    }

    /// Tangential over normal force at each contact in its face frame; `None`
    /// when the contact is open.
    pub fn friction_ratios(&self) -> [Option<f64>; 2] {
        self.contacts.each_ref().map(|c| {
            let local = c.face.rotation.inverse() * (self.object.rotation.inverse() * c.wrench.force);
            (c.in_contact && local.x < 0.0).then(|| local.yz().norm() / -local.x)
        })
    }
}

/// Sensor readings available to the controller.
#[derive(Debug, Clone, PartialEq)]
pub struct Sensors {
    pub t: f64,
    pub q: DVector<f64>,
    pub qd: DVector<f64>,
    pub tau: DVector<f64>,
    /// Hand-on-object wrenches in base coordinates about the contact points.
    pub ft: [Wrench; 2],
}

#[derive(Debug, Clone, Copy)]
struct Hand {
    pose: Pose,
    twist: Twist,
}

struct ContactEval {
    wrench: Wrench,
    anchor: [f64; 2],
    torsion: f64,
    slip: bool,
    in_contact: bool,
    penetration: f64,
}

#[derive(Debug, Clone, Copy)]
struct Damping {
    bn: f64,
    bt: f64,
}

fn evaluate_contact(
    c: &ContactPlantParams,
    damping: Damping,
    state: &ContactState,
    hand: &Hand,
    object: &Pose,
    object_twist: &Twist,
) -> ContactEval {
    let anchor = object.compose(&state.anchor_pose());
    let ra = anchor.rotation;
    let ra_t = ra.inverse();
    let d = ra_t * (hand.pose.translation - anchor.translation);
    let arm = hand.pose.translation - object.translation;
    let material_vel = object_twist.linear + object_twist.angular.cross(&arm);
    let u = ra_t * (hand.twist.linear - material_vel);
    let w_rel = ra_t * (hand.twist.angular - object_twist.angular);
    let rel_rot = rotation_vector(&(ra_t * hand.pose.rotation));
    let penetration = -d.x;
    // anchor updates live in face coordinates
    let to_face = |y: f64, z: f64| {
        let (sn, cs) = state.torsion.sin_cos();
        [state.anchor[0] + cs * y - sn * z, state.anchor[1] + sn * y + cs * z]
    };

    let fn_ = if penetration > 0.0 { (c.kn * penetration - damping.bn * u.x).max(0.0) } else { 0.0 };
    if fn_ <= 0.0 {
        // separated: the anchor follows the hand so a new touch starts relaxed
        return ContactEval {
            wrench: Wrench::zero(),
            anchor: to_face(d.y, d.z),
            torsion: state.torsion + rel_rot.x,
            slip: false,
            in_contact: false,
            penetration,
        };
    }

    let mut slip = false;
    let mut anchor_yz = state.anchor;
    let mut ft = Vec3::new(0.0, c.kt * d.y + damping.bt * u.y, c.kt * d.z + damping.bt * u.z);
    let ft_norm = ft.norm();
    let ft_cap = c.mu * fn_;
    if ft_norm > ft_cap {
        slip = true;
        ft *= ft_cap / ft_norm;
        // re-seat the anchor so the spring alone carries the capped force
        anchor_yz = to_face(d.y - ft.y / c.kt, d.z - ft.z / c.kt);
    }
    let mut torsion = state.torsion;
    let mut mx = c.k_torsion * rel_rot.x + c.b_torsion * w_rel.x;
    let mx_cap = c.lambda * fn_;
    if mx.abs() > mx_cap {
        slip = true;
        mx = mx.signum() * mx_cap;
        torsion = state.torsion + rel_rot.x - mx / c.k_torsion;
    }
    let my_cap = 0.5 * c.patch[1] * fn_;
    let mz_cap = 0.5 * c.patch[0] * fn_;
    let my = (c.k_tilt * rel_rot.y + c.b_tilt * w_rel.y).clamp(-my_cap, my_cap);
    let mz = (c.k_tilt * rel_rot.z + c.b_tilt * w_rel.z).clamp(-mz_cap, mz_cap);

    let local = Wrench::new(Vec3::new(mx, my, mz), Vec3::new(-fn_, ft.y, ft.z));
    ContactEval {
        wrench: Wrench::new(ra * local.moment, ra * local.force),
        anchor: anchor_yz,
        torsion,
        slip,
        in_contact: true,
        penetration,
    }
}

fn finite(v: &DVector<f64>) -> bool {
    v.iter().all(|x| x.is_finite())
}

pub struct Simulator {
    model: DualArmModel,
    params: SimParams,
    damping: Damping,
    inertia_body: Mat3,
    state: SimState,
    kin: Kinematics,
    start_object: Pose,
    rng: ChaCha8Rng,
    noise: Option<Normal<f64>>,
}

impl std::fmt::Debug for Simulator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Simulator").field("t", &self.state.t).finish_non_exhaustive()
    }
}

impl Simulator {
    /// Start at rest in configuration `q0`, holding the object between the
    /// hands with normal force `squeeze` on each contact. The object frame is
    /// the contact midpoint with base-aligned axes.
    pub fn new(model: DualArmModel, params: SimParams, q0: DVector<f64>, squeeze: f64) -> Result<Self, SimError> {
        params.validate(&model)?;
        if !(squeeze >= 0.0 && squeeze.is_finite()) {
            return invalid("initial squeeze must be non-negative");
        }
        let kin = model.forward_kinematics(&q0)?;
        let object = kin.object_proxy;
        let preload = squeeze / params.contact.kn;
        let m0 = params.object.mass;
        let damping = Damping {
            bn: params.contact.bn.unwrap_or(2.0 * (params.contact.kn * m0).sqrt()),
            bt: params.contact.bt.unwrap_or(2.0 * (params.contact.kt * m0).sqrt()),
        };
        let contacts = [0, 1].map(|i| {
            let local = object.inverse().compose(kin.contact(i));
            let shift = local.rotation * Vec3::new(preload, 0.0, 0.0);
            ContactState {
                face: Pose::new(local.rotation, local.translation + shift),
                anchor: [0.0, 0.0],
                torsion: 0.0,
                slip: false,
                in_contact: squeeze > 0.0,
                penetration: preload,
                wrench: Wrench::zero(),
            }
        });
        let n = model.dof();
        let noise = (params.ft_noise > 0.0)
            .then(|| Normal::new(0.0, params.ft_noise).expect("validated noise level"));
        let mut sim = Self {
            inertia_body: params.object.inertia_matrix(),
            damping,
            rng: ChaCha8Rng::seed_from_u64(params.seed),
            noise,
            state: SimState {
                t: 0.0,
                q: q0.clone(),
                qd: DVector::zeros(n),
                qdd: DVector::zeros(n),
                object,
                object_twist: Twist::zero(),
                object_mass: m0,
                contacts,
                tau: DVector::zeros(n),
                tau_ext: DVector::zeros(n),
                object_disturbance: Wrench::zero(),
                dropped: false,
            },
            start_object: object,
            kin,
            model,
            params,
        };
        sim.refresh_contacts();
        let (tau_ext, _) = sim.external_torque(&[]);
        sim.state.tau = sim.model.inverse_dynamics_from(&sim.kin, &sim.state.qd, &sim.state.qdd, &tau_ext);
        sim.state.tau_ext = tau_ext;
        Ok(sim)
    }

    pub fn state(&self) -> &SimState {
        &self.state
    }

    pub fn params(&self) -> &SimParams {
        &self.params
    }

    pub fn model(&self) -> &DualArmModel {
        &self.model
    }

    pub fn kinematics(&self) -> &Kinematics {
        &self.kin
    }

    /// Shift the clock, e.g. to start logging after a settling phase.
    pub fn set_time(&mut self, t: f64) {
        self.state.t = t;
    }

    /// Object mass including stacked loads at `t`.
    pub fn mass_at(&self, t: f64) -> f64 {
        self.params.object.mass + self.params.stacking.iter().map(|s| s.mass_at(t)).sum::<f64>()
    }

    fn hands(&self, kin: &Kinematics, jc_qd: Option<&DVector<f64>>) -> [Hand; 2] {
        [0, 1].map(|i| {
            let twist = jc_qd
                .map(|v| Twist::new(Vec3::new(v[6 * i], v[6 * i + 1], v[6 * i + 2]), Vec3::new(v[6 * i + 3], v[6 * i + 4], v[6 * i + 5])))
                .unwrap_or_default();
            Hand { pose: *kin.contact(i), twist }
        })
    }

    /// Recompute contact wrenches at the current state without moving anchors.
    fn refresh_contacts(&mut self) {
        let jc = self.model.contact_jacobian_from(&self.kin);
        let v = &jc * &self.state.qd;
        let hands = self.hands(&self.kin, Some(&v));
        for (i, hand) in hands.iter().enumerate() {
            let e = evaluate_contact(
                &self.params.contact,
                self.damping,
                &self.state.contacts[i],
                hand,
                &self.state.object,
                &self.state.object_twist,
            );
            let c = &mut self.state.contacts[i];
            c.wrench = e.wrench;
            c.in_contact = e.in_contact;
            c.penetration = e.penetration;
        }
    }

    /// True external joint torque: contact reactions plus link loads.
    fn external_torque(&self, loads: &[LinkLoad]) -> (DVector<f64>, DMatrix<f64>) {
        let jc = self.model.contact_jacobian_from(&self.kin);
        let mut wc = DVector::zeros(12);
        for i in 0..2 {
            wc.rows_mut(6 * i, 6).copy_from(&self.state.contacts[i].wrench.to_vector());
        }
        let mut tau = -(jc.transpose() * wc);
        for l in loads {
            let j = self
                .model
                .point_jacobian_from(&self.kin, l.arm, l.link, &l.point)
                .expect("link loads are validated");
            tau += j.transpose() * DVector::from_column_slice(l.wrench.to_vector().as_slice());
        }
        (tau, jc)
    }

    /// Advance one control period under joint velocity command `qd_cmd`.
    pub fn step(&mut self, qd_cmd: &DVector<f64>) -> Result<&SimState, SimError> {
        self.model.check_dim(qd_cmd)?;
        let p = &self.params;
        let dt = p.dt;
        let t0 = self.state.t;

        let qdd = (qd_cmd - &self.state.qd) / p.tau_m;
        let qd1 = &self.state.qd + &qdd * dt;
        let q1 = &self.state.q + &qd1 * dt;
        let kin1 = self.model.forward_kinematics(&q1)?;

        // hands move on a constant twist from the current to the next pose
        let start = [*self.kin.contact(0), *self.kin.contact(1)];
        let end = [*kin1.contact(0), *kin1.contact(1)];
        let twists = [0, 1].map(|i| {
            let w = rotation_vector(&(end[i].rotation * start[i].rotation.inverse())) / dt;
            Twist::new(w, (end[i].translation - start[i].translation) / dt)
        });

        let (w_obj, _) = p.schedule.apply(t0);
        let h = dt / p.substeps as f64;
        let mut slip = [false; 2];
        let gravity = self.model.gravity;
        for s in 0..p.substeps {
            let ts = s as f64 * h;
            let mass = self.mass_at(t0 + ts);
            let hands = [0, 1].map(|i| Hand {
                pose: Pose::new(
                    Rotation3::from_scaled_axis(twists[i].angular * ts) * start[i].rotation,
                    start[i].translation + twists[i].linear * ts,
                ),
                twist: twists[i],
            });
            let mut force = gravity * mass + w_obj.force;
            let mut moment = w_obj.moment;
            for i in 0..2 {
                let e = evaluate_contact(
                    &p.contact,
                    self.damping,
                    &self.state.contacts[i],
                    &hands[i],
                    &self.state.object,
                    &self.state.object_twist,
                );
                if e.penetration > p.contact.penetration_limit() {
                    return Err(SimError::Instability {
                        contact: i,
                        penetration: e.penetration,
                        limit: p.contact.penetration_limit(),
                    });
                }
                slip[i] |= e.slip;
                let c = &mut self.state.contacts[i];
                c.anchor = e.anchor;
                c.torsion = e.torsion;
                force += e.wrench.force;
                moment += e.wrench.moment + (hands[i].pose.translation - self.state.object.translation).cross(&e.wrench.force);
            }
            // semi-implicit Euler on the Newton-Euler equations
            let r = self.state.object.rotation.matrix();
            let inertia = r * self.inertia_body * r.transpose() * (mass / p.object.mass);
            let w = self.state.object_twist.angular;
            let alpha = inertia
                .try_inverse()
                .expect("object inertia is positive definite")
                * (moment - w.cross(&(inertia * w)));
            let tw = &mut self.state.object_twist;
            tw.linear += force / mass * h;
            tw.angular += alpha * h;
            let obj = &mut self.state.object;
            obj.translation += tw.linear * h;
            obj.rotation = Rotation3::from_scaled_axis(tw.angular * h) * obj.rotation;
            // nalgebra's renormalize iterates without bound on some inputs
            obj.rotation = UnitQuaternion::from_rotation_matrix(&obj.rotation).to_rotation_matrix();
        }

        self.state.q = q1;
        self.state.qd = qd1;
        self.state.qdd = qdd;
        self.kin = kin1;
        self.state.t = t0 + dt;
        self.state.object_disturbance = w_obj;
        self.refresh_contacts();
        for (c, s) in self.state.contacts.iter_mut().zip(slip) {
            c.slip = s;
        }

        let (_, loads) = self.params.schedule.apply(t0);
        let (tau_ext, _) = self.external_torque(&loads);
        self.state.tau = self.model.inverse_dynamics_from(&self.kin, &self.state.qd, &self.state.qdd, &tau_ext);
        self.state.tau_ext = tau_ext;

        let moved = (self.state.object.translation - self.start_object.translation).norm();
        self.state.dropped |= moved > self.params.drop_distance;
        let ok = finite(&self.state.q)
            && finite(&self.state.tau)
            && self.state.object_twist.is_finite()
            && self.state.object.translation.iter().all(|v| v.is_finite());
        if !ok {
            return Err(SimError::NonFinite { t: self.state.t });
        }
        Ok(&self.state)
    }

    /// F/T readings with optional Gaussian noise.
    pub fn read_ft(&mut self) -> [Wrench; 2] {
        let mut out = [self.state.contacts[0].wrench, self.state.contacts[1].wrench];
        if let Some(noise) = self.noise {
            for w in &mut out {
                let mut v = w.to_vector();
                for x in v.iter_mut() {
                    *x += noise.sample(&mut self.rng);
                }
                *w = Wrench::from_vector(&v);
            }
        }
        out
    }

    pub fn sensors(&mut self) -> Sensors {
        let ft = self.read_ft();
        Sensors {
            t: self.state.t,
            q: self.state.q.clone(),
            qd: self.state.qd.clone(),
            tau: self.state.tau.clone(),
            ft,
        }
    }
}
