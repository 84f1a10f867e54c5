//! Admittance laws producing velocity commands.
//!
//! * object: `ẋa,c = ẋa,d + Ba⁻¹(−Wa − Ka x̃a)`
//! * internal: a PID on the normal internal force produces `W*r,d`, then
//!   `ẋr,c = ẋr,d + Br⁻¹(−W̃r − Kr x̃r)` with `W̃r = Wr − W*r,d`
//! * joint: `q̈c = q̈d + Λ⁻¹(τ̂_l − B q̃̇ − K q̃)`, integrated into `q̇c`
//!
//! Wrenches are those the hands apply to the object; twists and pose errors
//! share the frame of the corresponding wrench.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::spatial::{pose_error, pose_from_error, Mat6, Pose, SpatialError, Twist, Vec6, Wrench};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ControllerError {
    #[error("{0} must be symmetric positive definite")]
    NotPositiveDefinite(&'static str),
    #[error("{0} entries must be positive")]
    NonPositive(&'static str),
    #[error(transparent)]
    Spatial(#[from] SpatialError),
}

fn check_spd(m: &Mat6, name: &'static str) -> Result<(), ControllerError> {
    if (m - m.transpose()).amax() > 1e-12 * (1.0 + m.amax()) || m.cholesky().is_none() {
        return Err(ControllerError::NotPositiveDefinite(name));
    }
    Ok(())
}

/// Diagonal gain with rotational entries `rot` and translational `lin`.
pub fn diag6(rot: f64, lin: f64) -> Mat6 {
    Mat6::from_diagonal(&Vec6::new(rot, rot, rot, lin, lin, lin))
}

/// Elementwise `2√k` on a diagonal gain.
pub fn critical_damping(k: &Mat6) -> Mat6 {
    Mat6::from_diagonal(&k.diagonal().map(|v| 2.0 * v.sqrt()))
}

/// Constant pose moving with a constant twist in pose-error coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DesiredPose {
    pub pose: Pose,
    pub velocity: Twist,
}

impl DesiredPose {
    pub fn fixed(pose: Pose) -> Self {
        Self { pose, velocity: Twist::zero() }
    }

    pub fn at(&self, t: f64) -> Pose {
        if self.velocity == Twist::zero() {
            self.pose
        } else {
            pose_from_error(&self.pose, &(self.velocity.to_vector() * t))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdmittanceGains {
    pub k: Mat6,
    pub b: Mat6,
}

impl AdmittanceGains {
    pub fn new(k: Mat6, b: Mat6) -> Result<Self, ControllerError> {
        check_spd(&k, "stiffness")?;
        check_spd(&b, "damping")?;
        Ok(Self { k, b })
    }
}

impl Default for AdmittanceGains {
    fn default() -> Self {
        let k = diag6(50.0, 500.0);
        Self { b: critical_damping(&k), k }
    }
}

fn admittance(gains: &AdmittanceGains, b_inv: &Mat6, feedforward: &Twist, wrench_err: &Vec6, pose_err: &Vec6) -> Twist {
    Twist::from_vector(&(feedforward.to_vector() + b_inv * (-wrench_err - gains.k * pose_err)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectAdmittance {
    gains: AdmittanceGains,
    b_inv: Mat6,
    pub desired: DesiredPose,
}

impl ObjectAdmittance {
    pub fn new(gains: AdmittanceGains, desired: DesiredPose) -> Self {
        let b_inv = gains.b.try_inverse().expect("damping is positive definite");
        Self { gains, b_inv, desired }
    }

    pub fn gains(&self) -> &AdmittanceGains {
        &self.gains
    }

    /// Command twist for object wrench `wa` at pose `xa`.
    pub fn command(&self, wa: &Wrench, xa: &Pose, t: f64) -> Result<Twist, ControllerError> {
        let err = pose_error(xa, &self.desired.at(t))?;
        Ok(admittance(&self.gains, &self.b_inv, &self.desired.velocity, &wa.to_vector(), &err))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PidGains {
    pub kp: f64,
    pub ki: f64,
    pub kd: f64,
    /// Symmetric clamp on the integral correction (N).
    pub integral_clamp: f64,
}

impl Default for PidGains {
    fn default() -> Self {
        Self { kp: 0.5, ki: 5.0, kd: 0.0, integral_clamp: 50.0 }
    }
}

/// PID on the normal internal force; only the `x`-force component of the
/// output differs from the nominal wrench.
#[derive(Debug, Clone, PartialEq)]
pub struct InternalPid {
    pub gains: PidGains,
    /// Nominal desired internal wrench `Wr,d`.
    pub nominal: Wrench,
    integral: f64,
}

impl InternalPid {
    pub fn new(gains: PidGains, nominal: Wrench) -> Self {
        Self { gains, nominal, integral: 0.0 }
    }

    pub fn reset(&mut self) {
        self.integral = 0.0;
    }

    /// `ki ∫ f̃ dt`, clamped.
    pub fn integral_term(&self) -> f64 {
        self.gains.ki * self.integral
    }

    pub fn update(&mut self, target: f64, wr: &Wrench, vr: &Twist, dt: f64) -> Wrench {
        let err = target - wr.force.x;
        self.integral += err * dt;
        if self.gains.ki > 0.0 {
            let bound = self.gains.integral_clamp / self.gains.ki;
            self.integral = self.integral.clamp(-bound, bound);
        }
        let correction = self.gains.kp * err + self.integral_term() - self.gains.kd * vr.linear.x;
        let mut out = self.nominal;
        out.force.x += correction;
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InternalAdmittance {
    gains: AdmittanceGains,
    b_inv: Mat6,
    /// Desired pose of `Σ2` in `Σ1`.
    pub desired: DesiredPose,
}

impl InternalAdmittance {
    pub fn new(gains: AdmittanceGains, desired: DesiredPose) -> Self {
        let b_inv = gains.b.try_inverse().expect("damping is positive definite");
        Self { gains, b_inv, desired }
    }

    pub fn gains(&self) -> &AdmittanceGains {
        &self.gains
    }

    /// Relative twist command from measured `wr`, reference `wr_ref = W*r,d`
    /// and relative pose `xr`.
    pub fn command(&self, wr_ref: &Wrench, wr: &Wrench, xr: &Pose, t: f64) -> Result<Twist, ControllerError> {
        let err = pose_error(xr, &self.desired.at(t))?;
        let w_err = wr.to_vector() - wr_ref.to_vector();
        Ok(admittance(&self.gains, &self.b_inv, &self.desired.velocity, &w_err, &err))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct JointAdmittanceGains {
    pub inertia: DVector<f64>,
    pub damping: DVector<f64>,
    pub stiffness: DVector<f64>,
}

impl JointAdmittanceGains {
    pub fn new(inertia: DVector<f64>, damping: DVector<f64>, stiffness: DVector<f64>) -> Result<Self, ControllerError> {
        for (v, name) in [(&inertia, "joint inertia"), (&damping, "joint damping"), (&stiffness, "joint stiffness")] {
            if !v.iter().all(|x| *x > 0.0 && x.is_finite()) {
                return Err(ControllerError::NonPositive(name));
            }
        }
        Ok(Self { inertia, damping, stiffness })
    }

    /// `Λ = scale·diag(M)`, given stiffness, critical damping `2√(ΛK)`.
    pub fn from_mass_matrix(mass: &DMatrix<f64>, scale: f64, stiffness: f64) -> Result<Self, ControllerError> {
        let inertia = mass.diagonal() * scale;
        let stiffness = DVector::from_element(inertia.len(), stiffness);
        let damping = inertia.zip_map(&stiffness, |l, k| 2.0 * (l * k).sqrt());
        Self::new(inertia, damping, stiffness)
    }
}

/// Constant joint reference with optional constant velocity/acceleration.
#[derive(Debug, Clone, PartialEq)]
pub struct JointReference {
    pub q: DVector<f64>,
    pub qd: DVector<f64>,
    pub qdd: DVector<f64>,
}

impl JointReference {
    pub fn fixed(q: DVector<f64>) -> Self {
        let n = q.len();
        Self { q, qd: DVector::zeros(n), qdd: DVector::zeros(n) }
    }

    pub fn at(&self, t: f64) -> (DVector<f64>, DVector<f64>) {
        (&self.q + &self.qd * t + &self.qdd * (0.5 * t * t), &self.qd + &self.qdd * t)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct JointAdmittance {
    pub gains: JointAdmittanceGains,
    pub reference: JointReference,
    command: DVector<f64>,
}

impl JointAdmittance {
    pub fn new(gains: JointAdmittanceGains, reference: JointReference) -> Self {
        let command = reference.qd.clone();
        Self { gains, reference, command }
    }

    pub fn command(&self) -> &DVector<f64> {
        &self.command
    }

    /// Overwrite the integrator, e.g. with the velocity actually commanded
    /// after bounds were applied.
    pub fn sync(&mut self, qd_cmd: &DVector<f64>) {
        self.command.copy_from(qd_cmd);
    }

    /// Integrate one step and return `q̇c`.
    pub fn update(&mut self, tau_l: &DVector<f64>, q: &DVector<f64>, qd: &DVector<f64>, t: f64, dt: f64) -> &DVector<f64> {
        let (q_d, qd_d) = self.reference.at(t);
        let g = &self.gains;
        let force = tau_l - g.damping.component_mul(&(qd - qd_d)) - g.stiffness.component_mul(&(q - q_d));
        let qdd = &self.reference.qdd + force.component_div(&g.inertia);
        self.command.axpy(dt, &qdd, 1.0);
        &self.command
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grasp::{midpoint_frame, symmetric_contacts, GraspMaps};
    use crate::spatial::Vec3;
    use approx::assert_relative_eq;

    #[test]
    fn object_equilibrium_returns_feedforward() {
        let x = Pose::from_xyz_rpy([0.3, 0.0, -0.2], [0.0, 0.1, 0.0]);
        let v = Twist::new(Vec3::new(0.0, 0.0, 0.01), Vec3::new(0.02, 0.0, 0.0));
        let ctl = ObjectAdmittance::new(AdmittanceGains::default(), DesiredPose { pose: x, velocity: v });
        let out = ctl.command(&Wrench::zero(), &x, 0.0).unwrap();
        assert_relative_eq!(out.to_vector(), v.to_vector(), epsilon = 1e-12);
    }

    /// Close the loop on the kinematic object `ẋ = ẋc` and return the
    /// settled offset.
    fn settle_object(gains: AdmittanceGains, wa: Wrench) -> Vec6 {
        let ctl = ObjectAdmittance::new(gains, DesiredPose::fixed(Pose::identity()));
        let mut x = Pose::identity();
        let dt = 1e-3;
        for k in 0..20_000 {
            let v = ctl.command(&wa, &x, k as f64 * dt).unwrap();
            x = pose_from_error(&x, &(v.to_vector() * dt));
        }
        pose_error(&x, &Pose::identity()).unwrap()
    }

    #[test]
    fn object_force_step_settles_at_compliance_offset() {
        let offset = settle_object(AdmittanceGains::default(), Wrench::from_force(Vec3::new(5.0, 0.0, 0.0)));
        assert_relative_eq!(offset[3], -0.01, epsilon = 1e-9);
        assert!(offset.rows(0, 3).amax() < 1e-12 && offset.rows(4, 2).amax() < 1e-12);
    }

    #[test]
    fn pure_moment_commands_only_rotation() {
        let ctl = ObjectAdmittance::new(AdmittanceGains::default(), DesiredPose::fixed(Pose::identity()));
        let out = ctl.command(&Wrench::new(Vec3::new(0.0, 0.3, 0.0), Vec3::zeros()), &Pose::identity(), 0.0).unwrap();
        assert_eq!(out.linear, Vec3::zeros());
        assert!(out.angular.y < 0.0);
    }

    #[test]
    fn pid_zero_error_returns_nominal() {
        let nominal = Wrench::new(Vec3::new(0.1, 0.2, 0.3), Vec3::new(1.0, 2.0, 3.0));
        let mut pid = InternalPid::new(PidGains::default(), nominal);
        let out = pid.update(1.0, &Wrench::from_force(Vec3::new(1.0, 9.0, 9.0)), &Twist::zero(), 1e-3);
        assert_eq!(out, nominal);
    }

    #[test]
    fn pid_only_touches_normal_component() {
        let mut pid = InternalPid::new(PidGains { kd: 0.3, ..Default::default() }, Wrench::zero());
        let out = pid.update(10.0, &Wrench::new(Vec3::new(1.0, 1.0, 1.0), Vec3::new(2.0, 5.0, 5.0)), &Twist::new(Vec3::zeros(), Vec3::new(0.1, 0.2, 0.3)), 1e-3);
        let v = out.to_vector();
        for i in [0, 1, 2, 4, 5] {
            assert_eq!(v[i], 0.0);
        }
        assert!(v[3] != 0.0);
    }

    #[test]
    fn pid_discrete_integral() {
        let mut pid = InternalPid::new(PidGains { kp: 1.0, ki: 10.0, kd: 0.0, integral_clamp: 50.0 }, Wrench::zero());
        let mut out = Wrench::zero();
        for _ in 0..100 {
            out = pid.update(1.0, &Wrench::zero(), &Twist::zero(), 1e-3);
        }
        assert_relative_eq!(out.force.x, 2.0, epsilon = 1e-12);
    }

    #[test]
    fn pid_integral_is_clamped() {
        let mut pid = InternalPid::new(PidGains { kp: 0.0, ki: 10.0, kd: 0.0, integral_clamp: 50.0 }, Wrench::zero());
        for _ in 0..100_000 {
            pid.update(100.0, &Wrench::zero(), &Twist::zero(), 1e-3);
        }
        assert_relative_eq!(pid.integral_term(), 50.0, epsilon = 1e-9);
    }

    #[test]
    fn internal_equilibrium_and_deficit_sign() {
        let c = symmetric_contacts(Vec3::new(0.33, 0.0, -0.25), 0.1);
        let maps = GraspMaps::build(c, midpoint_frame(&c)).unwrap();
        let xr = maps.relative_pose();
        let ctl = InternalAdmittance::new(AdmittanceGains::default(), DesiredPose::fixed(xr));
        let w = Wrench::from_force(Vec3::new(10.0, 0.0, 0.0));
        let eq = ctl.command(&w, &w, &xr, 0.0).unwrap();
        assert_eq!(eq, Twist::zero());
        // measured squeeze below the reference: the hands must close in
        let measured = Wrench::from_force(Vec3::new(6.0, 0.0, 0.0));
        let vr = ctl.command(&w, &measured, &xr, 0.0).unwrap();
        assert!(vr.linear.x > 0.0);
        let cmd = maps.command_base_velocities(&Twist::zero(), &vr);
        let (v1, v2) = (cmd.fixed_rows::<3>(3), cmd.fixed_rows::<3>(9));
        let gap_rate = (c[0].translation - c[1].translation).dot(&(v1 - v2).into_owned());
        assert!(gap_rate < 0.0, "contacts must approach");
    }

    #[test]
    fn internal_constant_error_steady_state() {
        let gains = AdmittanceGains::default();
        let ctl = InternalAdmittance::new(gains.clone(), DesiredPose::fixed(Pose::identity()));
        let w_err = Wrench::from_force(Vec3::new(-4.0, 0.0, 0.0));
        let mut x = Pose::identity();
        for k in 0..20_000 {
            let v = ctl.command(&Wrench::zero(), &w_err, &x, k as f64 * 1e-3).unwrap();
            x = pose_from_error(&x, &(v.to_vector() * 1e-3));
        }
        let e = pose_error(&x, &Pose::identity()).unwrap();
        assert_relative_eq!(e[3], 4.0 / gains.k[(3, 3)], epsilon = 1e-9);
    }

    fn joint(n: usize, k: f64, lam: f64) -> JointAdmittance {
        let gains = JointAdmittanceGains::new(
            DVector::from_element(n, lam),
            DVector::from_element(n, 2.0 * (lam * k).sqrt()),
            DVector::from_element(n, k),
        )
        .unwrap();
        JointAdmittance::new(gains, JointReference::fixed(DVector::zeros(n)))
    }

    #[test]
    fn joint_equilibrium() {
        let mut ctl = joint(3, 20.0, 0.1);
        let out = ctl.update(&DVector::zeros(3), &DVector::zeros(3), &DVector::zeros(3), 0.0, 1e-3);
        assert_eq!(out, &DVector::zeros(3));
    }

    #[test]
    fn joint_step_is_critically_damped_and_settles() {
        let mut ctl = joint(2, 20.0, 0.1);
        let tau = DVector::from_vec(vec![2.0, 0.0]);
        let mut q = DVector::zeros(2);
        let mut peak: f64 = 0.0;
        let dt = 1e-3;
        for k in 0..5000 {
            let qd = ctl.update(&tau, &q, &ctl.command().clone(), k as f64 * dt, dt).clone();
            q.axpy(dt, &qd, 1.0);
            peak = peak.max(q[0]);
        }
        assert_relative_eq!(q[0], 0.1, epsilon = 0.002);
        assert!(peak <= 0.1 * 1.01, "overshoot {peak}");
        assert_eq!(q[1], 0.0);
    }

    #[test]
    fn gains_are_validated() {
        assert!(AdmittanceGains::new(diag6(-1.0, 1.0), diag6(1.0, 1.0)).is_err());
        assert!(JointAdmittanceGains::new(DVector::from_element(2, 1.0), DVector::from_element(2, 0.0), DVector::from_element(2, 1.0)).is_err());
        let m = DMatrix::identity(3, 3) * 0.4;
        let g = JointAdmittanceGains::from_mass_matrix(&m, 0.5, 20.0).unwrap();
        assert_relative_eq!(g.damping[0], 2.0 * (0.2f64 * 20.0).sqrt(), epsilon = 1e-12);
    }
}
