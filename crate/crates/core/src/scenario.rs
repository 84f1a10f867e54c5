//! Scenario configuration, the 1 kHz control loop and its telemetry.
//!
//! A cycle reads the sensors, updates the momentum observer, builds the grasp
//! maps, splits the measured wrenches, picks the internal-force target
//! (constant or optimized), runs the PID and the three admittance laws, solves
//! the two-level QP and finally steps the plant. Each logged cycle becomes one
//! CSV row; [`SummaryBuilder`] condenses rows into a [`RunSummary`] either
//! while running or later from the file.

use std::collections::HashMap;
use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use serde::Deserialize;
use thiserror::Error;

use crate::controllers::{
    AdmittanceGains, ControllerError, DesiredPose, InternalAdmittance, InternalPid, JointAdmittance,
    JointAdmittanceGains, JointReference, ObjectAdmittance, PidGains,
};
use crate::grasp::{midpoint_frame, wrench_to_local, GraspError, GraspMaps, ObjectFrameTracker};
use crate::hqp::{compute_bounds, Hqp, HqpError};
use crate::model::{DualArmModel, ModelError};
use crate::observer::{MomentumObserver, ObserverInputs};
use crate::sim::{
    ContactPlantParams, DisturbanceEvent, DisturbanceSchedule, ObjectParams, Sensors, SimError, SimParams,
    Simulator, StackEvent,
};
use crate::spatial::{Mat6, Pose, Twist, Vec6, Wrench};
use crate::wrenchopt::{FrictionParams, WrenchOptimizer};

/// Version of the CSV column layout.
pub const LOG_SCHEMA_VERSION: u32 = 1;
/// Object displacement (m) that raises the drop alarm in summaries.
pub const DROP_ALARM_DISTANCE: f64 = 0.05;
/// Minimum stick time separating two slip events (s).
pub const SLIP_EVENT_GAP: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode", deny_unknown_fields)]
pub enum WrenchMode {
    /// Fixed normal internal force (N).
    Constant { value: f64 },
    /// Smallest force keeping both contacts inside their friction cones.
    Optimized,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdmittanceConfig {
    /// Diagonal stiffness `[rot ×3, lin ×3]`.
    pub k: [f64; 6],
    /// Diagonal damping; critical (`2√k`) when omitted.
    #[serde(default)]
    pub b: Option<[f64; 6]>,
}

impl Default for AdmittanceConfig {
    fn default() -> Self {
        Self { k: [50.0, 50.0, 50.0, 500.0, 500.0, 500.0], b: None }
    }
}

impl AdmittanceConfig {
    pub fn gains(&self) -> Result<AdmittanceGains, ControllerError> {
        let k = Mat6::from_diagonal(&Vec6::from_column_slice(&self.k));
        let b = match self.b {
            Some(b) => Mat6::from_diagonal(&Vec6::from_column_slice(&b)),
            None => Mat6::from_diagonal(&k.diagonal().map(|v| 2.0 * v.max(0.0).sqrt())),
        };
        AdmittanceGains::new(k, b)
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PidConfig {
    pub kp: f64,
    pub ki: f64,
    pub kd: f64,
    pub integral_clamp: f64,
}

impl Default for PidConfig {
    fn default() -> Self {
        let g = PidGains::default();
        Self { kp: g.kp, ki: g.ki, kd: g.kd, integral_clamp: g.integral_clamp }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct JointGainsConfig {
    /// `Λ = inertia_scale·diag(M(q₀))`.
    pub inertia_scale: f64,
    pub stiffness: f64,
}

impl Default for JointGainsConfig {
    fn default() -> Self {
        Self { inertia_scale: 0.5, stiffness: 20.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GainsConfig {
    pub object: AdmittanceConfig,
    pub internal: AdmittanceConfig,
    pub pid: PidConfig,
    pub joint: JointGainsConfig,
    /// Momentum observer gain (1/s).
    pub observer: f64,
    /// Level-1 damping `ρ`.
    pub rho: f64,
}

impl Default for GainsConfig {
    fn default() -> Self {
        Self {
            object: AdmittanceConfig::default(),
            internal: AdmittanceConfig::default(),
            pid: PidConfig::default(),
            joint: JointGainsConfig::default(),
            observer: crate::observer::DEFAULT_GAIN,
            rho: crate::hqp::DEFAULT_RHO,
        }
    }
}

/// Friction the controller assumes (kept below the plant's true values).
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FrictionConfig {
    pub mu: f64,
    pub lambda: f64,
    pub facets: usize,
}

impl Default for FrictionConfig {
    fn default() -> Self {
        Self { mu: 0.15, lambda: 0.01, facets: 8 }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlantConfig {
    pub tau_m: f64,
    pub substeps: usize,
    pub ft_noise: f64,
    pub drop_distance: f64,
    pub contact: ContactPlantParams,
}

impl Default for PlantConfig {
    fn default() -> Self {
        let p = SimParams::default();
        Self {
            tau_m: p.tau_m,
            substeps: p.substeps,
            ft_noise: p.ft_noise,
            drop_distance: p.drop_distance,
            contact: p.contact,
        }
    }
}

fn default_dt() -> f64 {
    1e-3
}

fn default_horizon() -> f64 {
    1e-3
}

fn default_squeeze() -> f64 {
    12.0
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    /// Model file, relative to the config file; the bundled model if omitted.
    #[serde(default)]
    pub model: Option<PathBuf>,
    pub duration: f64,
    #[serde(default = "default_dt")]
    pub dt: f64,
    /// Unlogged settling time before `t = 0`.
    #[serde(default)]
    pub settle: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub output: Option<PathBuf>,
    #[serde(default)]
    pub initial_q: Option<Vec<f64>>,
    /// Normal force on each contact at start (N).
    #[serde(default = "default_squeeze")]
    pub initial_squeeze: f64,
    /// Look-ahead time turning position limits into velocity bounds (s).
    #[serde(default = "default_horizon")]
    pub bound_horizon: f64,
    pub wrench: WrenchMode,
    #[serde(default)]
    pub object: ObjectParams,
    #[serde(default)]
    pub friction: FrictionConfig,
    #[serde(default)]
    pub gains: GainsConfig,
    #[serde(default)]
    pub plant: PlantConfig,
    #[serde(default)]
    pub stacking: Vec<StackEvent>,
    #[serde(default)]
    pub disturbance: Vec<DisturbanceEvent>,
    /// Directory of the config file; relative paths resolve against it.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{0}")]
    Parse(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Severity {
    Warning,
    Error,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Diagnostic {
    pub severity: Severity,
    pub field: String,
    pub message: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = match self.severity {
            Severity::Warning => "warning",
            Severity::Error => "error",
        };
        write!(f, "{tag}: {}: {}", self.field, self.message)
    }
}

pub fn has_errors(diags: &[Diagnostic]) -> bool {
    diags.iter().any(|d| d.severity == Severity::Error)
}

impl ScenarioConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let src = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_toml_str(&src, base)
    }

    pub fn from_toml_str(src: &str, base_dir: impl Into<PathBuf>) -> Result<Self, ConfigError> {
        let mut cfg: ScenarioConfig = toml::from_str(src).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.base_dir = base_dir.into();
        Ok(cfg)
    }

    pub fn model_path(&self) -> Option<PathBuf> {
        self.model.as_ref().map(|m| self.base_dir.join(m))
    }

    pub fn load_model(&self) -> Result<DualArmModel, ModelError> {
        match self.model_path() {
            Some(p) => DualArmModel::load(p),
            None => Ok(DualArmModel::default()),
        }
    }

    pub fn initial_q(&self, model: &DualArmModel) -> DVector<f64> {
        match &self.initial_q {
            Some(q) => DVector::from_column_slice(q),
            None => DVector::zeros(model.dof()),
        }
    }

    pub fn sim_params(&self) -> SimParams {
        SimParams {
            dt: self.dt,
            substeps: self.plant.substeps,
            tau_m: self.plant.tau_m,
            object: self.object.clone(),
            contact: self.plant.contact.clone(),
            stacking: self.stacking.clone(),
            schedule: DisturbanceSchedule { events: self.disturbance.clone() },
            ft_noise: self.plant.ft_noise,
            seed: self.seed,
            drop_distance: self.plant.drop_distance,
        }
    }

    pub fn friction_params(&self, model: &DualArmModel) -> FrictionParams {
        FrictionParams {
            mu: [self.friction.mu; 2],
            lambda: [self.friction.lambda; 2],
            patch: [model.arms[0].patch, model.arms[1].patch],
            facets: self.friction.facets,
        }
    }

    /// Every problem found without running; an empty list means runnable.
    pub fn validate(&self) -> Vec<Diagnostic> {
        let mut out = Vec::new();
        let mut err = |field: &str, message: String| {
            out.push(Diagnostic { severity: Severity::Error, field: field.into(), message })
        };
        let positive = |v: f64| v > 0.0 && v.is_finite();
        if !positive(self.dt) {
            err("dt", format!("must be positive, got {}", self.dt));
        }
        if !positive(self.duration) {
            err("duration", format!("must be positive, got {}", self.duration));
        }
        if !(self.settle >= 0.0 && self.settle.is_finite()) {
            err("settle", format!("must be non-negative, got {}", self.settle));
        }
        if !positive(self.bound_horizon) {
            err("bound_horizon", format!("must be positive, got {}", self.bound_horizon));
        }
        if !(self.initial_squeeze >= 0.0 && self.initial_squeeze.is_finite()) {
            err("initial_squeeze", format!("must be non-negative, got {}", self.initial_squeeze));
        }
        if let WrenchMode::Constant { value } = self.wrench {
            if !positive(value) {
                err("wrench.value", format!("must be positive, got {value}"));
            }
        }
        if !positive(self.object.mass) {
            err("object.mass", format!("must be positive, got {}", self.object.mass));
        } else if let Err(e) = self.object.validate() {
            err("object", e.to_string());
        }
        if let Err(e) = self.plant.contact.validate() {
            err("plant.contact", e.to_string());
        }
        if !positive(self.plant.tau_m) {
            err("plant.tau_m", "must be positive".into());
        }
        if self.plant.substeps == 0 {
            err("plant.substeps", "must be at least 1".into());
        }
        if !(self.plant.ft_noise >= 0.0) {
            err("plant.ft_noise", "must be non-negative".into());
        }
        if !positive(self.plant.drop_distance) {
            err("plant.drop_distance", "must be positive".into());
        }
        if !positive(self.friction.mu) {
            err("friction.mu", "must be positive".into());
        }
        if !positive(self.friction.lambda) {
            err("friction.lambda", "must be positive".into());
        }
        if self.friction.facets < 3 {
            err("friction.facets", "need at least 3".into());
        }
        for (name, a) in [("gains.object", &self.gains.object), ("gains.internal", &self.gains.internal)] {
            if let Err(e) = a.gains() {
                err(name, e.to_string());
            }
        }
        let pid = &self.gains.pid;
        if !(pid.kp >= 0.0 && pid.ki >= 0.0 && pid.kd >= 0.0 && pid.integral_clamp > 0.0) {
            err("gains.pid", "gains must be non-negative and the clamp positive".into());
        }
        if !positive(self.gains.joint.inertia_scale) || !positive(self.gains.joint.stiffness) {
            err("gains.joint", "inertia_scale and stiffness must be positive".into());
        }
        if !positive(self.gains.observer) {
            err("gains.observer", "must be positive".into());
        }
        if !(self.gains.rho >= 0.0 && self.gains.rho.is_finite()) {
            err("gains.rho", "must be non-negative".into());
        }
        for (i, s) in self.stacking.iter().enumerate() {
            if !(positive(s.mass) && s.ramp >= 0.0 && s.t.is_finite()) {
                err(&format!("stacking[{i}]"), "needs positive mass, non-negative ramp and finite time".into());
            }
        }

        let model = match self.load_model() {
            Ok(m) => Some(m),
            Err(e) => {
                let field = "model";
                err(field, match self.model_path() {
                    Some(p) => format!("{}: {e}", p.display()),
                    None => e.to_string(),
                });
                None
            }
        };
        if let Some(model) = &model {
            for (i, e) in self.disturbance.iter().enumerate() {
                if let Err(x) = e.validate(model) {
                    err(&format!("disturbance[{i}]"), x.to_string());
                }
            }
            let q0 = self.initial_q(model);
            if q0.len() != model.dof() {
                err("initial_q", format!("expected {} entries, got {}", model.dof(), q0.len()));
            } else {
                let (lo, hi) = (model.q_min(), model.q_max());
                if let Some(j) = (0..q0.len()).find(|&j| q0[j] < lo[j] || q0[j] > hi[j]) {
                    err("initial_q", format!("joint {j} starts outside its position limits"));
                } else if let Ok(kin) = model.forward_kinematics(&q0) {
                    let contacts = [*kin.contact(0), *kin.contact(1)];
                    if let Err(e) = GraspMaps::build(contacts, midpoint_frame(&contacts)) {
                        err("initial_q", e.to_string());
                    }
                }
            }
        }

        let plant = &self.plant.contact;
        if self.friction.mu >= plant.mu {
            out.push(Diagnostic {
                severity: Severity::Warning,
                field: "friction.mu".into(),
                message: format!("controller μ = {} is not below the plant μ* = {}; the optimized squeeze is not conservative", self.friction.mu, plant.mu),
            });
        }
        if self.friction.lambda >= plant.lambda {
            out.push(Diagnostic {
                severity: Severity::Warning,
                field: "friction.lambda".into(),
                message: format!("controller λ = {} is not below the plant λ* = {}", self.friction.lambda, plant.lambda),
            });
        }
        out
    }
}

#[derive(Debug, Error)]
pub enum ControlError {
    #[error(transparent)]
    Grasp(#[from] GraspError),
    #[error(transparent)]
    Controller(#[from] ControllerError),
    #[error(transparent)]
    Hqp(#[from] HqpError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Everything one control cycle computed.
#[derive(Debug, Clone)]
pub struct ControlOutput {
    pub qd_cmd: DVector<f64>,
    pub qd_first: DVector<f64>,
    pub tau_ext: DVector<f64>,
    pub tau_l: DVector<f64>,
    /// Measured contact wrenches in their contact frames.
    pub contact_wrenches: [Wrench; 2],
    pub wa: Wrench,
    pub wr: Wrench,
    pub wr_dx_star: f64,
    pub hierarchy_residual: f64,
    pub relaxed: bool,
    pub active_bounds: Vec<usize>,
    /// Wall time of the cycle, plant excluded.
    pub elapsed: Duration,
}

/// Controller stack fed by [`Sensors`] only.
pub struct Controller {
    model: DualArmModel,
    observer: MomentumObserver,
    object: ObjectAdmittance,
    internal: InternalAdmittance,
    pid: InternalPid,
    joint: JointAdmittance,
    hqp: Hqp,
    frame: ObjectFrameTracker,
    mode: WrenchMode,
    optimizer: WrenchOptimizer,
    horizon: f64,
    dt: f64,
}

impl fmt::Debug for Controller {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Controller").field("mode", &self.mode).finish_non_exhaustive()
    }
}

fn stack_wrenches(w: &[Wrench; 2]) -> DVector<f64> {
    DVector::from_iterator(12, w[0].to_vector().iter().chain(w[1].to_vector().iter()).copied())
}

impl Controller {
    /// Controller holding the grasp seen in `initial`: desired object and
    /// relative poses are taken from it and the observer starts at the grasp
    /// reaction.
    pub fn new(model: DualArmModel, cfg: &ScenarioConfig, initial: &Sensors) -> Result<Self, ControlError> {
        let kin = model.forward_kinematics(&initial.q)?;
        let contacts = [*kin.contact(0), *kin.contact(1)];
        let mass = model.mass_matrix_from(&kin);
        let jc = model.contact_jacobian_from(&kin);
        let mut observer = MomentumObserver::uniform(model.dof(), cfg.gains.observer);
        observer.reset_with(&mass, &initial.qd, &-(jc.transpose() * stack_wrenches(&initial.ft)));
        let object = ObjectAdmittance::new(cfg.gains.object.gains()?, DesiredPose::fixed(midpoint_frame(&contacts)));
        let internal = InternalAdmittance::new(
            cfg.gains.internal.gains()?,
            DesiredPose::fixed(contacts[0].inverse().compose(&contacts[1])),
        );
        let nominal = match cfg.wrench {
            WrenchMode::Constant { value } => value,
            WrenchMode::Optimized => cfg.initial_squeeze,
        };
        let p = &cfg.gains.pid;
        let pid = InternalPid::new(
            PidGains { kp: p.kp, ki: p.ki, kd: p.kd, integral_clamp: p.integral_clamp },
            Wrench::from_force(nalgebra::Vector3::new(nominal, 0.0, 0.0)),
        );
        let jg = JointAdmittanceGains::from_mass_matrix(&mass, cfg.gains.joint.inertia_scale, cfg.gains.joint.stiffness)?;
        let joint = JointAdmittance::new(jg, JointReference::fixed(initial.q.clone()));
        let optimizer = WrenchOptimizer::new(cfg.friction_params(&model))
            .map_err(|e| ControllerError::NonPositive(if matches!(e, crate::wrenchopt::WrenchOptError::InvalidParams(_)) { "friction parameters" } else { "friction" }))?;
        Ok(Self {
            observer,
            object,
            internal,
            pid,
            joint,
            hqp: Hqp::new(cfg.gains.rho),
            frame: ObjectFrameTracker::new(&contacts),
            mode: cfg.wrench.clone(),
            optimizer,
            horizon: cfg.bound_horizon,
            dt: cfg.dt,
            model,
        })
    }

    pub fn set_dump(&mut self, w: Box<dyn Write + Send>) {
        self.hqp.set_dump(w);
    }

    pub fn observer(&self) -> &MomentumObserver {
        &self.observer
    }

    /// One control cycle at time `t`.
    pub fn step(&mut self, s: &Sensors, t: f64) -> Result<ControlOutput, ControlError> {
        let start = Instant::now();
        let model = &self.model;
        let kin = model.forward_kinematics(&s.q)?;
        let mass = model.mass_matrix_from(&kin);
        let bias = model.bias_terms_from(&kin, &s.q, &s.qd);
        let friction = model.friction_torque(&s.qd);
        let jc: DMatrix<f64> = model.contact_jacobian_from(&kin);
        let wc = stack_wrenches(&s.ft);
        self.observer.update(
            &ObserverInputs {
                mass: &mass,
                coriolis_transpose: &bias.coriolis_transpose,
                gravity: &bias.gravity,
                friction: &friction,
                qd: &s.qd,
                tau: &s.tau,
                contact_jacobian: &jc,
                contact_wrenches: &wc,
            },
            self.dt,
        );

        let contacts = [*kin.contact(0), *kin.contact(1)];
        let xa = self.frame.object_pose(&contacts);
        let maps = GraspMaps::build(contacts, xa)?;
        let local = [wrench_to_local(&contacts[0], &s.ft[0]), wrench_to_local(&contacts[1], &s.ft[1])];
        let (wa, wr) = maps.decompose(&local[0], &local[1]);
        let v = model.contact_twists(&jc, &s.qd);
        let (_, vr) = maps.task_velocities_from_base(&v[0], &v[1]);

        let target = match self.mode {
            WrenchMode::Constant { value } => value,
            WrenchMode::Optimized => self.optimizer.update(&maps, &wa).wr_dx_star,
        };
        let wr_ref = self.pid.update(target, &wr, &vr, self.dt);
        let va_c: Twist = self.object.command(&wa, &xa, t)?;
        let vr_c = self.internal.command(&wr_ref, &wr, &maps.relative_pose(), t)?;
        let xdot = maps.command_base_velocities(&va_c, &vr_c);
        let xdot = DVector::from_column_slice(xdot.as_slice());

        let qd_c = self.joint.update(self.observer.tau_l(), &s.q, &s.qd, t, self.dt).clone();
        let bounds = compute_bounds(model, &s.q, self.horizon);
        let res = self.hqp.solve(&jc, &xdot, &qd_c, &bounds)?;
        self.joint.sync(&res.qd_cmd);
        let elapsed = start.elapsed();
        Ok(ControlOutput {
            qd_cmd: res.qd_cmd,
            qd_first: res.qd_first,
            tau_ext: self.observer.tau_ext().clone(),
            tau_l: self.observer.tau_l().clone(),
            contact_wrenches: local,
            wa,
            wr,
            wr_dx_star: target,
            hierarchy_residual: res.hierarchy_residual,
            relaxed: res.relaxed,
            active_bounds: res.active_bounds,
            elapsed,
        })
    }
}

/// One CSV row.
#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub t: f64,
    pub q: Vec<f64>,
    pub qd_cmd: Vec<f64>,
    pub tau_ext: Vec<f64>,
    pub tau_l: Vec<f64>,
    pub w1: [f64; 6],
    pub w2: [f64; 6],
    pub wa: [f64; 6],
    pub wr: [f64; 6],
    pub wr_dx_star: f64,
    /// `[w, x, y, z]`
    pub object_quat: [f64; 4],
    pub object_pos: [f64; 3],
    pub slip: [bool; 2],
    pub hqp_residual: f64,
    /// Control-step wall time (s); zero when timing is disabled.
    pub step_time: f64,
}

const WRENCH_SUFFIX: [&str; 6] = ["mx", "my", "mz", "fx", "fy", "fz"];

/// Column names for a robot with `n` joints, in file order.
pub fn log_header(n: usize) -> Vec<String> {
    let mut h = vec!["t".to_string()];
    for prefix in ["q", "qd_cmd", "tau_ext", "tau_l"] {
        h.extend((0..n).map(|i| format!("{prefix}{i}")));
    }
    for w in ["w1", "w2", "wa", "wr"] {
        h.extend(WRENCH_SUFFIX.iter().map(|s| format!("{w}_{s}")));
    }
    h.push("wr_dx_star".into());
    h.extend(["obj_qw", "obj_qx", "obj_qy", "obj_qz", "obj_x", "obj_y", "obj_z"].map(String::from));
    h.extend(["slip1", "slip2", "hqp_residual", "step_time"].map(String::from));
    h
}

fn num(v: f64) -> String {
    format!("{v:.8e}")
}

impl LogRow {
    pub fn dof(&self) -> usize {
        self.q.len()
    }

    pub fn record(&self) -> Vec<String> {
        let mut r = vec![num(self.t)];
        for v in [&self.q, &self.qd_cmd, &self.tau_ext, &self.tau_l] {
            r.extend(v.iter().map(|x| num(*x)));
        }
        for w in [&self.w1, &self.w2, &self.wa, &self.wr] {
            r.extend(w.iter().map(|x| num(*x)));
        }
        r.push(num(self.wr_dx_star));
        r.extend(self.object_quat.iter().chain(self.object_pos.iter()).map(|x| num(*x)));
        r.extend(self.slip.iter().map(|s| u8::from(*s).to_string()));
        r.push(num(self.hqp_residual));
        r.push(num(self.step_time));
        r
    }

    /// Parse a record using column positions from `columns`.
    pub fn parse(columns: &Columns, rec: &csv::StringRecord) -> Result<Self, LogError> {
        let get = |name: &str| -> Result<f64, LogError> {
            let i = *columns.index.get(name).ok_or_else(|| LogError::Schema(format!("missing column {name}")))?;
            let s = rec.get(i).ok_or_else(|| LogError::Schema(format!("short row, no column {name}")))?;
            s.trim().parse::<f64>().map_err(|_| LogError::Schema(format!("bad number {s:?} in column {name}")))
        };
        let n = columns.dof;
        let vec = |p: &str| (0..n).map(|i| get(&format!("{p}{i}"))).collect::<Result<Vec<_>, _>>();
        let w6 = |p: &str| -> Result<[f64; 6], LogError> {
            let mut out = [0.0; 6];
            for (k, s) in WRENCH_SUFFIX.iter().enumerate() {
                out[k] = get(&format!("{p}_{s}"))?;
            }
            Ok(out)
        };
        Ok(Self {
            t: get("t")?,
            q: vec("q")?,
            qd_cmd: vec("qd_cmd")?,
            tau_ext: vec("tau_ext")?,
            tau_l: vec("tau_l")?,
            w1: w6("w1")?,
            w2: w6("w2")?,
            wa: w6("wa")?,
            wr: w6("wr")?,
            wr_dx_star: get("wr_dx_star")?,
            object_quat: [get("obj_qw")?, get("obj_qx")?, get("obj_qy")?, get("obj_qz")?],
            object_pos: [get("obj_x")?, get("obj_y")?, get("obj_z")?],
            slip: [get("slip1")? != 0.0, get("slip2")? != 0.0],
            hqp_residual: get("hqp_residual")?,
            step_time: get("step_time")?,
        })
    }

    /// The row as it reads back from the log, every number rounded to the
    /// logged precision.
    pub fn rounded(&self) -> Self {
        let r = |v: f64| num(v).parse::<f64>().unwrap_or(v);
        let rv = |v: &[f64]| v.iter().map(|x| r(*x)).collect::<Vec<_>>();
        Self {
            t: r(self.t),
            q: rv(&self.q),
            qd_cmd: rv(&self.qd_cmd),
            tau_ext: rv(&self.tau_ext),
            tau_l: rv(&self.tau_l),
            w1: self.w1.map(r),
            w2: self.w2.map(r),
            wa: self.wa.map(r),
            wr: self.wr.map(r),
            wr_dx_star: r(self.wr_dx_star),
            object_quat: self.object_quat.map(r),
            object_pos: self.object_pos.map(r),
            slip: self.slip,
            hqp_residual: r(self.hqp_residual),
            step_time: r(self.step_time),
        }
    }

    pub fn object_pose(&self) -> Pose {
        Pose::from_quaternion_wxyz(self.object_quat, nalgebra::Vector3::from(self.object_pos))
    }
}

#[derive(Debug, Error)]
pub enum LogError {
    #[error("log i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("log csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("log schema: {0}")]
    Schema(String),
}

/// Column lookup built from a header row.
#[derive(Debug, Clone)]
pub struct Columns {
    index: HashMap<String, usize>,
    pub dof: usize,
}

impl Columns {
    pub fn from_header(h: &csv::StringRecord) -> Result<Self, LogError> {
        let index: HashMap<String, usize> = h.iter().enumerate().map(|(i, s)| (s.to_string(), i)).collect();
        let dof = (0..).take_while(|i| index.contains_key(&format!("q{i}"))).count();
        if dof == 0 {
            return Err(LogError::Schema("no joint columns".into()));
        }
        let expected = log_header(dof);
        let actual: Vec<&str> = h.iter().collect();
        if actual != expected.iter().map(String::as_str).collect::<Vec<_>>() {
            return Err(LogError::Schema(format!("header does not match schema version {LOG_SCHEMA_VERSION}")));
        }
        Ok(Self { index, dof })
    }
}

/// Read every row of a log file.
pub fn read_log(path: impl AsRef<Path>) -> Result<Vec<LogRow>, LogError> {
    let mut rd = csv::Reader::from_path(path)?;
    let cols = Columns::from_header(rd.headers()?)?;
    rd.records().map(|r| LogRow::parse(&cols, &r?)).collect()
}

/// Acceptance-relevant numbers for one run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub rows: usize,
    pub duration: f64,
    pub slip_events: Vec<f64>,
    /// Largest `|q − q(0)|` per joint.
    pub max_joint_deviation: Vec<f64>,
    pub max_q: Vec<f64>,
    pub min_q: Vec<f64>,
    /// Smallest distance to a position limit and its joint, when limits are known.
    pub min_limit_distance: Option<(f64, usize)>,
    /// Largest object displacement from its `t = 0` pose (m).
    pub max_position_deviation: f64,
    /// Per-axis largest absolute displacement (m).
    pub max_axis_displacement: [f64; 3],
    /// Largest object rotation from its `t = 0` pose (deg).
    pub max_orientation_deviation: f64,
    /// Largest `|τ̂_l|` over the joints of each arm.
    pub max_tau_l: [f64; 2],
    pub max_hierarchy_residual: f64,
    pub step_time_mean: f64,
    pub step_time_p99: f64,
    pub step_time_max: f64,
    pub final_wr_x: f64,
    pub final_wr_dx_star: f64,
    pub dropped: bool,
}

impl RunSummary {
    pub fn slipped(&self) -> bool {
        !self.slip_events.is_empty()
    }
}

impl fmt::Display for RunSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let list = |v: &[f64]| v.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>().join(", ");
        writeln!(f, "rows                      {}", self.rows)?;
        writeln!(f, "duration_s                {:.3}", self.duration)?;
        writeln!(f, "slip_events               {}", self.slip_events.len())?;
        writeln!(f, "slip_times_s              [{}]", list(&self.slip_events))?;
        writeln!(f, "max_joint_deviation_rad   [{}]", list(&self.max_joint_deviation))?;
        writeln!(f, "max_q_rad                 [{}]", list(&self.max_q))?;
        match self.min_limit_distance {
            Some((d, j)) => writeln!(f, "min_limit_distance_rad    {d:.6} (joint {j})")?,
            None => writeln!(f, "min_limit_distance_rad    n/a")?,
        }
        writeln!(f, "max_position_deviation_m  {:.6e}", self.max_position_deviation)?;
        writeln!(f, "max_axis_displacement_m   [{}]", self.max_axis_displacement.map(|x| format!("{x:.6e}")).join(", "))?;
        writeln!(f, "max_orientation_dev_deg   {:.6e}", self.max_orientation_deviation)?;
        writeln!(f, "max_tau_l_nm              [{:.6e}, {:.6e}]", self.max_tau_l[0], self.max_tau_l[1])?;
        writeln!(f, "max_hierarchy_residual    {:.3e}", self.max_hierarchy_residual)?;
        writeln!(f, "step_time_mean_s          {:.3e}", self.step_time_mean)?;
        writeln!(f, "step_time_p99_s           {:.3e}", self.step_time_p99)?;
        writeln!(f, "step_time_max_s           {:.3e}", self.step_time_max)?;
        writeln!(f, "final_wr_x_n              {:.4}", self.final_wr_x)?;
        writeln!(f, "final_wr_dx_star_n        {:.4}", self.final_wr_dx_star)?;
        writeln!(f, "alarm_slip                {}", self.slipped())?;
        write!(f, "alarm_dropped             {}", self.dropped)
    }
}

/// Streaming reduction of log rows into a [`RunSummary`].
#[derive(Debug, Clone)]
pub struct SummaryBuilder {
    limits: Option<(Vec<f64>, Vec<f64>)>,
    first: Option<LogRow>,
    last: Option<LogRow>,
    rows: usize,
    slip_events: Vec<f64>,
    last_slip: Option<f64>,
    prev_slipping: bool,
    max_dev: Vec<f64>,
    max_q: Vec<f64>,
    min_q: Vec<f64>,
    min_limit: Option<(f64, usize)>,
    max_pos: f64,
    max_axis: [f64; 3],
    max_rot: f64,
    max_tau_l: [f64; 2],
    max_residual: f64,
    times: Vec<f64>,
}

impl SummaryBuilder {
    /// `limits` are the joint position limits used for the limit distance.
    pub fn new(limits: Option<(Vec<f64>, Vec<f64>)>) -> Self {
        Self {
            limits,
            first: None,
            last: None,
            rows: 0,
            slip_events: Vec::new(),
            last_slip: None,
            prev_slipping: false,
            max_dev: Vec::new(),
            max_q: Vec::new(),
            min_q: Vec::new(),
            min_limit: None,
            max_pos: 0.0,
            max_axis: [0.0; 3],
            max_rot: 0.0,
            max_tau_l: [0.0; 2],
            max_residual: 0.0,
            times: Vec::new(),
        }
    }

    pub fn for_model(model: &DualArmModel) -> Self {
        Self::new(Some((model.q_min().as_slice().to_vec(), model.q_max().as_slice().to_vec())))
    }

    /// Largest object displacement seen so far (m).
    pub fn max_position_deviation(&self) -> f64 {
        self.max_pos
    }

    pub fn push(&mut self, row: &LogRow) {
        let first = self.first.get_or_insert_with(|| row.clone());
        let n = row.q.len();
        if self.max_dev.is_empty() {
            self.max_dev = vec![0.0; n];
            self.max_q = row.q.clone();
            self.min_q = row.q.clone();
        }
        for j in 0..n {
            self.max_dev[j] = self.max_dev[j].max((row.q[j] - first.q[j]).abs());
            self.max_q[j] = self.max_q[j].max(row.q[j]);
            self.min_q[j] = self.min_q[j].min(row.q[j]);
            if let Some((lo, hi)) = &self.limits {
                let d = (row.q[j] - lo[j]).min(hi[j] - row.q[j]);
                if self.min_limit.is_none_or(|(m, _)| d < m) {
                    self.min_limit = Some((d, j));
                }
            }
        }
        let p0 = first.object_pose();
        let p = row.object_pose();
        let dp = p.translation - p0.translation;
        self.max_pos = self.max_pos.max(dp.norm());
        for k in 0..3 {
            self.max_axis[k] = self.max_axis[k].max(dp[k].abs());
        }
        let rot = crate::spatial::rotation_angle(&(p0.rotation.inverse() * p.rotation)).to_degrees();
        self.max_rot = self.max_rot.max(rot);
        let half = n / 2;
        for (arm, range) in [(0, 0..half), (1, half..n)] {
            let m = row.tau_l[range].iter().fold(0.0f64, |a, v| a.max(v.abs()));
            self.max_tau_l[arm] = self.max_tau_l[arm].max(m);
        }
        self.max_residual = self.max_residual.max(row.hqp_residual);
        self.times.push(row.step_time);
        let slipping = row.slip[0] || row.slip[1];
        if slipping {
            if !self.prev_slipping && self.last_slip.is_none_or(|t| row.t - t >= SLIP_EVENT_GAP) {
                self.slip_events.push(row.t);
            }
            self.last_slip = Some(row.t);
        }
        self.prev_slipping = slipping;
        self.rows += 1;
        self.last = Some(row.clone());
    }

    pub fn finish(mut self) -> RunSummary {
        self.times.sort_by(|a, b| a.total_cmp(b));
        let count = self.times.len();
        let mean = if count == 0 { 0.0 } else { self.times.iter().sum::<f64>() / count as f64 };
        let p99 = if count == 0 { 0.0 } else { self.times[((count as f64 * 0.99).ceil() as usize).clamp(1, count) - 1] };
        let (t0, t1) = match (&self.first, &self.last) {
            (Some(a), Some(b)) => (a.t, b.t),
            _ => (0.0, 0.0),
        };
        let last = self.last.as_ref();
        RunSummary {
            rows: self.rows,
            duration: t1 - t0,
            slip_events: self.slip_events,
            max_joint_deviation: self.max_dev,
            max_q: self.max_q,
            min_q: self.min_q,
            min_limit_distance: self.min_limit,
            max_position_deviation: self.max_pos,
            max_axis_displacement: self.max_axis,
            max_orientation_deviation: self.max_rot,
            max_tau_l: self.max_tau_l,
            max_hierarchy_residual: self.max_residual,
            step_time_mean: mean,
            step_time_p99: p99,
            step_time_max: self.times.last().copied().unwrap_or(0.0),
            final_wr_x: last.map_or(0.0, |r| r.wr[3]),
            final_wr_dx_star: last.map_or(0.0, |r| r.wr_dx_star),
            dropped: self.max_pos > DROP_ALARM_DISTANCE,
        }
    }
}

/// Summarize a log file; joint limits come from `model` when given.
pub fn summarize_log(path: impl AsRef<Path>, model: Option<&DualArmModel>) -> Result<RunSummary, LogError> {
    let mut rd = csv::Reader::from_path(path)?;
    let cols = Columns::from_header(rd.headers()?)?;
    let mut b = match model {
        Some(m) => SummaryBuilder::for_model(m),
        None => SummaryBuilder::new(None),
    };
    for r in rd.records() {
        b.push(&LogRow::parse(&cols, &r?)?);
    }
    Ok(b.finish())
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOptions {
    /// Directory for `log.csv`, `summary.txt` and QP dumps; nothing is
    /// written when `None`.
    pub out_dir: Option<PathBuf>,
    /// Record control-step wall time; when off the column is zero and logs are
    /// byte-identical across runs.
    pub wall_time: bool,
    pub dump_qp: bool,
    pub seed: Option<u64>,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self { out_dir: None, wall_time: true, dump_qp: false, seed: None }
    }
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error("invalid configuration:\n{}", .0.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("\n"))]
    Invalid(Vec<Diagnostic>),
    #[error("cycle {cycle} (t = {t:.3} s): {source}")]
    Control { cycle: usize, t: f64, source: ControlError },
    #[error("cycle {cycle} (t = {t:.3} s): {source}")]
    Plant { cycle: usize, t: f64, source: SimError },
    #[error(transparent)]
    Setup(#[from] SimError),
    #[error(transparent)]
    SetupControl(#[from] ControlError),
    #[error(transparent)]
    Log(#[from] LogError),
}

impl RunError {
    /// Configuration problems as opposed to failures while running.
    pub fn is_validation(&self) -> bool {
        matches!(self, RunError::Invalid(_))
    }
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub summary: RunSummary,
    pub log_path: Option<PathBuf>,
}

/// Run a scenario end to end, optionally collecting every row.
pub fn run_scenario_with(
    cfg: &ScenarioConfig,
    opts: &RunOptions,
    mut on_row: impl FnMut(&LogRow),
) -> Result<RunOutcome, RunError> {
    let diags = cfg.validate();
    if has_errors(&diags) {
        return Err(RunError::Invalid(diags));
    }
    for d in &diags {
        log::warn!("{}: {d}", cfg.name);
    }
    let model = cfg.load_model().map_err(SimError::from)?;
    let mut params = cfg.sim_params();
    if let Some(seed) = opts.seed {
        params.seed = seed;
    }
    let q0 = cfg.initial_q(&model);
    let mut sim = Simulator::new(model.clone(), params, q0, cfg.initial_squeeze)?;
    let settle_steps = (cfg.settle / cfg.dt).round() as usize;
    let steps = (cfg.duration / cfg.dt).round() as usize;
    sim.set_time(-(settle_steps as f64) * cfg.dt);
    let initial = sim.sensors();
    let mut ctl = Controller::new(model.clone(), cfg, &initial)?;

    let mut writer = None;
    let mut log_path = None;
    if let Some(dir) = &opts.out_dir {
        std::fs::create_dir_all(dir).map_err(LogError::from)?;
        let path = dir.join("log.csv");
        let mut w = csv::Writer::from_writer(BufWriter::new(File::create(&path).map_err(LogError::from)?));
        w.write_record(log_header(model.dof())).map_err(LogError::from)?;
        writer = Some(w);
        log_path = Some(path);
        if opts.dump_qp {
            let f = File::create(dir.join("qp_dump.txt")).map_err(LogError::from)?;
            ctl.set_dump(Box::new(BufWriter::new(f)));
        }
    }

    let mut summary = SummaryBuilder::for_model(&model);
    let mut sensors = initial;
    for cycle in 0..settle_steps + steps {
        let t = sensors.t;
        let out = ctl.step(&sensors, t).map_err(|source| RunError::Control { cycle, t, source })?;
        if cycle >= settle_steps {
            let st = sim.state();
            let w = |w: &Wrench| -> [f64; 6] { w.to_vector().into() };
            let row = LogRow {
                t,
                q: sensors.q.as_slice().to_vec(),
                qd_cmd: out.qd_cmd.as_slice().to_vec(),
                tau_ext: out.tau_ext.as_slice().to_vec(),
                tau_l: out.tau_l.as_slice().to_vec(),
                w1: w(&out.contact_wrenches[0]),
                w2: w(&out.contact_wrenches[1]),
                wa: w(&out.wa),
                wr: w(&out.wr),
                wr_dx_star: out.wr_dx_star,
                object_quat: st.object.quaternion_wxyz(),
                object_pos: st.object.translation.into(),
                slip: st.slip(),
                hqp_residual: out.hierarchy_residual,
                step_time: if opts.wall_time { out.elapsed.as_secs_f64() } else { 0.0 },
            }
            .rounded();
            if let Some(w) = writer.as_mut() {
                w.write_record(row.record()).map_err(LogError::from)?;
            }
            summary.push(&row);
            on_row(&row);
            if summary.max_position_deviation() > cfg.plant.drop_distance {
                log::warn!("{}: object dropped at t = {t:.3} s, run stopped", cfg.name);
                break;
            }
        }
        sim.step(&out.qd_cmd).map_err(|source| RunError::Plant { cycle, t, source })?;
        sensors = sim.sensors();
    }
    if let Some(mut w) = writer {
        w.flush().map_err(LogError::from)?;
    }
    let summary = summary.finish();
    if let Some(dir) = &opts.out_dir {
        std::fs::write(dir.join("summary.txt"), format!("{summary}\n")).map_err(LogError::from)?;
    }
    Ok(RunOutcome { summary, log_path })
}

pub fn run_scenario(cfg: &ScenarioConfig, opts: &RunOptions) -> Result<RunOutcome, RunError> {
    run_scenario_with(cfg, opts, |_| {})
}
