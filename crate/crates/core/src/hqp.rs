//! Two-level prioritized inverse kinematics.
//!
//! Level 1 tracks the contact-velocity command under joint bounds:
//! `min ‖Jc q̇ − ẋcmd‖² + ρ‖q̇‖²`, `bm ≤ q̇ ≤ bM`. Level 2 follows the arm
//! admittance command inside the level-1 solution set:
//! `min ‖q̇ − q̇c‖²`, `Jc q̇ = Jc q̇*₁`, `bm ≤ q̇ ≤ bM`.

use std::io::Write;
use std::time::Duration;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::model::DualArmModel;
use crate::qpsolver::{ConstraintId, QpError, QpProblem, QpSolution, QpSolver, QpStatus};

pub const DEFAULT_RHO: f64 = 1e-6;
/// Slack allowed on the level-2 equality when the exact problem fails.
pub const EQUALITY_SLACK: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HqpError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("level {level} failed: {source}")]
    Level { level: u8, source: QpError },
}

#[derive(Debug, Clone, PartialEq)]
pub struct JointBounds {
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
    /// Joints whose position was already outside its range; both bounds were
    /// clamped to zero.
    pub violated: Vec<usize>,
}

impl JointBounds {
    pub fn limit_violation(&self) -> bool {
        !self.violated.is_empty()
    }
}

/// Velocity bounds that keep `q + Δt·q̇` inside the position range.
pub fn compute_bounds_raw(
    q: &DVector<f64>,
    q_min: &DVector<f64>,
    q_max: &DVector<f64>,
    qd_min: &DVector<f64>,
    qd_max: &DVector<f64>,
    dt: f64,
) -> JointBounds {
    assert!(dt > 0.0, "bound horizon must be positive");
    let n = q.len();
    let mut lower = DVector::zeros(n);
    let mut upper = DVector::zeros(n);
    let mut violated = Vec::new();
    for i in 0..n {
        let lo = qd_min[i].max((q_min[i] - q[i]) / dt);
        let hi = qd_max[i].min((q_max[i] - q[i]) / dt);
        if lo > hi {
            violated.push(i);
        } else {
            lower[i] = lo;
            upper[i] = hi;
        }
    }
    JointBounds { lower, upper, violated }
}

pub fn compute_bounds(model: &DualArmModel, q: &DVector<f64>, dt: f64) -> JointBounds {
    compute_bounds_raw(q, &model.q_min(), &model.q_max(), &model.qd_min(), &model.qd_max(), dt)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LevelStats {
    pub status: QpStatus,
    pub iterations: usize,
    pub time: Duration,
}

impl LevelStats {
    fn from(s: &QpSolution) -> Self {
        Self { status: s.status, iterations: s.iterations, time: s.solve_time }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HqpResult {
    pub qd_first: DVector<f64>,
    pub qd_cmd: DVector<f64>,
    /// `‖Jc q̇*₁ − ẋcmd‖₂`
    pub level1_residual: f64,
    /// `‖q̇cmd − q̇c‖₂`
    pub level2_deviation: f64,
    /// `‖Jc(q̇cmd − q̇*₁)‖∞`
    pub hierarchy_residual: f64,
    /// Level 2 needed the slackened equality.
    pub relaxed: bool,
    /// Joints at a velocity bound in the final command.
    pub active_bounds: Vec<usize>,
    pub level1: LevelStats,
    pub level2: LevelStats,
}

fn box_problem(h: DMatrix<f64>, g: DVector<f64>, bounds: &JointBounds) -> QpProblem {
    QpProblem::new(h, g).with_bounds(bounds.lower.clone(), bounds.upper.clone())
}

/// Level-1 problem: `½q̇ᵀ(JᵀJ + ρI)q̇ − (Jᵀẋ)ᵀq̇` with box bounds.
pub fn level1_problem(jc: &DMatrix<f64>, xdot_cmd: &DVector<f64>, bounds: &JointBounds, rho: f64) -> QpProblem {
    let n = jc.ncols();
    let h = jc.transpose() * jc + DMatrix::identity(n, n) * rho;
    box_problem(h, -(jc.transpose() * xdot_cmd), bounds)
}

/// Level-2 problem: `½‖q̇ − q̇c‖²` with `Jc q̇ = Jc q̇*₁` and box bounds.
pub fn level2_problem(jc: &DMatrix<f64>, qd_first: &DVector<f64>, qd_c: &DVector<f64>, bounds: &JointBounds) -> QpProblem {
    let n = jc.ncols();
    box_problem(DMatrix::identity(n, n), -qd_c, bounds).with_equalities(jc.clone(), jc * qd_first)
}

fn relaxed_level2(jc: &DMatrix<f64>, qd_first: &DVector<f64>, qd_c: &DVector<f64>, bounds: &JointBounds) -> QpProblem {
    let n = jc.ncols();
    let m = jc.nrows();
    let target = jc * qd_first;
    let mut a = DMatrix::zeros(2 * m, n);
    a.rows_mut(0, m).copy_from(jc);
    a.rows_mut(m, m).copy_from(&(-jc));
    let mut b = DVector::zeros(2 * m);
    b.rows_mut(0, m).copy_from(&target.add_scalar(EQUALITY_SLACK));
    b.rows_mut(m, m).copy_from(&(-target).add_scalar(EQUALITY_SLACK));
    box_problem(DMatrix::identity(n, n), -qd_c, bounds).with_inequalities(a, b)
}

/// Two-level solver with per-level warm starts.
pub struct Hqp {
    pub rho: f64,
    level1: QpSolver,
    level2: QpSolver,
    dump: Option<Box<dyn Write + Send>>,
    cycle: u64,
}

impl std::fmt::Debug for Hqp {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Hqp").field("rho", &self.rho).field("cycle", &self.cycle).finish()
    }
}

impl Default for Hqp {
    fn default() -> Self {
        Self::new(DEFAULT_RHO)
    }
}

impl Hqp {
    pub fn new(rho: f64) -> Self {
        Self { rho, level1: QpSolver::default(), level2: QpSolver::default(), dump: None, cycle: 0 }
    }

    /// Write every QP to `w` (one `cycle` header per solve).
    pub fn set_dump(&mut self, w: Box<dyn Write + Send>) {
        self.dump = Some(w);
    }

    fn dump(&mut self, level: u8, p: &QpProblem) {
        if let Some(w) = self.dump.as_mut() {
            let res = writeln!(w, "cycle {} level {}", self.cycle, level).and_then(|_| p.dump(w.as_mut()));
            if let Err(e) = res {
                log::warn!("QP dump failed, disabling: {e}");
                self.dump = None;
            }
        }
    }

    pub fn solve_level1(&mut self, jc: &DMatrix<f64>, xdot_cmd: &DVector<f64>, bounds: &JointBounds) -> Result<QpSolution, HqpError> {
        let p = level1_problem(jc, xdot_cmd, bounds, self.rho);
        self.dump(1, &p);
        self.level1.solve(&p).map_err(|source| HqpError::Level { level: 1, source })
    }

    /// Returns the solution and whether the equality had to be relaxed.
    pub fn solve_level2(
        &mut self,
        jc: &DMatrix<f64>,
        qd_first: &DVector<f64>,
        qd_c: &DVector<f64>,
        bounds: &JointBounds,
    ) -> Result<(QpSolution, bool), HqpError> {
        let p = level2_problem(jc, qd_first, qd_c, bounds);
        self.dump(2, &p);
        match self.level2.solve_from(&p, qd_first) {
            Ok(s) => Ok((s, false)),
            Err(QpError::Infeasible { .. } | QpError::Singular | QpError::MaxIterations { .. }) => {
                log::warn!("level-2 equality relaxed by {EQUALITY_SLACK:e}");
                let p = relaxed_level2(jc, qd_first, qd_c, bounds);
                self.level2.reset();
                self.level2
                    .solve_from(&p, qd_first)
                    .map(|s| (s, true))
                    .map_err(|source| HqpError::Level { level: 2, source })
            }
            Err(source) => Err(HqpError::Level { level: 2, source }),
        }
    }

    pub fn solve(
        &mut self,
        jc: &DMatrix<f64>,
        xdot_cmd: &DVector<f64>,
        qd_c: &DVector<f64>,
        bounds: &JointBounds,
    ) -> Result<HqpResult, HqpError> {
        let n = jc.ncols();
        if xdot_cmd.len() != jc.nrows() || qd_c.len() != n || bounds.lower.len() != n || bounds.upper.len() != n {
            return Err(HqpError::Dimension(format!(
                "Jc {}×{}, ẋcmd {}, q̇c {}, bounds {}",
                jc.nrows(),
                n,
                xdot_cmd.len(),
                qd_c.len(),
                bounds.lower.len()
            )));
        }
        self.cycle += 1;
        let first = self.solve_level1(jc, xdot_cmd, bounds)?;
        let (second, relaxed) = self.solve_level2(jc, &first.x, qd_c, bounds)?;
        let active_bounds = second
            .active
            .iter()
            .filter_map(|id| match id {
                ConstraintId::Lower(i) | ConstraintId::Upper(i) => Some(*i),
                _ => None,
            })
            .collect();
        Ok(HqpResult {
            level1_residual: (jc * &first.x - xdot_cmd).norm(),
            level2_deviation: (&second.x - qd_c).norm(),
            hierarchy_residual: (jc * (&second.x - &first.x)).amax(),
            relaxed,
            active_bounds,
            level1: LevelStats::from(&first),
            level2: LevelStats::from(&second),
            qd_first: first.x,
            qd_cmd: second.x,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn wide(n: usize, v: f64) -> JointBounds {
        JointBounds { lower: DVector::from_element(n, -v), upper: DVector::from_element(n, v), violated: vec![] }
    }

    fn default_jc() -> DMatrix<f64> {
        let model = DualArmModel::default();
        model.contact_jacobian(&DVector::from_fn(14, |i, _| 0.1 * ((i % 5) as f64 - 2.0)))
    }

    #[test]
    fn bounds_formula_cases() {
        let model = DualArmModel::default();
        let q = DVector::zeros(14);
        let b = compute_bounds(&model, &q, 1e-3);
        assert_eq!(b.lower, model.qd_min());
        assert_eq!(b.upper, model.qd_max());
        let mut q = DVector::zeros(14);
        q[5] = model.q_max()[5];
        let b = compute_bounds(&model, &q, 1e-3);
        assert_eq!(b.upper[5], 0.0);
        q[5] = model.q_max()[5] - 0.001;
        let b = compute_bounds(&model, &q, 1e-3);
        assert_relative_eq!(b.upper[5], 1.0, epsilon = 1e-9);
        assert!(!b.limit_violation());
    }

    #[test]
    fn out_of_range_position_is_flagged() {
        let model = DualArmModel::default();
        let mut q = DVector::zeros(14);
        q[5] = model.q_max()[5] + 0.01;
        let b = compute_bounds(&model, &q, 1e-3);
        assert_eq!(b.violated, vec![5]);
        assert_eq!((b.lower[5], b.upper[5]), (0.0, 0.0));
    }

    #[test]
    fn zero_command_gives_zero() {
        let jc = default_jc();
        let mut hqp = Hqp::default();
        let s = hqp.solve_level1(&jc, &DVector::zeros(12), &wide(14, 2.0)).unwrap();
        assert!(s.x.amax() < 1e-12);
    }

    #[test]
    fn reachable_command_is_tracked() {
        let jc = default_jc();
        let target = &jc * DVector::from_fn(14, |i, _| 0.05 * (i as f64).sin());
        let mut hqp = Hqp::new(1e-8);
        let s = hqp.solve_level1(&jc, &target, &wide(14, 10.0)).unwrap();
        assert!((&jc * &s.x - target).amax() < 1e-5);
    }

    #[test]
    fn saturated_joint_matches_grid_search() {
        // 3-joint sub-model, command that wants joint 0 beyond its bound
        let j = DMatrix::from_row_slice(2, 3, &[1.0, 0.5, 0.2, 0.0, 1.0, -0.4]);
        let xdot = DVector::from_vec(vec![2.0, 0.3]);
        let bounds = JointBounds {
            lower: DVector::from_vec(vec![-0.5, -1.0, -1.0]),
            upper: DVector::from_vec(vec![0.5, 1.0, 1.0]),
            violated: vec![],
        };
        let rho = 1e-6;
        let mut hqp = Hqp::new(rho);
        let s = hqp.solve_level1(&j, &xdot, &bounds).unwrap();
        assert_relative_eq!(s.x[0], 0.5, epsilon = 1e-9);
        let f = |q: &DVector<f64>| (&j * q - &xdot).norm_squared() + rho * q.norm_squared();
        // grid with successive refinement around the incumbent
        let (mut center, mut half): (DVector<f64>, DVector<f64>) = (DVector::zeros(3), DVector::from_vec(vec![0.5, 1.0, 1.0]));
        let mut best = (f64::INFINITY, DVector::zeros(3));
        for _ in 0..12 {
            let steps = 20;
            for a in 0..=steps {
                for b in 0..=steps {
                    for c in 0..=steps {
                        let lerp = |i: usize, k: usize| {
                            (center[i] - half[i] + 2.0 * half[i] * k as f64 / steps as f64).clamp(bounds.lower[i], bounds.upper[i])
                        };
                        let q = DVector::from_vec(vec![lerp(0, a), lerp(1, b), lerp(2, c)]);
                        let v = f(&q);
                        if v < best.0 {
                            best = (v, q);
                        }
                    }
                }
            }
            center = best.1.clone();
            half *= 0.25;
        }
        assert!((f(&s.x) - best.0).abs() < 1e-4);
        assert!(f(&s.x) <= best.0 + 1e-12);
    }

    #[test]
    fn level2_keeps_level1_when_commands_agree() {
        let jc = default_jc();
        let mut hqp = Hqp::default();
        let target = &jc * DVector::from_element(14, 0.05);
        let first = hqp.solve_level1(&jc, &target, &wide(14, 2.0)).unwrap();
        let (second, relaxed) = hqp.solve_level2(&jc, &first.x, &first.x, &wide(14, 2.0)).unwrap();
        assert!(!relaxed);
        assert!((second.x - first.x).amax() < 1e-12);
    }

    #[test]
    fn level2_is_null_space_projection_when_bounds_inactive() {
        let jc = default_jc();
        let mut hqp = Hqp::default();
        let qd_first = DVector::from_fn(14, |i, _| 0.02 * (i as f64).cos());
        let qd_c = DVector::from_fn(14, |i, _| 0.1 * (1.3 * i as f64).sin());
        let (s, _) = hqp.solve_level2(&jc, &qd_first, &qd_c, &wide(14, 10.0)).unwrap();
        let pinv = jc.clone().pseudo_inverse(1e-12).unwrap();
        let oracle = &qd_c - &pinv * (&jc * (&qd_c - &qd_first));
        assert!((s.x - oracle).amax() < 1e-9);
    }

    #[test]
    fn redundancy_leaves_a_null_space() {
        let jc = default_jc();
        let rank = jc.clone().svd(false, false).rank(1e-9);
        assert_eq!(rank, 12);
        let mut hqp = Hqp::default();
        let xdot = &jc * DVector::from_element(14, 0.02);
        let qd_c = DVector::from_fn(14, |i, _| if i % 2 == 0 { 0.3 } else { -0.2 });
        let r = hqp.solve(&jc, &xdot, &qd_c, &wide(14, 2.0)).unwrap();
        assert!((&r.qd_cmd - &r.qd_first).amax() > 1e-4);
        assert!(r.hierarchy_residual <= 1e-9);
    }

    #[test]
    fn dimension_errors() {
        let mut hqp = Hqp::default();
        let jc = default_jc();
        let err = hqp.solve(&jc, &DVector::zeros(11), &DVector::zeros(14), &wide(14, 1.0));
        assert!(matches!(err, Err(HqpError::Dimension(_))));
    }

    #[test]
    fn dump_writes_both_levels() {
        use std::sync::{Arc, Mutex};
        #[derive(Clone)]
        struct Shared(Arc<Mutex<Vec<u8>>>);
        impl Write for Shared {
            fn write(&mut self, b: &[u8]) -> std::io::Result<usize> {
                self.0.lock().unwrap().extend_from_slice(b);
                Ok(b.len())
            }
            fn flush(&mut self) -> std::io::Result<()> {
                Ok(())
            }
        }
        let buf = Shared(Arc::new(Mutex::new(Vec::new())));
        let mut hqp = Hqp::default();
        hqp.set_dump(Box::new(buf.clone()));
        let jc = default_jc();
        hqp.solve(&jc, &DVector::zeros(12), &DVector::zeros(14), &wide(14, 1.0)).unwrap();
        let text = String::from_utf8(buf.0.lock().unwrap().clone()).unwrap();
        assert!(text.contains("cycle 1 level 1\nqp d=14 me=0 mi=0"));
        assert!(text.contains("cycle 1 level 2\nqp d=14 me=12 mi=0"));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn hierarchy_and_bounds_hold(
            q in prop::collection::vec(-1.0f64..1.0, 14),
            xdot in prop::collection::vec(-0.5f64..0.5, 12),
            qd_c in prop::collection::vec(-3.0f64..3.0, 14),
        ) {
            let model = DualArmModel::default();
            let q = DVector::from_vec(q);
            let jc = model.contact_jacobian(&q);
            let bounds = compute_bounds(&model, &q, 0.05);
            let mut hqp = Hqp::default();
            let xdot = DVector::from_vec(xdot);
            let qd_c = DVector::from_vec(qd_c);
            let r = hqp.solve(&jc, &xdot, &qd_c, &bounds).unwrap();
            prop_assert!(r.hierarchy_residual <= 1e-8);
            for i in 0..14 {
                prop_assert!(r.qd_cmd[i] >= bounds.lower[i] - 1e-9 && r.qd_cmd[i] <= bounds.upper[i] + 1e-9);
            }
            // level 1 does not depend on q̇c
            let other = hqp.solve(&jc, &xdot, &DVector::zeros(14), &bounds).unwrap();
            prop_assert!((jc.clone() * (&r.qd_cmd - &other.qd_cmd)).amax() <= 1e-8);
        }
    }
}
