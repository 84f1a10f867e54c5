//! Minimal internal squeeze that keeps both contacts in their friction cones.
//!
//! The decision variable is the internal wrench `Wr`; the object wrench is
//! pinned to its measured value so the contact wrenches follow from
//! `[W1; W2] = Q⁻¹[Wa; Wr]`. Each contact must stay compressive
//! (`Wᵢ,x ≤ 0`), inside an inscribed polygonal friction cone, within the
//! torsional friction limit and with its center of pressure on the patch.

use nalgebra::{DMatrix, DVector, SMatrix, SVector};
use thiserror::Error;

use crate::grasp::GraspMaps;
use crate::qpsolver::{ConstraintId, QpError, QpProblem, QpSolver};
use crate::spatial::Wrench;

/// Weight on the non-normal internal components; selects the minimum-norm
/// internal moment among equally squeezing solutions.
const SECONDARY_WEIGHT: f64 = 1e-10;
const ROWS_PER_CONTACT_BASE: usize = 7;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WrenchOptError {
    #[error("invalid friction parameters: {0}")]
    InvalidParams(String),
    #[error("no internal wrench satisfies the contact constraints: {0}")]
    Infeasible(QpError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrictionParams {
    /// Tangential friction coefficient per contact.
    pub mu: [f64; 2],
    /// Torsional friction coefficient per contact (m).
    pub lambda: [f64; 2],
    /// Patch side lengths `(δy, δz)` per contact (m).
    pub patch: [(f64, f64); 2],
    /// Number of polygon facets approximating the cone.
    pub facets: usize,
}

impl Default for FrictionParams {
    fn default() -> Self {
        Self {
            mu: [0.15; 2],
            lambda: [0.01; 2],
            patch: [(0.04, 0.04); 2],
            facets: 8,
        }
    }
}

impl FrictionParams {
    pub fn validate(&self) -> Result<(), WrenchOptError> {
        let positive = self.mu.iter().chain(&self.lambda).all(|v| *v > 0.0)
            && self.patch.iter().all(|(y, z)| *y > 0.0 && *z > 0.0);
        if !positive {
            return Err(WrenchOptError::InvalidParams("coefficients and patch sizes must be positive".into()));
        }
        if self.facets < 3 {
            return Err(WrenchOptError::InvalidParams(format!("need at least 3 facets, got {}", self.facets)));
        }
        Ok(())
    }

    fn rows_per_contact(&self) -> usize {
        ROWS_PER_CONTACT_BASE + self.facets
    }
}

/// Half-plane rows `[a_y, a_z, a_x]` with `a_y fy + a_z fz + a_x fx ≤ 0` for
/// the polygon inscribed in the cone `√(fy² + fz²) ≤ μ|fx|`, `fx ≤ 0`.
pub fn linearize_cone(mu: f64, facets: usize) -> Vec<[f64; 3]> {
    let n = facets as f64;
    let apothem = mu * (std::f64::consts::PI / n).cos();
    (0..facets)
        .map(|k| {
            let theta = 2.0 * std::f64::consts::PI * k as f64 / n;
            [theta.cos(), theta.sin(), apothem]
        })
        .collect()
}

/// Constraint label, in row order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ContactConstraint {
    Normal,
    Facet(usize),
    TorsionPositive,
    TorsionNegative,
    CopYPositive,
    CopYNegative,
    CopZPositive,
    CopZNegative,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InternalWrenchTarget {
    /// Optimal normal internal force `W*r,dx` (N); positive squeezes.
    pub wr_dx_star: f64,
    pub wr: Wrench,
    /// Local contact wrenches reconstructed from `Wa` and `Wr`.
    pub contact_wrenches: [Wrench; 2],
    pub feasible: bool,
    /// Active constraints as `(contact, constraint)`.
    pub active: Vec<(usize, ContactConstraint)>,
}

type Vec6 = SVector<f64, 6>;
type Mat6 = SMatrix<f64, 6, 6>;

/// Constraint rows on one local contact wrench `[mx my mz fx fy fz]`, each
/// meaning `r·W ≤ 0`.
fn contact_rows(params: &FrictionParams, i: usize) -> Vec<(ContactConstraint, Vec6)> {
    let mu = params.mu[i];
    let lam = params.lambda[i];
    let (dy, dz) = params.patch[i];
    let mut rows = vec![(ContactConstraint::Normal, Vec6::new(0.0, 0.0, 0.0, 1.0, 0.0, 0.0))];
    for (k, [ay, az, ax]) in linearize_cone(mu, params.facets).into_iter().enumerate() {
        rows.push((ContactConstraint::Facet(k), Vec6::new(0.0, 0.0, 0.0, ax, ay, az)));
    }
    rows.extend([
        (ContactConstraint::TorsionPositive, Vec6::new(1.0, 0.0, 0.0, lam, 0.0, 0.0)),
        (ContactConstraint::TorsionNegative, Vec6::new(-1.0, 0.0, 0.0, lam, 0.0, 0.0)),
        (ContactConstraint::CopYPositive, Vec6::new(0.0, 1.0, 0.0, 0.5 * dz, 0.0, 0.0)),
        (ContactConstraint::CopYNegative, Vec6::new(0.0, -1.0, 0.0, 0.5 * dz, 0.0, 0.0)),
        (ContactConstraint::CopZPositive, Vec6::new(0.0, 0.0, 1.0, 0.5 * dy, 0.0, 0.0)),
        (ContactConstraint::CopZNegative, Vec6::new(0.0, 0.0, -1.0, 0.5 * dy, 0.0, 0.0)),
    ]);
    rows
}

/// Build the QP over `Wr` for the given maps and measured object wrench.
pub fn build_problem(maps: &GraspMaps, wa: &Wrench, params: &FrictionParams) -> QpProblem {
    let per = params.rows_per_contact();
    let wa = wa.to_vector();
    let mut a_in = DMatrix::zeros(2 * per, 6);
    let mut b_in = DVector::zeros(2 * per);
    for i in 0..2 {
        let pa: Mat6 = maps.q_inv.fixed_view::<6, 6>(6 * i, 0).into_owned();
        let pr: Mat6 = maps.q_inv.fixed_view::<6, 6>(6 * i, 6).into_owned();
        let c = pa * wa;
        for (k, (_, r)) in contact_rows(params, i).into_iter().enumerate() {
            let row = r.transpose() * pr;
            a_in.row_mut(i * per + k).copy_from(&row);
            b_in[i * per + k] = -r.dot(&c);
        }
    }
    let mut h = DMatrix::identity(6, 6) * (2.0 * SECONDARY_WEIGHT);
    h[(3, 3)] = 2.0;
    QpProblem::new(h, DVector::zeros(6)).with_inequalities(a_in, b_in)
}

fn label(params: &FrictionParams, id: ConstraintId) -> Option<(usize, ContactConstraint)> {
    let ConstraintId::Ineq(row) = id else { return None };
    let per = params.rows_per_contact();
    let (contact, k) = (row / per, row % per);
    contact_rows(params, contact).get(k).map(|(c, _)| (contact, *c))
}

fn solve_with(
    solver: &mut QpSolver,
    maps: &GraspMaps,
    wa: &Wrench,
    params: &FrictionParams,
) -> Result<InternalWrenchTarget, WrenchOptError> {
    params.validate()?;
    let problem = build_problem(maps, wa, params);
    let sol = solver.solve(&problem).map_err(WrenchOptError::Infeasible)?;
    let wr = Wrench::from_vector(&Vec6::from_iterator(sol.x.iter().copied()));
    let (w1, w2) = maps.recompose(wa, &wr);
    Ok(InternalWrenchTarget {
        wr_dx_star: wr.force.x,
        wr,
        contact_wrenches: [w1, w2],
        feasible: true,
        active: sol.active.iter().filter_map(|id| label(params, *id)).collect(),
    })
}

/// One-shot optimization.
pub fn optimize_internal(
    maps: &GraspMaps,
    wa_measured: &Wrench,
    params: &FrictionParams,
) -> Result<InternalWrenchTarget, WrenchOptError> {
    solve_with(&mut QpSolver::default(), maps, wa_measured, params)
}

/// Per-loop optimizer: warm-starts the QP and holds the last feasible target
/// when the current problem is infeasible.
#[derive(Debug, Clone)]
pub struct WrenchOptimizer {
    pub params: FrictionParams,
    solver: QpSolver,
    last_feasible: Option<InternalWrenchTarget>,
}

impl WrenchOptimizer {
    pub fn new(params: FrictionParams) -> Result<Self, WrenchOptError> {
        params.validate()?;
        Ok(Self { params, solver: QpSolver::default(), last_feasible: None })
    }

    /// Solve for the current measurement. On infeasibility the previous
    /// feasible target is returned with `feasible = false`; before any
    /// feasible solve the fallback is a zero squeeze.
    pub fn update(&mut self, maps: &GraspMaps, wa_measured: &Wrench) -> InternalWrenchTarget {
        match solve_with(&mut self.solver, maps, wa_measured, &self.params) {
            Ok(t) => {
                self.last_feasible = Some(t.clone());
                t
            }
            Err(e) => {
                log::warn!("internal wrench optimization failed: {e}");
                self.solver.reset();
                let mut held = self.last_feasible.clone().unwrap_or(InternalWrenchTarget {
                    wr_dx_star: 0.0,
                    wr: Wrench::zero(),
                    contact_wrenches: [Wrench::zero(); 2],
                    feasible: false,
                    active: Vec::new(),
                });
                held.feasible = false;
                held
            }
        }
    }

    pub fn last_feasible(&self) -> Option<&InternalWrenchTarget> {
        self.last_feasible.as_ref()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grasp::{midpoint_frame, symmetric_contacts};
    use crate::model::GRAVITY;
    use crate::spatial::{Pose, Vec3};
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn maps() -> GraspMaps {
        let c = symmetric_contacts(Vec3::new(0.33, 0.0, -0.25), 0.1);
        GraspMaps::build(c, midpoint_frame(&c)).unwrap()
    }

    fn holding(mass: f64) -> Wrench {
        Wrench::from_force(Vec3::new(0.0, 0.0, mass * GRAVITY))
    }

    fn octagon_bound(tangential: f64, mu: f64) -> f64 {
        tangential / (mu * (PI / 8.0).cos())
    }

    fn polygon_ok(rows: &[[f64; 3]], fy: f64, fz: f64, fx: f64) -> bool {
        fx <= 0.0 && rows.iter().all(|[a, b, c]| a * fy + b * fz + c * fx <= 1e-12)
    }

    #[test]
    fn square_cone_geometry() {
        let rows = linearize_cone(1.0, 4);
        let n = 3.0;
        assert!(polygon_ok(&rows, (PI / 4.0).cos() * n, 0.0, -n));
        assert!(!polygon_ok(&rows, n, 0.0, -n));
        assert!(polygon_ok(&rows, 0.0, 0.0, -n));
    }

    #[test]
    fn inscribed_polygon_is_inside_cone() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mu = 0.15;
        let rows = linearize_cone(mu, 8);
        let mut found = 0;
        while found < 10_000 {
            let fx = -rng.random_range(0.0..50.0);
            let fy = rng.random_range(-10.0..10.0);
            let fz = rng.random_range(-10.0..10.0);
            if polygon_ok(&rows, fy, fz, fx) {
                found += 1;
                assert!((fy * fy + fz * fz).sqrt() <= mu * fx.abs() + 1e-12);
            }
        }
    }

    #[test]
    fn weightless_object_needs_no_squeeze() {
        let t = optimize_internal(&maps(), &Wrench::zero(), &FrictionParams::default()).unwrap();
        assert!(t.wr_dx_star.abs() < 1e-9);
        assert!(t.feasible);
    }

    #[test]
    fn analytic_friction_bounds() {
        let params = FrictionParams::default();
        for (mass, expected) in [(0.4, 14.16), (1.2, 42.47), (1.4, 49.55)] {
            let t = optimize_internal(&maps(), &holding(mass), &params).unwrap();
            let bound = octagon_bound(mass * GRAVITY / 2.0, 0.15);
            assert_relative_eq!(t.wr_dx_star, bound, epsilon = 1e-6);
            assert!((bound - expected).abs() < 5e-3, "{bound} vs {expected}");
            for w in &t.contact_wrenches {
                assert_relative_eq!(w.force.x, -bound, epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn tangential_load_is_facet_limited() {
        let t = optimize_internal(&maps(), &holding(0.4), &FrictionParams::default()).unwrap();
        // the facet with normal along +z is active on both contacts
        assert!(t.active.contains(&(0, ContactConstraint::Facet(2))));
        assert!(t.active.contains(&(1, ContactConstraint::Facet(2))));
    }

    #[test]
    fn invalid_params_rejected() {
        let p = FrictionParams { facets: 2, ..Default::default() };
        assert!(optimize_internal(&maps(), &Wrench::zero(), &p).is_err());
        let p = FrictionParams { mu: [0.0, 0.1], ..Default::default() };
        assert!(WrenchOptimizer::new(p).is_err());
    }

    #[test]
    fn infeasible_holds_last_target() {
        // both contact normals face the same way, so the hands can push the
        // object along x but never pull it
        let c = [
            Pose::from_translation(Vec3::new(0.0, 0.1, 0.0)),
            Pose::from_translation(Vec3::new(0.0, -0.1, 0.0)),
        ];
        let m = GraspMaps::build(c, midpoint_frame(&c)).unwrap();
        let mut opt = WrenchOptimizer::new(FrictionParams::default()).unwrap();
        let good = opt.update(&m, &Wrench::from_force(Vec3::new(-5.0, 0.0, 0.2)));
        assert!(good.feasible);
        let held = opt.update(&m, &Wrench::from_force(Vec3::new(5.0, 0.0, 0.0)));
        assert!(!held.feasible);
        assert_eq!(held.wr, good.wr);
        assert!(optimize_internal(&m, &Wrench::from_force(Vec3::new(5.0, 0.0, 0.0)), &opt.params).is_err());
    }

    fn max_violation_exact(t: &InternalWrenchTarget, p: &FrictionParams) -> f64 {
        let mut v: f64 = 0.0;
        for (i, w) in t.contact_wrenches.iter().enumerate() {
            let n = -w.force.x;
            v = v.max(w.force.x);
            v = v.max(w.force.yz().norm() - p.mu[i] * n);
            v = v.max(w.moment.x.abs() - p.lambda[i] * n);
            v = v.max(w.moment.y.abs() - 0.5 * p.patch[i].1 * n);
            v = v.max(w.moment.z.abs() - 0.5 * p.patch[i].0 * n);
        }
        v
    }

    fn object_wrench() -> impl Strategy<Value = Wrench> {
        (prop::array::uniform3(-0.3f64..0.3), prop::array::uniform3(-8.0f64..8.0), 0.2f64..1.5)
            .prop_map(|(m, f, mass)| {
                Wrench::new(Vec3::from(m), Vec3::from(f) + Vec3::new(0.0, 0.0, mass * GRAVITY))
            })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(128))]

        #[test]
        fn solution_is_conservative_and_preserves_total(wa in object_wrench()) {
            let m = maps();
            let p = FrictionParams::default();
            let t = optimize_internal(&m, &wa, &p).unwrap();
            prop_assert!(max_violation_exact(&t, &p) <= 1e-8);
            let (total, _) = m.decompose(&t.contact_wrenches[0], &t.contact_wrenches[1]);
            prop_assert!((total.to_vector() - wa.to_vector()).amax() <= 1e-8);
        }

        #[test]
        fn squeeze_is_monotone_in_tangential_load(f in prop::array::uniform2(-5.0f64..5.0), mass in 0.1f64..1.5, k in 1.0f64..3.0) {
            let m = maps();
            let p = FrictionParams::default();
            let base = Vec3::new(f[0], 0.0, f[1] + mass * GRAVITY);
            let a = optimize_internal(&m, &Wrench::from_force(base), &p).unwrap();
            let b = optimize_internal(&m, &Wrench::from_force(base * k), &p).unwrap();
            prop_assert!(b.wr_dx_star >= a.wr_dx_star - 1e-9);
        }

        #[test]
        fn matches_squeeze_scan(f in prop::array::uniform2(-6.0f64..6.0)) {
            // tangential object force only: by mirror symmetry each contact
            // carries half, so scanning the scalar squeeze alone is exact
            let m = maps();
            let p = FrictionParams::default();
            let wa = Wrench::from_force(Vec3::new(f[0], 0.0, f[1]));
            let t = optimize_internal(&m, &wa, &p).unwrap();
            let rows = linearize_cone(0.15, 8);
            let mut s = 0.0;
            loop {
                let wr = Wrench::from_force(Vec3::new(s, 0.0, 0.0));
                let (w1, w2) = m.recompose(&wa, &wr);
                if [w1, w2].iter().all(|w| polygon_ok(&rows, w.force.y, w.force.z, w.force.x)) {
                    break;
                }
                s += 0.01;
            }
            prop_assert!(s >= t.wr_dx_star - 1e-9 && s <= t.wr_dx_star + 0.01 + 1e-9, "scan {} qp {}", s, t.wr_dx_star);
        }
    }
}
