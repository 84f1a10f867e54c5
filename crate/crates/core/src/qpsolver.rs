//! Dense convex QP solver.
//!
//! Minimizes `½ xᵀHx + gᵀx` subject to `Aeq x = beq`, `Ain x ≤ bin` and
//! `lb ≤ x ≤ ub` with a primal active-set method. Infinite bounds produce no
//! constraint rows. A feasible starting point comes either from the caller, the
//! previous solve, or an elastic phase-1 problem solved by the same routine.
//!
//! Ties (blocking constraints, multipliers) are broken by the lowest
//! constraint index, so identical inputs give identical iterates.

use std::io::{self, Write};
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

pub const DEFAULT_TOL: f64 = 1e-8;
pub const DEFAULT_MAX_ITER: usize = 200;
/// Regularization added to `H` when it is not positive definite.
pub const REGULARIZATION: f64 = 1e-10;
const PHASE1_PROX: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QpError {
    #[error("invalid problem: {0}")]
    Invalid(String),
    #[error("infeasible: smallest achievable constraint violation {violation:.3e}")]
    Infeasible { violation: f64 },
    #[error("no convergence after {iterations} iterations")]
    MaxIterations { iterations: usize, x: DVector<f64> },
    #[error("singular KKT system")]
    Singular,
}

/// Identifies a constraint row of a [`QpProblem`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ConstraintId {
    Eq(usize),
    Ineq(usize),
    Lower(usize),
    Upper(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpProblem {
    pub h: DMatrix<f64>,
    pub g: DVector<f64>,
    pub a_eq: DMatrix<f64>,
    pub b_eq: DVector<f64>,
    pub a_in: DMatrix<f64>,
    pub b_in: DVector<f64>,
    pub lb: DVector<f64>,
    pub ub: DVector<f64>,
}

impl QpProblem {
    /// Unconstrained problem; add constraints with the `with_*` builders.
    pub fn new(h: DMatrix<f64>, g: DVector<f64>) -> Self {
        let d = g.len();
        Self {
            h,
            g,
            a_eq: DMatrix::zeros(0, d),
            b_eq: DVector::zeros(0),
            a_in: DMatrix::zeros(0, d),
            b_in: DVector::zeros(0),
            lb: DVector::from_element(d, f64::NEG_INFINITY),
            ub: DVector::from_element(d, f64::INFINITY),
        }
    }

    pub fn with_equalities(mut self, a: DMatrix<f64>, b: DVector<f64>) -> Self {
        self.a_eq = a;
        self.b_eq = b;
        self
    }

    pub fn with_inequalities(mut self, a: DMatrix<f64>, b: DVector<f64>) -> Self {
        self.a_in = a;
        self.b_in = b;
        self
    }

    pub fn with_bounds(mut self, lb: DVector<f64>, ub: DVector<f64>) -> Self {
        self.lb = lb;
        self.ub = ub;
        self
    }

    pub fn dim(&self) -> usize {
        self.g.len()
    }

    pub fn validate(&self) -> Result<(), QpError> {
        let d = self.dim();
        let bad = |m: &str| Err(QpError::Invalid(m.to_string()));
        if self.h.shape() != (d, d) {
            return bad("H must be d×d");
        }
        if self.a_eq.ncols() != d || self.a_eq.nrows() != self.b_eq.len() {
            return bad("equality block has inconsistent dimensions");
        }
        if self.a_in.ncols() != d || self.a_in.nrows() != self.b_in.len() {
            return bad("inequality block has inconsistent dimensions");
        }
        if self.lb.len() != d || self.ub.len() != d {
            return bad("bounds must have length d");
        }
        if (&self.h - self.h.transpose()).amax() > 1e-10 * (1.0 + self.h.amax()) {
            return bad("H is not symmetric");
        }
        if self.lb.iter().zip(self.ub.iter()).any(|(l, u)| l > u || l.is_nan() || u.is_nan()) {
            return bad("bounds must satisfy lb ≤ ub");
        }
        let finite = self.h.iter().chain(self.g.iter()).chain(self.a_eq.iter()).chain(self.b_eq.iter())
            .chain(self.a_in.iter()).chain(self.b_in.iter()).all(|v| v.is_finite());
        if !finite {
            return bad("non-finite problem data");
        }
        Ok(())
    }

    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.h * x)) + self.g.dot(x)
    }

    /// Largest violation of any constraint at `x`.
    pub fn max_violation(&self, x: &DVector<f64>) -> f64 {
        let mut v: f64 = 0.0;
        if self.a_eq.nrows() > 0 {
            v = v.max((&self.a_eq * x - &self.b_eq).amax());
        }
        if self.a_in.nrows() > 0 {
            v = v.max((&self.a_in * x - &self.b_in).max());
        }
        for i in 0..self.dim() {
            v = v.max(self.lb[i] - x[i]).max(x[i] - self.ub[i]);
        }
        v
    }

    /// Text dump: a dimension header followed by each block in row-major order.
    pub fn dump(&self, w: &mut dyn Write) -> io::Result<()> {
        writeln!(w, "qp d={} me={} mi={}", self.dim(), self.a_eq.nrows(), self.a_in.nrows())?;
        let mat = |w: &mut dyn Write, name: &str, m: &DMatrix<f64>| -> io::Result<()> {
            writeln!(w, "{name} {} {}", m.nrows(), m.ncols())?;
            for r in 0..m.nrows() {
                let row: Vec<String> = (0..m.ncols()).map(|c| format!("{:.17e}", m[(r, c)])).collect();
                writeln!(w, "{}", row.join(" "))?;
            }
            Ok(())
        };
        let vec = |w: &mut dyn Write, name: &str, v: &DVector<f64>| -> io::Result<()> {
            writeln!(w, "{name} {}", v.len())?;
            let row: Vec<String> = v.iter().map(|x| format!("{x:.17e}")).collect();
            writeln!(w, "{}", row.join(" "))
        };
        mat(w, "H", &self.h)?;
        vec(w, "g", &self.g)?;
        mat(w, "Aeq", &self.a_eq)?;
        vec(w, "beq", &self.b_eq)?;
        mat(w, "Ain", &self.a_in)?;
        vec(w, "bin", &self.b_in)?;
        vec(w, "lb", &self.lb)?;
        vec(w, "ub", &self.ub)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpStatus {
    Optimal,
    Infeasible,
    MaxIterations,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct KktReport {
    pub stationarity: f64,
    pub primal: f64,
    pub dual: f64,
    pub complementarity: f64,
}

impl KktReport {
    pub fn max(&self) -> f64 {
        self.stationarity.max(self.primal).max(self.dual).max(self.complementarity)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub x: DVector<f64>,
    pub lambda_eq: DVector<f64>,
    pub lambda_ineq: DVector<f64>,
    pub lambda_lower: DVector<f64>,
    pub lambda_upper: DVector<f64>,
    pub objective: f64,
    pub status: QpStatus,
    pub iterations: usize,
    pub solve_time: Duration,
    /// Working set at the optimum.
    pub active: Vec<ConstraintId>,
    pub kkt: KktReport,
}

/// KKT residual maxima of `s` for problem `p`, using the unregularized `H`.
pub fn check_kkt(p: &QpProblem, s: &QpSolution) -> KktReport {
    let x = &s.x;
    let mut grad = &p.h * x + &p.g;
    if p.a_eq.nrows() > 0 {
        grad += p.a_eq.transpose() * &s.lambda_eq;
    }
    if p.a_in.nrows() > 0 {
        grad += p.a_in.transpose() * &s.lambda_ineq;
    }
    grad += &s.lambda_upper - &s.lambda_lower;
    let mut dual: f64 = 0.0;
    let mut comp: f64 = 0.0;
    for (i, l) in s.lambda_ineq.iter().enumerate() {
        dual = dual.max(-l);
        comp = comp.max((l * (p.a_in.row(i) * x - p.b_in.rows(i, 1))[0]).abs());
    }
    for i in 0..p.dim() {
        let (ll, lu) = (s.lambda_lower[i], s.lambda_upper[i]);
        dual = dual.max(-ll).max(-lu);
        if ll != 0.0 {
            comp = comp.max((ll * (p.lb[i] - x[i])).abs());
        }
        if lu != 0.0 {
            comp = comp.max((lu * (x[i] - p.ub[i])).abs());
        }
    }
    KktReport {
        stationarity: grad.amax(),
        primal: p.max_violation(x),
        dual,
        complementarity: comp,
    }
}

struct Row {
    id: ConstraintId,
    a: DVector<f64>,
    b: f64,
    equality: bool,
}

fn build_rows(p: &QpProblem) -> Vec<Row> {
    let d = p.dim();
    let mut rows = Vec::new();
    for i in 0..p.a_eq.nrows() {
        rows.push(Row { id: ConstraintId::Eq(i), a: p.a_eq.row(i).transpose(), b: p.b_eq[i], equality: true });
    }
    for i in 0..p.a_in.nrows() {
        rows.push(Row { id: ConstraintId::Ineq(i), a: p.a_in.row(i).transpose(), b: p.b_in[i], equality: false });
    }
    for i in 0..d {
        if p.lb[i].is_finite() {
            let mut a = DVector::zeros(d);
            a[i] = -1.0;
            rows.push(Row { id: ConstraintId::Lower(i), a, b: -p.lb[i], equality: false });
        }
        if p.ub[i].is_finite() {
            let mut a = DVector::zeros(d);
            a[i] = 1.0;
            rows.push(Row { id: ConstraintId::Upper(i), a, b: p.ub[i], equality: false });
        }
    }
    rows
}

/// Keep the candidates (in order) whose normals are linearly independent of
/// the ones kept before them.
fn independent_subset(rows: &[Row], candidates: impl IntoIterator<Item = usize>, d: usize) -> Vec<usize> {
    let mut basis: Vec<DVector<f64>> = Vec::new();
    let mut keep = Vec::new();
    for r in candidates {
        if basis.len() == d {
            break;
        }
        let a = &rows[r].a;
        let norm = a.norm();
        if norm == 0.0 {
            continue;
        }
        let mut v = a.clone();
        for _ in 0..2 {
            for b in &basis {
                let c = b.dot(&v);
                v.axpy(-c, b, 1.0);
            }
        }
        let n = v.norm();
        if n > 1e-9 * norm {
            basis.push(v / n);
            keep.push(r);
        }
    }
    keep
}

fn dependent(rows: &[Row], working: &[usize], r: usize) -> bool {
    let cands = working.iter().copied().chain(std::iter::once(r));
    let d = rows[r].a.len();
    independent_subset(rows, cands, d).last() != Some(&r)
}

fn positive_definite(h: &DMatrix<f64>) -> bool {
    h.clone().cholesky().is_some()
}

struct ActiveSetResult {
    x: DVector<f64>,
    working: Vec<usize>,
    lambda: Vec<f64>,
    iterations: usize,
}

enum ActiveSetFailure {
    MaxIterations(DVector<f64>),
    Singular,
}

/// Equality-constrained step: returns `p` and multipliers of the working rows.
fn kkt_step(h: &DMatrix<f64>, rows: &[Row], working: &[usize], grad: &DVector<f64>) -> Option<(DVector<f64>, Vec<f64>)> {
    let d = grad.len();
    let m = working.len();
    let mut k = DMatrix::zeros(d + m, d + m);
    k.view_mut((0, 0), (d, d)).copy_from(h);
    for (j, &r) in working.iter().enumerate() {
        for c in 0..d {
            k[(d + j, c)] = rows[r].a[c];
            k[(c, d + j)] = rows[r].a[c];
        }
    }
    let mut rhs = DVector::zeros(d + m);
    rhs.rows_mut(0, d).copy_from(&(-grad));
    let lu = k.clone().lu();
    let mut sol = lu.solve(&rhs)?;
    // one round of iterative refinement against ill-conditioned Jacobian rows
    let resid = &rhs - &k * &sol;
    sol += lu.solve(&resid)?;
    if !sol.iter().all(|v| v.is_finite()) {
        return None;
    }
    let p = sol.rows(0, d).into_owned();
    Some((p, sol.iter().skip(d).copied().collect()))
}

/// Primal active-set iterations from a feasible `x` and an independent working
/// set containing every equality row.
fn active_set(
    h: &DMatrix<f64>,
    g: &DVector<f64>,
    rows: &[Row],
    mut x: DVector<f64>,
    mut working: Vec<usize>,
    tol: f64,
    max_iter: usize,
) -> Result<ActiveSetResult, ActiveSetFailure> {
    let mut in_working = vec![false; rows.len()];
    for &r in &working {
        in_working[r] = true;
    }
    working.sort_unstable();
    let mut at_minimizer = false;
    for iter in 0..max_iter {
        let grad = h * &x + g;
        let (p, lam) = kkt_step(h, rows, &working, &grad).ok_or(ActiveSetFailure::Singular)?;
        let p_max = p.amax();
        // A full unblocked step lands on the subspace minimizer; whatever is
        // left of p afterwards is roundoff from the KKT solve.
        if at_minimizer || p_max <= 1e-11 * (1.0 + x.amax()) {
            at_minimizer = false;
            let mut worst: Option<(usize, f64)> = None;
            for (k, &r) in working.iter().enumerate() {
                if !rows[r].equality && lam[k] < -tol && worst.is_none_or(|(_, v)| lam[k] < v) {
                    worst = Some((k, lam[k]));
                }
            }
            match worst {
                None => {
                    let mut lambda = vec![0.0; rows.len()];
                    for (k, &r) in working.iter().enumerate() {
                        lambda[r] = lam[k];
                    }
                    return Ok(ActiveSetResult { x, working, lambda, iterations: iter + 1 });
                }
                Some((k, _)) => {
                    in_working[working[k]] = false;
                    working.remove(k);
                }
            }
        } else {
            let mut alpha = 1.0;
            let mut blocking = None;
            let p_norm = p.norm();
            for (r, row) in rows.iter().enumerate() {
                if in_working[r] || row.equality {
                    continue;
                }
                let ap = row.a.dot(&p);
                if ap > 1e-12 * row.a.norm() * p_norm {
                    let slack = (row.b - row.a.dot(&x)).max(0.0);
                    let ratio = slack / ap;
                    if ratio < alpha {
                        // a row in the span of the working set only blocks
                        // because p is roundoff; stop short without adding it
                        let dep = dependent(rows, &working, r);
                        alpha = ratio;
                        blocking = (!dep).then_some(r);
                    }
                }
            }
            x.axpy(alpha, &p, 1.0);
            if let Some(r) = blocking {
                in_working[r] = true;
                let pos = working.partition_point(|&w| w < r);
                working.insert(pos, r);
            } else {
                at_minimizer = true;
            }
        }
    }
    Err(ActiveSetFailure::MaxIterations(x))
}

fn violation(rows: &[Row], x: &DVector<f64>) -> f64 {
    rows.iter()
        .map(|r| {
            let v = r.a.dot(x) - r.b;
            if r.equality {
                v.abs()
            } else {
                v.max(0.0)
            }
        })
        .fold(0.0, f64::max)
}

/// Active-set QP solver with warm-start state carried between solves.
#[derive(Debug, Clone)]
pub struct QpSolver {
    pub tol: f64,
    pub max_iter: usize,
    warm_x: Option<DVector<f64>>,
    warm_active: Vec<ConstraintId>,
}

impl Default for QpSolver {
    fn default() -> Self {
        Self::new(DEFAULT_TOL, DEFAULT_MAX_ITER)
    }
}

impl QpSolver {
    pub fn new(tol: f64, max_iter: usize) -> Self {
        Self { tol, max_iter, warm_x: None, warm_active: Vec::new() }
    }

    /// Forget the warm-start point and working set.
    pub fn reset(&mut self) {
        self.warm_x = None;
        self.warm_active.clear();
    }

    /// Solve starting from the previous solution and working set, if any.
    pub fn solve(&mut self, p: &QpProblem) -> Result<QpSolution, QpError> {
        let start = self.warm_x.clone().filter(|x| x.len() == p.dim());
        self.solve_inner(p, start)
    }

    /// Solve starting from `start`. The point is clipped to the bounds and
    /// used directly when feasible.
    pub fn solve_from(&mut self, p: &QpProblem, start: &DVector<f64>) -> Result<QpSolution, QpError> {
        self.solve_inner(p, Some(start.clone()))
    }

    fn solve_inner(&mut self, p: &QpProblem, start: Option<DVector<f64>>) -> Result<QpSolution, QpError> {
        let t0 = Instant::now();
        p.validate()?;
        let d = p.dim();
        let rows = build_rows(p);
        let h = if positive_definite(&p.h) {
            p.h.clone()
        } else {
            &p.h + DMatrix::identity(d, d) * REGULARIZATION
        };

        let mut x0 = start.unwrap_or_else(|| DVector::zeros(d));
        for i in 0..d {
            x0[i] = x0[i].clamp(p.lb[i], p.ub[i]);
        }
        let mut phase1_iters = 0;
        let mut hint: Vec<usize> = self
            .warm_active
            .iter()
            .filter_map(|id| rows.iter().position(|r| r.id == *id))
            .collect();
        if violation(&rows, &x0) > self.tol {
            let (x, working, iters) = self.phase1(p, &rows, &x0)?;
            x0 = x;
            hint = working;
            phase1_iters = iters;
        }
        let eq_rows = (0..rows.len()).filter(|&r| rows[r].equality);
        let hinted = hint
            .into_iter()
            .filter(|&r| !rows[r].equality && (rows[r].a.dot(&x0) - rows[r].b).abs() <= self.tol);
        let mut cands: Vec<usize> = eq_rows.collect();
        let mut hinted: Vec<usize> = hinted.collect();
        hinted.sort_unstable();
        hinted.dedup();
        cands.extend(hinted);
        let working = independent_subset(&rows, cands, d);

        let res = match active_set(&h, &p.g, &rows, x0, working, self.tol, self.max_iter.saturating_sub(phase1_iters)) {
            Ok(r) => r,
            Err(ActiveSetFailure::MaxIterations(x)) => {
                return Err(QpError::MaxIterations { iterations: self.max_iter, x })
            }
            Err(ActiveSetFailure::Singular) => return Err(QpError::Singular),
        };

        let mut sol = QpSolution {
            objective: p.objective(&res.x),
            lambda_eq: DVector::zeros(p.a_eq.nrows()),
            lambda_ineq: DVector::zeros(p.a_in.nrows()),
            lambda_lower: DVector::zeros(d),
            lambda_upper: DVector::zeros(d),
            status: QpStatus::Optimal,
            iterations: res.iterations + phase1_iters,
            solve_time: Duration::ZERO,
            active: res.working.iter().map(|&r| rows[r].id).collect(),
            kkt: KktReport::default(),
            x: res.x,
        };
        for (r, row) in rows.iter().enumerate() {
            let l = res.lambda[r];
            match row.id {
                ConstraintId::Eq(i) => sol.lambda_eq[i] = l,
                ConstraintId::Ineq(i) => sol.lambda_ineq[i] = l,
                ConstraintId::Lower(i) => sol.lambda_lower[i] = l,
                ConstraintId::Upper(i) => sol.lambda_upper[i] = l,
            }
        }
        sol.kkt = check_kkt(p, &sol);
        self.warm_x = Some(sol.x.clone());
        self.warm_active = sol.active.clone();
        sol.solve_time = t0.elapsed();
        Ok(sol)
    }

    /// Minimize the largest inequality violation `t` over the equality set,
    /// with a small proximal term toward `x_ref`.
    fn phase1(&self, p: &QpProblem, rows: &[Row], x_ref: &DVector<f64>) -> Result<(DVector<f64>, Vec<usize>, usize), QpError> {
        let d = p.dim();
        let mut x = x_ref.clone();
        if p.a_eq.nrows() > 0 {
            let resid = &p.b_eq - &p.a_eq * &x;
            let svd = p.a_eq.clone().svd(true, true);
            let dx = svd.solve(&resid, 1e-12).map_err(|e| QpError::Invalid(e.to_string()))?;
            x += dx;
            let eq_viol = (&p.a_eq * &x - &p.b_eq).amax();
            if eq_viol > self.tol * (1.0 + p.b_eq.amax()) {
                return Err(QpError::Infeasible { violation: eq_viol });
            }
        }
        let ext = |r: &Row, t_coef: f64| {
            let mut a = DVector::zeros(d + 1);
            a.rows_mut(0, d).copy_from(&r.a);
            a[d] = t_coef;
            a
        };
        let mut prows: Vec<Row> = Vec::with_capacity(rows.len() + 1);
        for r in rows {
            let t_coef = if r.equality { 0.0 } else { -1.0 };
            prows.push(Row { id: r.id, a: ext(r, t_coef), b: r.b, equality: r.equality });
        }
        let mut t_row = DVector::zeros(d + 1);
        t_row[d] = -1.0;
        prows.push(Row { id: ConstraintId::Ineq(usize::MAX), a: t_row, b: 0.0, equality: false });

        let mut z = DVector::zeros(d + 1);
        z.rows_mut(0, d).copy_from(&x);
        z[d] = violation(rows, &x) + 1.0;
        let h = DMatrix::identity(d + 1, d + 1) * PHASE1_PROX;
        let mut g = DVector::zeros(d + 1);
        g.rows_mut(0, d).copy_from(&(x_ref * -PHASE1_PROX));
        g[d] = 1.0;
        let working = independent_subset(&prows, (0..prows.len()).filter(|&r| prows[r].equality), d + 1);
        let res = active_set(&h, &g, &prows, z, working, self.tol, self.max_iter).map_err(|e| match e {
            ActiveSetFailure::MaxIterations(x) => QpError::MaxIterations { iterations: self.max_iter, x: x.rows(0, d).into_owned() },
            ActiveSetFailure::Singular => QpError::Singular,
        })?;
        let x = res.x.rows(0, d).into_owned();
        let viol = violation(rows, &x);
        if viol > self.tol {
            return Err(QpError::Infeasible { violation: viol });
        }
        let working = res.working.into_iter().filter(|&r| r < rows.len()).collect();
        Ok((x, working, res.iterations))
    }
}

/// Cold-start solve with the given tolerance and iteration cap.
pub fn solve(p: &QpProblem, tol: f64, max_iter: usize) -> Result<QpSolution, QpError> {
    QpSolver::new(tol, max_iter).solve(p)
}
