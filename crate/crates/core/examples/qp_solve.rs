//! A small bounded, constrained QP and its KKT residuals.

use clampsim::qpsolver::{check_kkt, solve, QpProblem, DEFAULT_MAX_ITER, DEFAULT_TOL};
use nalgebra::{dmatrix, dvector};

fn main() -> anyhow::Result<()> {
    // min ½|x - (2, 1, -1)|² s.t. x0 + x1 + x2 = 1, x0 - x1 <= 0.5, -1 <= x <= 1
    let p = QpProblem::new(dmatrix![1.0, 0.0, 0.0; 0.0, 1.0, 0.0; 0.0, 0.0, 1.0], dvector![-2.0, -1.0, 1.0])
        .with_equalities(dmatrix![1.0, 1.0, 1.0], dvector![1.0])
        .with_inequalities(dmatrix![1.0, -1.0, 0.0], dvector![0.5])
        .with_bounds(dvector![-1.0, -1.0, -1.0], dvector![1.0, 1.0, 1.0]);
    let s = solve(&p, DEFAULT_TOL, DEFAULT_MAX_ITER)?;
    println!("x = {:.6?} after {} iterations, active {:?}", s.x.as_slice(), s.iterations, s.active);
    println!("max KKT residual {:.1e}", check_kkt(&p, &s).max());
    Ok(())
}
