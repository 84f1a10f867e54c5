//! Estimate a 2 N·m torque step on the left elbow of a moving arm pair from
//! motor torques and joint velocities only.

use clampsim::model::DualArmModel;
use clampsim::observer::{MomentumObserver, ObserverInputs};
use nalgebra::{DMatrix, DVector};

fn main() -> anyhow::Result<()> {
    let model = DualArmModel::default();
    let n = model.dof();
    let dt = 1e-3;
    let traj = |t: f64| {
        let q = DVector::from_fn(n, |i, _| 0.1 * (2.0 * t + i as f64).sin());
        let qd = DVector::from_fn(n, |i, _| 0.2 * (2.0 * t + i as f64).cos());
        let qdd = DVector::from_fn(n, |i, _| -0.4 * (2.0 * t + i as f64).sin());
        (q, qd, qdd)
    };
    let mut obs = MomentumObserver::uniform(n, 50.0);
    let (q0, qd0, _) = traj(0.0);
    obs.reset(&model.mass_matrix(&q0), &qd0);
    let (jc, wc) = (DMatrix::zeros(12, n), DVector::zeros(12));
    for k in 0..400 {
        let t = k as f64 * dt;
        let mut tau_ext = DVector::zeros(n);
        if t >= 0.1 {
            tau_ext[3] = 2.0;
        }
        let (q, qd, qdd) = traj(t + 0.5 * dt);
        let tau = model.inverse_dynamics(&q, &qd, &qdd, &tau_ext)?;
        let (q1, qd1, _) = traj(t + dt);
        let bias = model.bias_terms(&q1, &qd1);
        let mass = model.mass_matrix(&q1);
        let friction = model.friction_torque(&qd1);
        let inputs = ObserverInputs {
            mass: &mass,
            coriolis_transpose: &bias.coriolis_transpose,
            gravity: &bias.gravity,
            friction: &friction,
            qd: &qd1,
            tau: &tau,
            contact_jacobian: &jc,
            contact_wrenches: &wc,
        };
        let (est, _) = obs.update(&inputs, dt);
        if k % 50 == 49 {
            println!("t = {:.2} s  elbow estimate {:.4} N·m (true {:.1})", t + dt, est[3], tau_ext[3]);
        }
    }
    Ok(())
}
