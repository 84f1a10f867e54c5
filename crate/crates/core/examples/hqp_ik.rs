//! Two-level velocity IK: hold both palms still while a joint-space request
//! swings the left elbow, first freely and then against a wrist-yaw bound.

use clampsim::hqp::{compute_bounds, Hqp, DEFAULT_RHO};
use clampsim::model::DualArmModel;
use nalgebra::DVector;

fn main() -> anyhow::Result<()> {
    let model = DualArmModel::default();
    let mut hqp = Hqp::new(DEFAULT_RHO);
    let xdot = DVector::zeros(12);
    let mut request = DVector::zeros(model.dof());
    request[6] = 0.5;
    for wrist in [0.0, 0.799] {
        let mut q = DVector::zeros(model.dof());
        q[6] = wrist;
        let jc = model.contact_jacobian(&q);
        let bounds = compute_bounds(&model, &q, 0.05);
        let res = hqp.solve(&jc, &xdot, &request, &bounds)?;
        println!(
            "wrist yaw {wrist:.3}: command {:.4?}, palm motion {:.1e}, bounds hit {:?}",
            res.qd_cmd.rows(0, 7).as_slice(),
            (&jc * &res.qd_cmd).amax(),
            res.active_bounds
        );
    }
    Ok(())
}
