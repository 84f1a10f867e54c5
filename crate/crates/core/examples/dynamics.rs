//! Kinematics and rigid-body dynamics of the shipped dual-arm model at a
//! bent-elbow posture.

use clampsim::model::DualArmModel;
use nalgebra::DVector;

fn main() -> anyhow::Result<()> {
    let model = DualArmModel::default();
    let q = DVector::from_fn(model.dof(), |i, _| if i % 7 == 3 { -0.4 } else { 0.05 });
    let kin = model.forward_kinematics(&q)?;
    for arm in 0..2 {
        let c = kin.contact(arm);
        println!("palm {arm}: position {:.4?}, quaternion {:.4?}", c.translation.as_slice(), c.quaternion_wxyz());
    }
    let m = model.mass_matrix_from(&kin);
    let eig = m.clone().symmetric_eigen().eigenvalues;
    println!("mass matrix eigenvalues in [{:.2e}, {:.2e}]", eig.min(), eig.max());
    println!("gravity torque, left arm {:.3?}", model.gravity_torque_from(&kin).rows(0, 7).as_slice());
    let jc = model.contact_jacobian_from(&kin);
    let sv = jc.view((0, 0), (6, 7)).into_owned().svd(false, false).singular_values;
    println!("left palm Jacobian singular values {:.3?}", sv.as_slice());
    Ok(())
}
