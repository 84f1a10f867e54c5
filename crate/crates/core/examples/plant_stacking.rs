//! The contact plant alone: arms frozen around a 0.4 kg box squeezed with
//! 12 N, then an 800 g load lands on it and the palms slip.

use clampsim::model::DualArmModel;
use clampsim::sim::{SimParams, Simulator, StackEvent};
use nalgebra::DVector;

fn main() -> anyhow::Result<()> {
    let model = DualArmModel::default();
    let params = SimParams { stacking: vec![StackEvent { t: 0.5, mass: 0.8, ramp: 0.0 }], ..SimParams::default() };
    let q0 = DVector::zeros(model.dof());
    let mut sim = Simulator::new(model, params, q0.clone(), 12.0)?;
    let still = DVector::zeros(q0.len());
    let z0 = sim.state().object.translation.z;
    for k in 1..=700 {
        let s = sim.step(&still)?;
        if k % 100 == 0 {
            println!(
                "t = {:.1} s  mass {:.1} kg  drop {:+.4} m  slip {:?}  palm ratio {:.3?}",
                s.t,
                s.object_mass,
                s.object.translation.z - z0,
                s.slip(),
                s.friction_ratios()[0]
            );
        }
    }
    Ok(())
}
