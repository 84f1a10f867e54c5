//! Smallest squeeze that keeps both palms inside an octagonal friction cone,
//! for the three box loads of the stacking experiment.

use clampsim::grasp::{midpoint_frame, symmetric_contacts, GraspMaps};
use clampsim::model::GRAVITY;
use clampsim::spatial::{Vec3, Wrench};
use clampsim::wrenchopt::{FrictionParams, WrenchOptimizer};

fn main() -> anyhow::Result<()> {
    let contacts = symmetric_contacts(Vec3::new(0.33, 0.0, -0.25), 0.1);
    let maps = GraspMaps::build(contacts, midpoint_frame(&contacts))?;
    let params = FrictionParams { mu: [0.15; 2], lambda: [0.01; 2], patch: [(0.04, 0.04); 2], facets: 8 };
    let mut opt = WrenchOptimizer::new(params)?;
    for mass in [0.4, 1.2, 1.4] {
        let wa = Wrench::from_force(Vec3::new(0.0, 0.0, mass * GRAVITY));
        let target = opt.update(&maps, &wa);
        println!("{mass:.1} kg: squeeze {:.4} N, active {:?}", target.wr_dx_star, target.active);
    }
    Ok(())
}
