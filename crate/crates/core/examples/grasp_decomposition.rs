//! Split two measured hand wrenches into the net object wrench and the
//! internal squeeze, then rebuild them.

use clampsim::grasp::{midpoint_frame, symmetric_contacts, GraspMaps};
use clampsim::spatial::{Vec3, Wrench};

fn main() -> anyhow::Result<()> {
    let contacts = symmetric_contacts(Vec3::new(0.33, 0.0, -0.25), 0.1);
    let maps = GraspMaps::build(contacts, midpoint_frame(&contacts))?;

    // each palm presses with 12 N and carries half of a 0.4 kg box
    let w1 = Wrench::from_force(Vec3::new(-12.0, 0.0, 1.962));
    let w2 = Wrench::from_force(Vec3::new(-12.0, 0.0, 1.962));
    let (wa, wr) = maps.decompose(&w1, &w2);
    println!("object wrench   {:?}", wa.to_vector().as_slice());
    println!("internal wrench {:?}", wr.to_vector().as_slice());

    let (r1, r2) = maps.recompose(&wa, &wr);
    println!("rebuilt hand 1  {:?}", r1.to_vector().as_slice());
    println!("rebuilt hand 2  {:?}", r2.to_vector().as_slice());
    Ok(())
}
