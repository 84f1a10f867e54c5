//! Object admittance on a kinematic object: a steady 5 N push settles at the
//! stiffness offset.

use clampsim::controllers::{AdmittanceGains, DesiredPose, ObjectAdmittance};
use clampsim::spatial::{pose_error, pose_from_error, Pose, Vec3, Wrench};

fn main() -> anyhow::Result<()> {
    let ctl = ObjectAdmittance::new(AdmittanceGains::default(), DesiredPose::fixed(Pose::identity()));
    let push = Wrench::from_force(Vec3::new(5.0, 0.0, 0.0));
    let dt = 1e-3;
    let mut x = Pose::identity();
    for k in 0..=500 {
        let v = ctl.command(&push, &x, k as f64 * dt)?;
        x = pose_from_error(&x, &(v.to_vector() * dt));
        if k % 100 == 0 {
            println!("t = {:.1} s  x offset {:+.5} m", k as f64 * dt, pose_error(&x, &Pose::identity())?[3]);
        }
    }
    Ok(())
}
