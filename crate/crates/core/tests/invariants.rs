//! Per-cycle invariants of the closed loop, checked on the shipped scenarios.

use std::path::PathBuf;

use clampsim::hqp::compute_bounds;
use clampsim::scenario::{Controller, ScenarioConfig};
use clampsim::sim::Simulator;

fn scenario(name: &str) -> ScenarioConfig {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("config/scenarios").join(format!("{name}.toml"));
    ScenarioConfig::load(path).unwrap()
}

/// Run `cfg` for at most `duration` seconds (settling included), calling
/// `check` after every plant step.
fn drive(cfg: &ScenarioConfig, duration: f64, mut check: impl FnMut(&Simulator, &nalgebra::DVector<f64>)) {
    let model = cfg.load_model().unwrap();
    let mut sim = Simulator::new(model.clone(), cfg.sim_params(), cfg.initial_q(&model), cfg.initial_squeeze).unwrap();
    sim.set_time(-cfg.settle);
    let mut sensors = sim.sensors();
    let mut ctl = Controller::new(model.clone(), cfg, &sensors).unwrap();
    let steps = ((duration + cfg.settle) / cfg.dt).round() as usize;
    for _ in 0..steps {
        let out = ctl.step(&sensors, sensors.t).unwrap();
        let bounds = compute_bounds(&model, &sensors.q, cfg.bound_horizon);
        for i in 0..model.dof() {
            assert!(
                out.qd_cmd[i] >= bounds.lower[i] - 1e-9 && out.qd_cmd[i] <= bounds.upper[i] + 1e-9,
                "joint {i} command {} outside [{}, {}] at t = {}",
                out.qd_cmd[i],
                bounds.lower[i],
                bounds.upper[i],
                sensors.t
            );
        }
        sim.step(&out.qd_cmd).unwrap();
        check(&sim, &out.qd_cmd);
        if sim.state().dropped {
            break;
        }
        sensors = sim.sensors();
    }
}

#[test]
fn sticking_contacts_stay_inside_the_true_friction_cone() {
    for (name, duration) in [("exp1_constant", 1.5), ("exp1_optimized", 8.0)] {
        let mut cfg = scenario(name);
        for s in &mut cfg.stacking {
            s.t = s.t.min(0.5);
        }
        let mu = cfg.plant.contact.mu;
        let mut slipped = false;
        drive(&cfg, duration, |sim, _| {
            let st = sim.state();
            for (i, ratio) in st.friction_ratios().iter().enumerate() {
                slipped |= st.contacts[i].slip;
                if let (false, Some(r)) = (st.contacts[i].slip, ratio) {
                    assert!(*r <= mu + 1e-6, "{name}: contact {i} ratio {r} at t = {}", st.t);
                }
            }
        });
        assert_eq!(slipped, name == "exp1_constant", "{name}");
    }
}

#[test]
fn pressed_joint_never_leaves_its_range() {
    let mut cfg = scenario("joint_limit");
    cfg.disturbance[0].t_end = 4.0;
    let model = cfg.load_model().unwrap();
    let (lo, hi) = (model.q_min(), model.q_max());
    drive(&cfg, 5.0, |sim, _| {
        let q = &sim.state().q;
        let qd = &sim.state().qd;
        for i in 0..q.len() {
            // at most one Euler step past the bound
            let slack = qd[i].abs() * cfg.dt + 1e-9;
            assert!(q[i] >= lo[i] - slack && q[i] <= hi[i] + slack, "joint {i} at {} outside limits", q[i]);
        }
    });
}
