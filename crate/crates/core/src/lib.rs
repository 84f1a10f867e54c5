//! Dual-arm rigid-object manipulation: grasp-wrench decomposition, friction
//! constrained internal-force optimization, admittance control with a
//! generalized-momentum observer, two-level hierarchical QP inverse
//! kinematics and a penalty-contact simulator to exercise all of it.

// `!(x > 0.0)` style checks are used on purpose to reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod controllers;
pub mod grasp;
pub mod hqp;
pub mod model;
pub mod observer;
pub mod qpsolver;
pub mod scenario;
pub mod sim;
pub mod spatial;
pub mod wrenchopt;
