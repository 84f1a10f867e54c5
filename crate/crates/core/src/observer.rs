//! Generalized-momentum observer for external joint torques.
//!
//! ```text
//! τ̂_ext = K (M q̇ − ∫(τ + Cᵀq̇ − G − τf + τ̂_ext) dt)
//! τ̂_l   = τ̂_ext + Jcᵀ Wc
//! ```
//!
//! `Wc` stacks the measured wrenches the hands apply to the object (base
//! frame), so `JcᵀWc` cancels the reaction of the grasp and `τ̂_l` keeps only
//! what acts directly on the arm links. Joint accelerations are never used.

use nalgebra::{DMatrix, DVector};

/// Default observer gain (1/s).
pub const DEFAULT_GAIN: f64 = 50.0;

/// Model and sensor quantities for one observer step.
#[derive(Debug, Clone, Copy)]
pub struct ObserverInputs<'a> {
    pub mass: &'a DMatrix<f64>,
    /// `C(q, q̇)ᵀ q̇`
    pub coriolis_transpose: &'a DVector<f64>,
    pub gravity: &'a DVector<f64>,
    pub friction: &'a DVector<f64>,
    pub qd: &'a DVector<f64>,
    /// Actuator torque applied over the step.
    pub tau: &'a DVector<f64>,
    /// 12×2n contact Jacobian.
    pub contact_jacobian: &'a DMatrix<f64>,
    /// Stacked measured contact wrenches `[W1; W2]`, base frame.
    pub contact_wrenches: &'a DVector<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MomentumObserver {
    gain: DVector<f64>,
    integral: DVector<f64>,
    tau_ext: DVector<f64>,
    tau_l: DVector<f64>,
}

impl MomentumObserver {
    /// Observer with per-joint gains; every entry must be positive and finite.
    pub fn new(gain: DVector<f64>) -> Self {
        assert!(
            gain.iter().all(|k| *k > 0.0 && k.is_finite()),
            "observer gains must be positive"
        );
        let n = gain.len();
        Self {
            gain,
            integral: DVector::zeros(n),
            tau_ext: DVector::zeros(n),
            tau_l: DVector::zeros(n),
        }
    }

    pub fn uniform(n: usize, gain: f64) -> Self {
        Self::new(DVector::from_element(n, gain))
    }

    pub fn gain(&self) -> &DVector<f64> {
        &self.gain
    }

    pub fn tau_ext(&self) -> &DVector<f64> {
        &self.tau_ext
    }

    pub fn tau_l(&self) -> &DVector<f64> {
        &self.tau_l
    }

    /// Zero the estimates at the current momentum `M q̇`.
    pub fn reset(&mut self, mass: &DMatrix<f64>, qd: &DVector<f64>) {
        self.reset_with(mass, qd, &DVector::zeros(qd.len()));
    }

    /// Start from a known estimate, e.g. the reaction of an initial grasp.
    pub fn reset_with(&mut self, mass: &DMatrix<f64>, qd: &DVector<f64>, tau_ext: &DVector<f64>) {
        let p = mass * qd;
        self.integral = &p - tau_ext.component_div(&self.gain);
        self.tau_ext = tau_ext.clone();
        self.tau_l = tau_ext.clone();
    }

    /// One explicit-Euler step; returns `(τ̂_ext, τ̂_l)`.
    pub fn update(&mut self, inputs: &ObserverInputs<'_>, dt: f64) -> (&DVector<f64>, &DVector<f64>) {
        assert!(dt > 0.0, "observer step must be positive");
        let rate = inputs.tau + inputs.coriolis_transpose - inputs.gravity - inputs.friction + &self.tau_ext;
        self.integral.axpy(dt, &rate, 1.0);
        let p = inputs.mass * inputs.qd;
        self.tau_ext = (p - &self.integral).component_mul(&self.gain);
        self.tau_l = &self.tau_ext + inputs.contact_jacobian.transpose() * inputs.contact_wrenches;
        assert!(
            self.tau_ext.iter().all(|v| v.is_finite()),
            "observer estimate diverged"
        );
        (&self.tau_ext, &self.tau_l)
    }
}
