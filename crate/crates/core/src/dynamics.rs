//! Longitudinal vehicle model with first-order engine lag.
//!
//! The nonlinear plant is
//!
//! ```text
//!     dx/dt = v
//!     dv/dt = a
//!     da/dt = f(v, a) + g(v) * eta
//!     f(v, a) = -(2 K_d / m) v a - (1 / tau) (a + (K_d / m) v^2 + d_m / m)
//!     g(v)    = 1 / (m tau)
//! ```
//!
//! With the feedback-linearizing engine input `eta = m u + K_d v^2 + d_m + 2 tau K_d v a`
//! the acceleration obeys `da/dt = (u - a) / tau`, a linear triple integrator with lag.
//! That linear model is what the MPC predicts with; the plant integrates the full
//! nonlinear model so that parameter mismatch between the two can be studied.

use serde::{Deserialize, Serialize};

/// Default vehicle length used for the preceding vehicle when scenario data has none.
pub const DEFAULT_VEHICLE_LENGTH: f64 = 4.5;

/// Largest RK4 substep used by the plant integrator (s).
const PLANT_SUBSTEP: f64 = 0.005;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehicleState {
    /// Position along the lane (m).
    pub x: f64,
    /// Speed (m/s).
    pub v: f64,
    /// Realized acceleration (m/s^2).
    pub a: f64,
    /// Simulation time (s).
    pub t: f64,
}

impl VehicleState {
    pub fn new(x: f64, v: f64, a: f64, t: f64) -> Self {
        Self { x, v, a, t }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.v.is_finite() && self.a.is_finite() && self.t.is_finite()
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.x, self.v, self.a]
    }
}

/// Physical parameters of the plant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlantParams {
    /// Aerodynamic drag coefficient (kg/m).
    #[serde(rename = "K_d")]
    pub drag_coeff: f64,
    /// Vehicle mass (kg).
    pub m: f64,
    /// Engine time lag (s).
    pub tau_a: f64,
    /// Mechanical drag (N).
    pub d_m: f64,
}

impl Default for PlantParams {
    fn default() -> Self {
        Self {
            drag_coeff: 0.55,
            m: 1500.0,
            tau_a: 0.4,
            d_m: 150.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PlantParamsError {
    #[error("mass must be positive, got {0}")]
    Mass(f64),
    #[error("engine lag must be positive, got {0}")]
    Lag(f64),
    #[error("aerodynamic drag must be non-negative, got {0}")]
    Drag(f64),
    #[error("mechanical drag must be non-negative, got {0}")]
    MechanicalDrag(f64),
}

impl PlantParams {
    pub fn validate(&self) -> Result<(), PlantParamsError> {
        if !(self.m > 0.0) || !self.m.is_finite() {
            return Err(PlantParamsError::Mass(self.m));
        }
        if !(self.tau_a > 0.0) || !self.tau_a.is_finite() {
            return Err(PlantParamsError::Lag(self.tau_a));
        }
        if !(self.drag_coeff >= 0.0) || !self.drag_coeff.is_finite() {
            return Err(PlantParamsError::Drag(self.drag_coeff));
        }
        if !(self.d_m >= 0.0) || !self.d_m.is_finite() {
            return Err(PlantParamsError::MechanicalDrag(self.d_m));
        }
        Ok(())
    }

    /// Drift term `f(v, a)` of the acceleration equation.
    pub fn drift(&self, v: f64, a: f64) -> f64 {
        let kd_m = self.drag_coeff / self.m;
        -2.0 * kd_m * v * a - (a + kd_m * v * v + self.d_m / self.m) / self.tau_a
    }

    /// Input gain `g(v)`; constant for this model.
    pub fn input_gain(&self) -> f64 {
        1.0 / (self.m * self.tau_a)
    }
}

/// A desired acceleration together with the engine input that realizes it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControlInput {
    pub u: f64,
    pub eta: f64,
}

impl ControlInput {
    pub fn new(state: &VehicleState, u: f64, params: &PlantParams) -> Self {
        Self {
            u,
            eta: feedback_linearize(state, u, params),
        }
    }
}

/// Engine input that cancels the drag terms so that `da/dt = (u - a) / tau`.
pub fn feedback_linearize(state: &VehicleState, u: f64, params: &PlantParams) -> f64 {
    let v = state.v;
    params.m * u
        + params.drag_coeff * v * v
        + params.d_m
        + 2.0 * params.tau_a * params.drag_coeff * v * state.a
}

/// Right-hand side of the nonlinear model for a given engine input.
pub fn nonlinear_rhs(v: f64, a: f64, eta: f64, params: &PlantParams) -> [f64; 3] {
    [v, a, params.drift(v, a) + params.input_gain() * eta]
}

/// Exact zero-order-hold discretization of the linear lag model.
///
/// Returns `(A_d, B_d)` such that `s_{k+1} = A_d s_k + B_d u_k` for `s = (x, v, a)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ZohModel {
    pub a: [[f64; 3]; 3],
    pub b: [f64; 3],
    pub dt: f64,
    pub tau: f64,
}

impl ZohModel {
    pub fn new(tau: f64, dt: f64) -> Self {
        debug_assert!(tau > 0.0 && dt > 0.0);
        let ratio = dt / tau;
        // 1 - exp(-dt/tau), kept accurate for small ratios
        let decay = -(-ratio).exp_m1();
        let e = 1.0 - decay;
        // integral over the step of (1 - exp(-s/tau)), scaled by tau
        let x_from_a = tau * (dt - tau * decay);
        let v_from_a = tau * decay;
        Self {
            a: [[1.0, dt, x_from_a], [0.0, 1.0, v_from_a], [0.0, 0.0, e]],
            b: [0.5 * dt * dt - x_from_a, dt - v_from_a, decay],
            dt,
            tau,
        }
    }

    pub fn step(&self, s: [f64; 3], u: f64) -> [f64; 3] {
        let mut out = [0.0; 3];
        for (i, row) in self.a.iter().enumerate() {
            out[i] = row[0] * s[0] + row[1] * s[1] + row[2] * s[2] + self.b[i] * u;
        }
        out
    }

    /// Speed gain of the input over one step.
    pub fn speed_gain(&self) -> f64 {
        self.b[1]
    }
}

/// Propagates the linearized `(x, v, a)` model one step of `dt` under constant `u`.
pub fn linear_accel_step(state: &VehicleState, u: f64, tau_a: f64, dt: f64) -> VehicleState {
    let next = ZohModel::new(tau_a, dt).step(state.as_array(), u);
    VehicleState::new(next[0], next[1], next[2], state.t + dt)
}

/// Integrates the nonlinear plant for `dt` with `u` held and the feedback law evaluated
/// continuously from the current state. The controller uses the same parameters as the plant.
pub fn plant_step(state: &VehicleState, u: f64, params: &PlantParams, dt: f64) -> VehicleState {
    plant_step_with_model(state, u, params, params, dt)
}

/// Like [`plant_step`], but the feedback law uses `model` while the plant evolves with `plant`.
pub fn plant_step_with_model(
    state: &VehicleState,
    u: f64,
    plant: &PlantParams,
    model: &PlantParams,
    dt: f64,
) -> VehicleState {
    let substeps = (dt / PLANT_SUBSTEP).ceil().max(1.0) as usize;
    let h = dt / substeps as f64;
    let rhs = |s: [f64; 3]| {
        let probe = VehicleState::new(s[0], s[1], s[2], 0.0);
        let eta = feedback_linearize(&probe, u, model);
        nonlinear_rhs(s[1], s[2], eta, plant)
    };
    let mut s = state.as_array();
    for _ in 0..substeps {
        let k1 = rhs(s);
        let k2 = rhs(axpy(s, 0.5 * h, k1));
        let k3 = rhs(axpy(s, 0.5 * h, k2));
        let k4 = rhs(axpy(s, h, k3));
        for i in 0..3 {
            s[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        // no reverse gear
        if s[1] < 0.0 {
            s[1] = 0.0;
            s[2] = 0.0;
        }
    }
    VehicleState::new(s[0], s[1], s[2], state.t + dt)
}

fn axpy(s: [f64; 3], h: f64, k: [f64; 3]) -> [f64; 3] {
    [s[0] + h * k[0], s[1] + h * k[1], s[2] + h * k[2]]
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn rk4_linear(state: &VehicleState, u: f64, tau: f64, dt: f64, n: usize) -> [f64; 3] {
        let h = dt / n as f64;
        let f = |s: [f64; 3]| [s[1], s[2], (u - s[2]) / tau];
        let mut s = state.as_array();
        for _ in 0..n {
            let k1 = f(s);
            let k2 = f(axpy(s, 0.5 * h, k1));
            let k3 = f(axpy(s, 0.5 * h, k2));
            let k4 = f(axpy(s, h, k3));
            for i in 0..3 {
                s[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
            }
        }
        s
    }

    #[test]
    fn feedback_linearize_zero() {
        let s = VehicleState::new(0.0, 0.0, 0.0, 0.0);
        let p = PlantParams {
            drag_coeff: 0.0,
            d_m: 0.0,
            ..Default::default()
        };
        assert_eq!(feedback_linearize(&s, 0.0, &p), 0.0);
    }

    #[test]
    fn feedback_linearize_substitution() {
        let s = VehicleState::new(0.0, 10.0, 0.0, 0.0);
        let p = PlantParams {
            drag_coeff: 0.5,
            m: 1500.0,
            tau_a: 0.4,
            d_m: 100.0,
        };
        assert_abs_diff_eq!(feedback_linearize(&s, 1.0, &p), 1650.0, epsilon = 1e-12);
    }

    #[test]
    fn settled_acceleration_gives_kinematics() {
        let s = VehicleState::new(1.0, 2.0, 0.5, 0.0);
        let n = linear_accel_step(&s, 0.5, 0.4, 0.3);
        assert_abs_diff_eq!(n.a, 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(n.v, 2.0 + 0.5 * 0.3, epsilon = 1e-12);
        assert_abs_diff_eq!(n.x, 1.0 + 2.0 * 0.3 + 0.25 * 0.09, epsilon = 1e-12);
        assert_abs_diff_eq!(n.t, 0.3, epsilon = 1e-15);
    }

    #[test]
    fn first_order_response() {
        let s = VehicleState::new(0.0, 0.0, 0.0, 0.0);
        let n = linear_accel_step(&s, 1.0, 0.5, 0.5);
        assert_abs_diff_eq!(n.a, 1.0 - (-1.0f64).exp(), epsilon = 1e-12);
        assert_abs_diff_eq!(n.a, 0.632, epsilon = 1e-3);
    }

    #[test]
    fn stationary_plant_stays_put() {
        let s = VehicleState::new(3.0, 0.0, 0.0, 1.0);
        let p = PlantParams {
            drag_coeff: 0.0,
            d_m: 0.0,
            ..Default::default()
        };
        let n = plant_step(&s, 0.0, &p, 0.1);
        assert_eq!((n.x, n.v, n.a), (3.0, 0.0, 0.0));
        assert_abs_diff_eq!(n.t, 1.1, epsilon = 1e-12);
    }

    #[test]
    fn hard_braking_clamps_at_standstill() {
        let mut s = VehicleState::new(0.0, 0.5, -3.0, 0.0);
        let p = PlantParams::default();
        for _ in 0..20 {
            s = plant_step(&s, -3.5, &p, 0.1);
            assert!(s.v >= 0.0);
        }
        assert_eq!(s.v, 0.0);
        assert_eq!(s.a, 0.0);
    }

    #[test]
    fn params_validation() {
        assert!(PlantParams::default().validate().is_ok());
        let bad = PlantParams {
            m: 0.0,
            ..Default::default()
        };
        assert_eq!(bad.validate(), Err(PlantParamsError::Mass(0.0)));
        let bad = PlantParams {
            tau_a: -1.0,
            ..Default::default()
        };
        assert!(matches!(bad.validate(), Err(PlantParamsError::Lag(_))));
    }

    proptest! {
        #[test]
        fn cancellation_residual(
            v in 0.0f64..40.0, a in -4.0f64..4.0, u in -4.0f64..4.0,
            m in 800.0f64..3000.0, kd in 0.0f64..1.5, dm in 0.0f64..400.0, tau in 0.1f64..1.0,
        ) {
            let p = PlantParams { drag_coeff: kd, m, tau_a: tau, d_m: dm };
            let s = VehicleState::new(0.0, v, a, 0.0);
            let eta = feedback_linearize(&s, u, &p);
            let adot = nonlinear_rhs(v, a, eta, &p)[2];
            prop_assert!((adot - (u - a) / tau).abs() < 1e-9);
        }

        #[test]
        fn zoh_matches_fine_rk4(
            x in -50.0f64..50.0, v in 0.0f64..30.0, a in -3.0f64..3.0,
            u in -3.5f64..3.0, tau in 0.2f64..1.0, dt in 0.05f64..1.0,
        ) {
            let s = VehicleState::new(x, v, a, 0.0);
            let zoh = linear_accel_step(&s, u, tau, dt);
            let fine = rk4_linear(&s, u, tau, dt, 1000);
            prop_assert!((zoh.x - fine[0]).abs() < 1e-6);
            prop_assert!((zoh.v - fine[1]).abs() < 1e-6);
            prop_assert!((zoh.a - fine[2]).abs() < 1e-6);
        }

        #[test]
        fn closed_form_relaxation(a0 in -3.0f64..3.0, u in -3.5f64..3.0, tau in 0.1f64..1.0, k in 1usize..50) {
            let dt = 0.1;
            let mut s = VehicleState::new(0.0, 10.0, a0, 0.0);
            let mut prev_err = (a0 - u).abs();
            for _ in 0..k {
                s = linear_accel_step(&s, u, tau, dt);
                let err = (s.a - u).abs();
                prop_assert!(err <= prev_err + 1e-15);
                prev_err = err;
            }
            let t = k as f64 * dt;
            let expected = u + (a0 - u) * (-t / tau).exp();
            prop_assert!((s.a - expected).abs() < 1e-9);
        }

        #[test]
        fn zoh_semigroup(x in -10.0f64..10.0, v in 0.0f64..20.0, a in -3.0f64..3.0,
                         u in -3.5f64..3.0, tau in 0.2f64..1.0, k in 1usize..20) {
            let dt = 0.1;
            let mut s = VehicleState::new(x, v, a, 0.0);
            let one = linear_accel_step(&s, u, tau, k as f64 * dt);
            for _ in 0..k {
                s = linear_accel_step(&s, u, tau, dt);
            }
            prop_assert!((s.x - one.x).abs() < 1e-9);
            prop_assert!((s.v - one.v).abs() < 1e-9);
            prop_assert!((s.a - one.a).abs() < 1e-9);
        }

        #[test]
        fn plant_matches_linear_model(
            v in 0.5f64..30.0, a in -2.0f64..2.0, u in -3.5f64..3.0,
            m in 800.0f64..3000.0, kd in 0.0f64..1.5, dm in 0.0f64..400.0, tau in 0.2f64..1.0,
        ) {
            let p = PlantParams { drag_coeff: kd, m, tau_a: tau, d_m: dm };
            let s = VehicleState::new(0.0, v, a, 0.0);
            let lin = linear_accel_step(&s, u, tau, 0.1);
            // skip cases that would reach standstill within the step
            prop_assume!(lin.v > 0.05);
            let nl = plant_step(&s, u, &p, 0.1);
            prop_assert!((nl.x - lin.x).abs() < 1e-6);
            prop_assert!((nl.v - lin.v).abs() < 1e-6);
            prop_assert!((nl.a - lin.a).abs() < 1e-6);
        }
    }
}
