//! Battery dynamics, demand output, and feasibility checking of control
//! sequences over a horizon. Dynamics never clamp; constraint violations are
//! surfaced explicitly through [`check_feasible`].

use crate::grid::BatteryParams;
use serde::{Deserialize, Serialize};

/// Charging/discharging powers applied during one step.
///
/// `charge >= 0` is the charging power drawn from the grid, `discharge <= 0`
/// is the discharging power fed back. Both may be nonzero within the same
/// step; the combined-rate constraint bounds their joint magnitude.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ControlPair {
    pub charge: f64,
    pub discharge: f64,
}

impl ControlPair {
    pub fn new(charge: f64, discharge: f64) -> Self {
        Self { charge, discharge }
    }

    pub fn idle() -> Self {
        Self::default()
    }
}

/// State-of-charge sequence `x(k), ..., x(k+N)` in kWh.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SocTrajectory(pub Vec<f64>);

impl SocTrajectory {
    pub fn values(&self) -> &[f64] {
        &self.0
    }
}

/// One-step state of charge update: `alpha * x + T * (beta * u+ + u-)`.
pub fn step_dynamics(soc: f64, u: ControlPair, p: &BatteryParams, step_hours: f64) -> f64 {
    p.self_discharge * soc + step_hours * (p.charge_efficiency * u.charge + u.discharge)
}

/// Power demand seen by the grid: `w + u+ + gamma * u-`.
pub fn output_demand(net_consumption: f64, u: ControlPair, p: &BatteryParams) -> f64 {
    net_consumption + u.charge + p.discharge_efficiency * u.discharge
}

/// Chains [`step_dynamics`] and [`output_demand`] over a horizon. Returns the
/// state trajectory (N + 1 values, starting at `soc0`) and the demand profile
/// (N values).
pub fn simulate_horizon(
    soc0: f64,
    controls: &[ControlPair],
    net_consumption: &[f64],
    p: &BatteryParams,
    step_hours: f64,
) -> (SocTrajectory, Vec<f64>) {
    assert_eq!(
        controls.len(),
        net_consumption.len(),
        "control and net-consumption horizons must agree"
    );
    let mut soc = Vec::with_capacity(controls.len() + 1);
    let mut demand = Vec::with_capacity(controls.len());
    soc.push(soc0);
    let mut x = soc0;
    for (u, &w) in controls.iter().zip(net_consumption) {
        demand.push(output_demand(w, *u, p));
        x = step_dynamics(x, *u, p, step_hours);
        soc.push(x);
    }
    (SocTrajectory(soc), demand)
}

/// First violated constraint of a control plan, with step index and excess.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Violation {
    /// `u- < discharge_limit` or `u- > 0`.
    DischargeBound { step: usize, value: f64 },
    /// `u+ > charge_limit` or `u+ < 0`.
    ChargeBound { step: usize, value: f64 },
    /// Combined rate `u-/u_min + u+/u_max` outside `[0, 1]`.
    CombinedRate { step: usize, value: f64 },
    /// State of charge left `[0, capacity]`.
    SocBound { step: usize, value: f64 },
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Violation::DischargeBound { step, value } => {
                write!(f, "discharge power {value} out of bounds at step {step}")
            }
            Violation::ChargeBound { step, value } => {
                write!(f, "charge power {value} out of bounds at step {step}")
            }
            Violation::CombinedRate { step, value } => {
                write!(f, "combined charge/discharge rate {value} outside [0, 1] at step {step}")
            }
            Violation::SocBound { step, value } => {
                write!(f, "state of charge {value} outside [0, capacity] at step {step}")
            }
        }
    }
}

/// Share of a power limit used by one control, with the convention that a
/// zero limit contributes zero share for a zero control and an infinite
/// share otherwise (forcing that control to zero).
fn limit_share(value: f64, limit: f64, tol: f64) -> f64 {
    if limit == 0.0 {
        if value.abs() <= tol {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        value / limit
    }
}

/// Checks a control plan against the power bounds, the combined-rate
/// constraint, and the simulated state-of-charge bounds, each within an
/// additive tolerance. Returns the first violation found (scanning controls
/// step by step, then the state trajectory).
pub fn check_feasible(
    soc0: f64,
    controls: &[ControlPair],
    net_consumption_len: usize,
    p: &BatteryParams,
    step_hours: f64,
    tol: f64,
) -> Result<(), Violation> {
    assert_eq!(controls.len(), net_consumption_len);
    for (step, u) in controls.iter().enumerate() {
        if u.discharge < p.discharge_limit - tol || u.discharge > tol {
            return Err(Violation::DischargeBound { step, value: u.discharge });
        }
        if u.charge > p.charge_limit + tol || u.charge < -tol {
            return Err(Violation::ChargeBound { step, value: u.charge });
        }
        let rate = limit_share(u.discharge, p.discharge_limit, tol)
            + limit_share(u.charge, p.charge_limit, tol);
        if !(-tol..=1.0 + tol).contains(&rate) {
            return Err(Violation::CombinedRate { step, value: rate });
        }
    }
    let mut x = soc0;
    for (step, u) in controls.iter().enumerate() {
        x = step_dynamics(x, *u, p, step_hours);
        if x < -tol || x > p.capacity + tol {
            return Err(Violation::SocBound { step: step + 1, value: x });
        }
    }
    Ok(())
}

/// Default absolute tolerance for feasibility checks; sub-solvers return
/// solutions at active bounds only up to their own tolerance.
pub const DEFAULT_FEASIBILITY_TOL: f64 = 1e-8;

/// Convenience wrapper around [`check_feasible`].
pub fn is_feasible(
    soc0: f64,
    controls: &[ControlPair],
    p: &BatteryParams,
    step_hours: f64,
    tol: f64,
) -> bool {
    check_feasible(soc0, controls, controls.len(), p, step_hours, tol).is_ok()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::BatteryParams;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn battery(
        alpha: f64,
        beta: f64,
        gamma: f64,
        capacity: f64,
        up: f64,
        down: f64,
    ) -> BatteryParams {
        BatteryParams::new(alpha, beta, gamma, capacity, up, down).unwrap()
    }

    #[test]
    fn step_identity_without_control_or_loss() {
        let p = battery(1.0, 1.0, 1.0, 1.0, 0.3, -0.3);
        assert_abs_diff_eq!(step_dynamics(0.5, ControlPair::idle(), &p, 0.5), 0.5);
    }

    #[test]
    fn step_direct_substitution() {
        let p = battery(1.0, 1.0, 1.0, 1.0, 0.3, -0.3);
        let u = ControlPair::new(0.2, 0.0);
        assert_abs_diff_eq!(step_dynamics(0.5, u, &p, 0.5), 0.6, epsilon = 1e-15);
    }

    #[test]
    fn step_hand_evaluated_with_losses() {
        // 0.9 * 1.0 + 0.5 * (0.8 * 0.1 - 0.05) = 0.915
        let p = battery(0.9, 0.8, 1.0, 2.0, 0.3, -0.3);
        let u = ControlPair::new(0.1, -0.05);
        assert_abs_diff_eq!(step_dynamics(1.0, u, &p, 0.5), 0.915, epsilon = 1e-15);
    }

    #[test]
    fn output_uncontrolled_is_net_consumption() {
        let p = battery(1.0, 1.0, 1.0, 1.0, 0.3, -0.3);
        assert_abs_diff_eq!(output_demand(1.25, ControlPair::idle(), &p), 1.25);
    }

    #[test]
    fn output_symmetric_cancellation() {
        let p = battery(1.0, 1.0, 1.0, 1.0, 0.5, -0.5);
        let u = ControlPair::new(0.3, -0.3);
        assert_abs_diff_eq!(output_demand(1.0, u, &p), 1.0, epsilon = 1e-15);
    }

    #[test]
    fn output_hand_evaluated_with_discharge_loss() {
        // 0.5 + 0 + 0.95 * (-0.2) = 0.31
        let p = battery(1.0, 1.0, 0.95, 1.0, 0.5, -0.5);
        let u = ControlPair::new(0.0, -0.2);
        assert_abs_diff_eq!(output_demand(0.5, u, &p), 0.31, epsilon = 1e-15);
    }

    #[test]
    fn horizon_with_zero_controls_is_homogeneous() {
        let p = battery(0.95, 0.9, 0.9, 2.0, 0.3, -0.3);
        let w = vec![1.0, -0.4, 0.2, 0.7];
        let controls = vec![ControlPair::idle(); 4];
        let (soc, z) = simulate_horizon(0.8, &controls, &w, &p, 0.5);
        assert_eq!(z, w);
        for (n, &x) in soc.values().iter().enumerate() {
            assert_abs_diff_eq!(x, 0.95f64.powi(n as i32) * 0.8, epsilon = 1e-12);
        }
    }

    #[test]
    fn horizon_of_one_is_a_single_step() {
        let p = battery(0.9, 0.8, 0.7, 2.0, 0.3, -0.3);
        let u = ControlPair::new(0.1, -0.2);
        let (soc, z) = simulate_horizon(1.0, &[u], &[0.5], &p, 0.5);
        assert_eq!(soc.values().len(), 2);
        assert_abs_diff_eq!(soc.values()[1], step_dynamics(1.0, u, &p, 0.5));
        assert_abs_diff_eq!(z[0], output_demand(0.5, u, &p));
    }

    #[test]
    fn horizon_matches_closed_form_expansion() {
        // x(k+1+n) = alpha^(n+1) x(k) + T * sum_l alpha^(n-l) (beta u+(l) + u-(l))
        let p = battery(0.93, 0.85, 0.9, 5.0, 1.0, -1.0);
        let t = 0.5;
        let controls = vec![
            ControlPair::new(0.4, -0.1),
            ControlPair::new(0.0, -0.6),
            ControlPair::new(0.9, 0.0),
        ];
        let w = vec![0.0; 3];
        let (soc, _) = simulate_horizon(2.0, &controls, &w, &p, t);
        for n in 0..3usize {
            let mut x = p.self_discharge.powi(n as i32 + 1) * 2.0;
            for (l, u) in controls.iter().take(n + 1).enumerate() {
                x += t
                    * p.self_discharge.powi((n - l) as i32)
                    * (p.charge_efficiency * u.charge + u.discharge);
            }
            assert_abs_diff_eq!(soc.values()[n + 1], x, epsilon = 1e-12);
        }
    }

    #[test]
    fn zero_controls_are_feasible_from_interior_state() {
        let p = battery(0.98, 0.9, 0.9, 1.5, 0.25, -0.25);
        let controls = vec![ControlPair::idle(); 6];
        assert!(is_feasible(0.7, &controls, &p, 0.5, 1e-8));
    }

    #[test]
    fn simultaneous_full_charge_and_discharge_violates_combined_rate() {
        let p = battery(1.0, 1.0, 1.0, 10.0, 0.25, -0.25);
        let controls = vec![ControlPair::new(0.25, -0.25)];
        match check_feasible(5.0, &controls, 1, &p, 0.5, 1e-8) {
            Err(Violation::CombinedRate { step: 0, value }) => {
                assert_abs_diff_eq!(value, 2.0, epsilon = 1e-12)
            }
            other => panic!("expected combined-rate violation, got {other:?}"),
        }
    }

    #[test]
    fn charging_a_full_battery_overflows_in_one_step() {
        let p = battery(1.0, 1.0, 1.0, 1.0, 0.25, -0.25);
        let controls = vec![ControlPair::new(0.1, 0.0)];
        match check_feasible(1.0, &controls, 1, &p, 0.5, 1e-8) {
            Err(Violation::SocBound { step: 1, value }) => {
                assert_abs_diff_eq!(value, 1.05, epsilon = 1e-12)
            }
            other => panic!("expected SoC violation, got {other:?}"),
        }
    }

    #[test]
    fn zero_limit_forces_zero_control() {
        let p = battery(1.0, 1.0, 1.0, 1.0, 0.0, -0.25);
        // Any nonzero charge trips the charge bound itself.
        let controls = vec![ControlPair::new(0.1, 0.0)];
        assert!(matches!(
            check_feasible(0.5, &controls, 1, &p, 0.5, 1e-8),
            Err(Violation::ChargeBound { .. })
        ));
        // Within-tolerance charge passes through the zero-limit convention.
        let controls = vec![ControlPair::new(0.0, -0.1)];
        assert!(check_feasible(0.5, &controls, 1, &p, 0.5, 1e-8).is_ok());
    }

    #[test]
    fn lossless_energy_bookkeeping() {
        let p = battery(1.0, 1.0, 1.0, 10.0, 1.0, -1.0);
        let t = 0.5;
        let controls = vec![
            ControlPair::new(0.4, 0.0),
            ControlPair::new(0.0, -0.3),
            ControlPair::new(0.2, -0.1),
        ];
        let (soc, _) = simulate_horizon(5.0, &controls, &[0.0; 3], &p, t);
        let stored = soc.values().last().unwrap() - soc.values()[0];
        let injected: f64 = controls.iter().map(|u| t * (u.charge + u.discharge)).sum();
        assert_abs_diff_eq!(stored, injected, epsilon = 1e-12);
    }

    proptest! {
        #[test]
        fn feasibility_is_monotone_in_tolerance(
            soc0 in 0.0..1.0f64,
            charges in proptest::collection::vec(-0.1..0.4f64, 4),
            discharges in proptest::collection::vec(-0.4..0.1f64, 4),
            tol_small in 1e-9..1e-3f64,
            scale in 1.0..100.0f64,
        ) {
            let p = battery(0.98, 0.9, 0.9, 1.0, 0.25, -0.25);
            let controls: Vec<ControlPair> = charges
                .iter()
                .zip(&discharges)
                .map(|(&c, &d)| ControlPair::new(c, d))
                .collect();
            let tol_large = tol_small * scale;
            if is_feasible(soc0, &controls, &p, 0.5, tol_small) {
                prop_assert!(is_feasible(soc0, &controls, &p, 0.5, tol_large));
            }
        }
    }
}
