//! Distributed battery scheduling within one microgrid.
//!
//! The microgrid-level problem — steer every household's demand profile so
//! that the microgrid average tracks a reference — couples the households
//! only through that average. Introducing per-household auxiliary profiles
//! decouples it into a consensus form solved by a three-step iteration:
//!
//! 1. each household minimizes its own augmented local objective over its
//!    feasible demand set (a small convex QP over the battery controls),
//! 2. the coordinator updates the auxiliary profiles by an explicit
//!    closed-form minimization,
//! 3. the dual profiles take a gradient-ascent step on the residual.
//!
//! Step 1 parallelizes over households; steps 2 and 3 are synchronization
//! points. Each iteration costs two N-profile transmissions per household
//! (solution up, auxiliary and dual back), which is the communication metric
//! reported by the solver.

use crate::battery::{output_demand, ControlPair};
use crate::grid::{BatteryParams, Household, Microgrid};
use crate::qp::{QpProblem, QpSettings, QpState};
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// KKT-residual level a local subproblem solve must reach to be accepted.
const LOCAL_KKT_TOL: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum AdmmError {
    #[error("invalid solver config: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error(
        "local subproblem for household {household} stalled at KKT residual {residual:.3e} \
         (tolerance {LOCAL_KKT_TOL:.0e})"
    )]
    LocalSolve {
        household: usize,
        residual: f64,
        /// Last iterate: demand profile and realizing controls.
        last: Box<(Vec<f64>, Vec<ControlPair>)>,
    },
}

/// Consensus-iteration parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdmmConfig {
    /// Augmented-Lagrangian penalty weight (> 0).
    pub penalty: f64,
    pub max_iters: usize,
    /// Termination threshold on the primal residual `max |z - a|`.
    pub primal_tol: f64,
    /// Termination threshold on the change of the tracking cost between
    /// consecutive iterations.
    pub cost_tol: f64,
    /// Reuse auxiliary and dual profiles from a previous solve when offered.
    pub warm_start: bool,
}

impl Default for AdmmConfig {
    fn default() -> Self {
        Self {
            penalty: 1.0,
            max_iters: 200,
            primal_tol: 1e-4,
            cost_tol: 1e-6,
            warm_start: true,
        }
    }
}

impl AdmmConfig {
    pub fn validate(&self) -> Result<(), AdmmError> {
        if !(self.penalty > 0.0 && self.penalty.is_finite()) {
            return Err(AdmmError::InvalidConfig(format!(
                "penalty {} must be finite and > 0",
                self.penalty
            )));
        }
        if self.max_iters == 0 {
            return Err(AdmmError::InvalidConfig("max_iters must be >= 1".into()));
        }
        if !(self.primal_tol > 0.0) || !(self.cost_tol > 0.0) {
            return Err(AdmmError::InvalidConfig("tolerances must be > 0".into()));
        }
        Ok(())
    }
}

/// Primal, auxiliary, and dual profiles of the consensus iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdmmState {
    /// Per-household demand profiles (primal block).
    pub demands: Vec<Vec<f64>>,
    /// Per-household auxiliary profiles.
    pub auxiliary: Vec<Vec<f64>>,
    /// Per-household dual profiles.
    pub duals: Vec<Vec<f64>>,
    pub iterations: usize,
}

impl AdmmState {
    fn shape_matches(&self, households: usize, horizon: usize) -> bool {
        let ok = |block: &Vec<Vec<f64>>| {
            block.len() == households && block.iter().all(|p| p.len() == horizon)
        };
        ok(&self.demands) && ok(&self.auxiliary) && ok(&self.duals)
    }
}

/// Result of one microgrid-level solve.
#[derive(Debug, Clone)]
pub struct LowerLevelSolution {
    /// Average demand profile of the microgrid (the coordinator's output).
    pub avg_demand: Vec<f64>,
    /// Per-household demand profiles realizing the average.
    pub demands: Vec<Vec<f64>>,
    /// Controls realizing each demand profile.
    pub controls: Vec<Vec<ControlPair>>,
    pub iterations: usize,
    /// Number of N-profiles communicated: two per household per iteration.
    pub transmissions: u64,
    pub converged: bool,
    /// Final primal residual `max |z - a|`.
    pub primal_residual: f64,
    /// Tracking cost of the averaged auxiliary profile per iteration.
    pub cost_history: Vec<f64>,
    /// Final iteration state, reusable as a warm start.
    pub state: AdmmState,
}

/// Squared tracking error `sum_n (profile(n) - target(n))^2`.
pub fn tracking_cost(profile: &[f64], target: &[f64]) -> f64 {
    profile
        .iter()
        .zip(target)
        .map(|(p, t)| (p - t) * (p - t))
        .sum()
}

fn mean_profiles(profiles: &[Vec<f64>]) -> Vec<f64> {
    let horizon = profiles[0].len();
    let scale = 1.0 / profiles.len() as f64;
    let mut mean = vec![0.0; horizon];
    for p in profiles {
        for (m, v) in mean.iter_mut().zip(p) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m *= scale;
    }
    mean
}

/// Per-household subproblem: the demand profile is an affine image of the
/// control sequence, so the local objective becomes a convex QP over the
/// stacked controls `(u+(0), u-(0), ..., u+(N-1), u-(N-1))` with box,
/// combined-rate, and state-of-charge rows.
struct LocalSub {
    battery: BatteryParams,
    horizon: usize,
    qp: Option<QpProblem>,
    lower: DVector<f64>,
    upper: DVector<f64>,
    warm: Option<QpState>,
}

impl LocalSub {
    fn new(battery: BatteryParams, step_hours: f64, horizon: usize) -> Self {
        if battery.is_inert() {
            return Self {
                battery,
                horizon,
                qp: None,
                lower: DVector::zeros(0),
                upper: DVector::zeros(0),
                warm: None,
            };
        }
        let nvars = 2 * horizon;
        let nrows = 4 * horizon;
        let gamma = battery.discharge_efficiency;

        // Objective curvature: demand shift per step is u+ + gamma * u-.
        let mut p = DMatrix::zeros(nvars, nvars);
        for n in 0..horizon {
            p[(2 * n, 2 * n)] = 1.0;
            p[(2 * n, 2 * n + 1)] = gamma;
            p[(2 * n + 1, 2 * n)] = gamma;
            p[(2 * n + 1, 2 * n + 1)] = gamma * gamma;
        }

        let mut a = DMatrix::zeros(nrows, nvars);
        let mut lower = DVector::zeros(nrows);
        let mut upper = DVector::zeros(nrows);
        // Box rows.
        for n in 0..horizon {
            a[(2 * n, 2 * n)] = 1.0;
            lower[2 * n] = 0.0;
            upper[2 * n] = battery.charge_limit;
            a[(2 * n + 1, 2 * n + 1)] = 1.0;
            lower[2 * n + 1] = battery.discharge_limit;
            upper[2 * n + 1] = 0.0;
        }
        // Combined-rate rows; a zero limit contributes no share (the box row
        // already pins that control to zero).
        let cp = if battery.charge_limit > 0.0 {
            1.0 / battery.charge_limit
        } else {
            0.0
        };
        let cm = if battery.discharge_limit < 0.0 {
            1.0 / battery.discharge_limit
        } else {
            0.0
        };
        for n in 0..horizon {
            let row = 2 * horizon + n;
            a[(row, 2 * n)] = cp;
            a[(row, 2 * n + 1)] = cm;
            lower[row] = 0.0;
            upper[row] = 1.0;
        }
        // State-of-charge rows: x(m+1) is affine in the controls. The
        // bounds depend on the initial state and are set per solve.
        let alpha = battery.self_discharge;
        for m in 0..horizon {
            let row = 3 * horizon + m;
            for l in 0..=m {
                let decay = alpha.powi((m - l) as i32) * step_hours;
                a[(row, 2 * l)] = decay * battery.charge_efficiency;
                a[(row, 2 * l + 1)] = decay;
            }
        }

        let qp = QpProblem::new(p, a, QpSettings::default());
        Self {
            battery,
            horizon,
            qp: Some(qp),
            lower,
            upper,
            warm: None,
        }
    }

    fn set_initial_soc(&mut self, soc0: f64) {
        if self.qp.is_none() {
            return;
        }
        let alpha = self.battery.self_discharge;
        for m in 0..self.horizon {
            let row = 3 * self.horizon + m;
            let free = alpha.powi(m as i32 + 1) * soc0;
            self.lower[row] = -free;
            self.upper[row] = self.battery.capacity - free;
        }
    }

    /// Minimizes `z' dual + (penalty/2) ||z - aux||^2` over the feasible
    /// demand set. The returned demand profile is computed from the returned
    /// controls, so the two are consistent by construction.
    fn solve(
        &mut self,
        duals: &[f64],
        aux: &[f64],
        net_consumption: &[f64],
        penalty: f64,
    ) -> Result<(Vec<f64>, Vec<ControlPair>), (f64, Vec<f64>, Vec<ControlPair>)> {
        let controls = match &mut self.qp {
            None => vec![ControlPair::idle(); self.horizon],
            Some(qp) => {
                // Dividing the objective by the penalty leaves the minimizer
                // unchanged and keeps the QP data independent of it.
                let gamma = self.battery.discharge_efficiency;
                let mut q = DVector::zeros(2 * self.horizon);
                for n in 0..self.horizon {
                    let grad = duals[n] / penalty + (net_consumption[n] - aux[n]);
                    q[2 * n] = grad;
                    q[2 * n + 1] = gamma * grad;
                }
                let (result, state) = qp.solve(&q, &self.lower, &self.upper, self.warm.as_ref());
                self.warm = Some(state);
                let controls = self.extract_controls(&result.x);
                let residual = result.primal_res.max(result.dual_res);
                if residual > LOCAL_KKT_TOL {
                    let demand = self.demand_from(&controls, net_consumption);
                    return Err((residual, demand, controls));
                }
                controls
            }
        };
        let demand = self.demand_from(&controls, net_consumption);
        Ok((demand, controls))
    }

    fn extract_controls(&self, x: &DVector<f64>) -> Vec<ControlPair> {
        (0..self.horizon)
            .map(|n| {
                ControlPair::new(
                    x[2 * n].clamp(0.0, self.battery.charge_limit),
                    x[2 * n + 1].clamp(self.battery.discharge_limit, 0.0),
                )
            })
            .collect()
    }

    fn demand_from(&self, controls: &[ControlPair], net_consumption: &[f64]) -> Vec<f64> {
        controls
            .iter()
            .zip(net_consumption)
            .map(|(u, &w)| output_demand(w, *u, &self.battery))
            .collect()
    }
}

/// Single local update, exposed for direct use and testing. Minimizes
/// `z' duals + (penalty/2) ||z - aux||^2` over the household's feasible
/// demand profiles, realized through battery controls from `soc0`.
pub fn local_demand_update(
    duals: &[f64],
    aux: &[f64],
    penalty: f64,
    household: &Household,
    soc0: f64,
    net_consumption: &[f64],
    step_hours: f64,
) -> Result<(Vec<f64>, Vec<ControlPair>), AdmmError> {
    let horizon = net_consumption.len();
    if duals.len() != horizon || aux.len() != horizon {
        return Err(AdmmError::Shape(format!(
            "profiles of length {}/{} against horizon {horizon}",
            duals.len(),
            aux.len()
        )));
    }
    let mut sub = LocalSub::new(household.battery, step_hours, horizon, soc0);
    sub.solve(duals, aux, net_consumption, penalty)
        .map_err(|(residual, demand, controls)| AdmmError::LocalSolve {
            household: household.id,
            residual,
            last: Box::new((demand, controls)),
        })
}

/// Closed-form coordinator update. Minimizes
///
/// ```text
///   ||mean(a) - target||^2 - sum_i a_i' duals_i + (penalty/2) sum_i ||demands_i - a_i||^2
/// ```
///
/// over all auxiliary profiles jointly; first-order stationarity gives the
/// averaged profile explicitly and each household's profile from it.
pub fn consensus_update(
    demands: &[Vec<f64>],
    duals: &[Vec<f64>],
    penalty: f64,
    target: &[f64],
) -> Vec<Vec<f64>> {
    let count = demands.len() as f64;
    let horizon = target.len();
    let weight = 2.0 / count;
    let avg_demand = mean_profiles(demands);
    let avg_dual = mean_profiles(duals);
    // Stationarity in the average: (penalty + w) * mean(a) = penalty * mean(z) + mean(dual) + w * target.
    let mut avg_aux = vec![0.0; horizon];
    for n in 0..horizon {
        avg_aux[n] = (penalty * avg_demand[n] + avg_dual[n] + weight * target[n]) / (penalty + weight);
    }
    demands
        .iter()
        .zip(duals)
        .map(|(z_i, l_i)| {
            (0..horizon)
                .map(|n| z_i[n] + (l_i[n] - weight * (avg_aux[n] - target[n])) / penalty)
                .collect()
        })
        .collect()
}

/// Dual ascent step: `dual + penalty * (demand - aux)`, per household per step.
pub fn dual_update(
    duals: &[Vec<f64>],
    demands: &[Vec<f64>],
    aux: &[Vec<f64>],
    penalty: f64,
) -> Vec<Vec<f64>> {
    duals
        .iter()
        .zip(demands.iter().zip(aux))
        .map(|(l_i, (z_i, a_i))| {
            l_i.iter()
                .zip(z_i.iter().zip(a_i))
                .map(|(l, (z, a))| l + penalty * (z - a))
                .collect()
        })
        .collect()
}

/// Runs the consensus iteration for one microgrid until the primal residual
/// and the tracking-cost change both fall below their thresholds, or the
/// iteration cap is reached. On cap-out the best iterate (smallest primal
/// residual) is returned and flagged as non-converged.
pub fn solve_lower_level(
    microgrid: &Microgrid,
    initial_soc: &[f64],
    net_consumption: &[Vec<f64>],
    target: &[f64],
    config: &AdmmConfig,
    step_hours: f64,
    warm: Option<&AdmmState>,
) -> Result<LowerLevelSolution, AdmmError> {
    config.validate()?;
    let households = microgrid.households();
    let count = households.len();
    let horizon = target.len();
    if horizon == 0 {
        return Err(AdmmError::Shape("empty horizon".into()));
    }
    if initial_soc.len() != count || net_consumption.len() != count {
        return Err(AdmmError::Shape(format!(
            "{count} households but {} SoC values and {} consumption profiles",
            initial_soc.len(),
            net_consumption.len()
        )));
    }
    if let Some(bad) = net_consumption.iter().find(|p| p.len() != horizon) {
        return Err(AdmmError::Shape(format!(
            "consumption profile of length {} against horizon {horizon}",
            bad.len()
        )));
    }

    let mut locals: Vec<LocalSub> = households
        .iter()
        .zip(initial_soc)
        .map(|(h, &x0)| LocalSub::new(h.battery, step_hours, horizon, x0))
        .collect();

    let (mut aux, mut duals) = match warm {
        Some(state) if config.warm_start && state.shape_matches(count, horizon) => {
            (state.auxiliary.clone(), state.duals.clone())
        }
        _ => (
            net_consumption.to_vec(),
            vec![vec![0.0; horizon]; count],
        ),
    };

    let mut demands: Vec<Vec<f64>> = vec![Vec::new(); count];
    let mut controls: Vec<Vec<ControlPair>> = vec![Vec::new(); count];
    let mut cost_history = Vec::new();
    let mut prev_cost = f64::NAN;
    let mut primal_residual = f64::INFINITY;
    let mut converged = false;
    let mut iterations = 0;
    let mut best: Option<(f64, Vec<Vec<f64>>, Vec<Vec<ControlPair>>)> = None;

    for iter in 1..=config.max_iters {
        iterations = iter;
        let updates: Vec<Result<(Vec<f64>, Vec<ControlPair>), (f64, Vec<f64>, Vec<ControlPair>)>> =
            locals
                .par_iter_mut()
                .zip(duals.par_iter().zip(aux.par_iter().zip(net_consumption.par_iter())))
                .map(|(local, (dual_i, (aux_i, w_i)))| {
                    local.solve(dual_i, aux_i, w_i, config.penalty)
                })
                .collect();
        for (i, update) in updates.into_iter().enumerate() {
            match update {
                Ok((demand, control)) => {
                    demands[i] = demand;
                    controls[i] = control;
                }
                Err((residual, demand, control)) => {
                    return Err(AdmmError::LocalSolve {
                        household: households[i].id,
                        residual,
                        last: Box::new((demand, control)),
                    });
                }
            }
        }

        aux = consensus_update(&demands, &duals, config.penalty, target);
        duals = dual_update(&duals, &demands, &aux, config.penalty);

        primal_residual = demands
            .iter()
            .zip(&aux)
            .flat_map(|(z_i, a_i)| z_i.iter().zip(a_i).map(|(z, a)| (z - a).abs()))
            .fold(0.0f64, f64::max);
        let cost = tracking_cost(&mean_profiles(&aux), target);
        cost_history.push(cost);

        if best.as_ref().map_or(true, |(r, _, _)| primal_residual < *r) {
            best = Some((primal_residual, demands.clone(), controls.clone()));
        }

        let cost_settled = !prev_cost.is_nan() && (cost - prev_cost).abs() <= config.cost_tol;
        prev_cost = cost;
        if primal_residual <= config.primal_tol && cost_settled {
            converged = true;
            break;
        }
    }

    if !converged {
        if let Some((residual, demand_snapshot, control_snapshot)) = best {
            primal_residual = residual;
            demands = demand_snapshot;
            controls = control_snapshot;
        }
    }

    let avg_demand = mean_profiles(&demands);
    let transmissions = 2 * count as u64 * iterations as u64;
    Ok(LowerLevelSolution {
        avg_demand,
        demands: demands.clone(),
        controls,
        iterations,
        transmissions,
        converged,
        primal_residual,
        cost_history,
        state: AdmmState {
            demands,
            auxiliary: aux,
            duals,
            iterations,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::battery::{is_feasible, simulate_horizon};
    use crate::grid::BatteryParams;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn battery() -> BatteryParams {
        BatteryParams::new(0.98, 0.9, 0.9, 1.0, 0.25, -0.25).unwrap()
    }

    fn household(id: usize, b: BatteryParams, len: usize) -> Household {
        Household::new(id, b, vec![1.0; len], vec![0.0; len]).unwrap()
    }

    #[test]
    fn inert_household_demand_is_pinned() {
        let h = household(0, BatteryParams::none(), 4);
        let w = vec![1.2, 0.3, -0.5, 0.9];
        let duals = vec![5.0, -3.0, 0.1, 2.2];
        let aux = vec![0.0; 4];
        let (demand, controls) = local_demand_update(&duals, &aux, 1.0, &h, 0.0, &w, 0.5).unwrap();
        assert_eq!(demand, w);
        assert!(controls.iter().all(|u| *u == ControlPair::idle()));
    }

    #[test]
    fn local_update_with_attained_target_is_idle() {
        let h = household(0, battery(), 4);
        let w = vec![0.8, 0.9, 1.0, 1.1];
        let duals = vec![0.0; 4];
        let (demand, controls) = local_demand_update(&duals, &w, 1.0, &h, 0.5, &w, 0.5).unwrap();
        for n in 0..4 {
            assert_abs_diff_eq!(demand[n], w[n], epsilon = 1e-7);
            assert!(controls[n].charge.abs() < 1e-7);
            assert!(controls[n].discharge.abs() < 1e-7);
        }
    }

    #[test]
    fn local_update_matches_dense_control_grid() {
        // Two-step horizon, one battery: exhaustive search over discretized
        // (u+, u-) pairs brackets the QP objective to grid resolution.
        let b = battery();
        let h = household(0, b, 2);
        let w = vec![1.0, 0.6];
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..5 {
            let duals: Vec<f64> = (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let aux: Vec<f64> = (0..2).map(|_| rng.gen_range(0.0..1.5)).collect();
            let penalty = 1.0;
            let x0 = rng.gen_range(0.0..1.0);
            let (demand, controls) =
                local_demand_update(&duals, &aux, penalty, &h, x0, &w, 0.5).unwrap();
            assert!(is_feasible(x0, &controls, &b, 0.5, 1e-6));
            let objective = |z: &[f64]| -> f64 {
                z.iter()
                    .zip(&duals)
                    .zip(&aux)
                    .map(|((z, l), a)| z * l + 0.5 * penalty * (z - a) * (z - a))
                    .sum()
            };
            let got = objective(&demand);

            let steps = 22usize;
            let grid = |lo: f64, hi: f64, i: usize| lo + (hi - lo) * i as f64 / (steps - 1) as f64;
            let mut best = f64::INFINITY;
            for i0 in 0..steps {
                for j0 in 0..steps {
                    for i1 in 0..steps {
                        for j1 in 0..steps {
                            let u = [
                                ControlPair::new(
                                    grid(0.0, b.charge_limit, i0),
                                    grid(b.discharge_limit, 0.0, j0),
                                ),
                                ControlPair::new(
                                    grid(0.0, b.charge_limit, i1),
                                    grid(b.discharge_limit, 0.0, j1),
                                ),
                            ];
                            if !is_feasible(x0, &u, &b, 0.5, 1e-12) {
                                continue;
                            }
                            let (_, z) = simulate_horizon(x0, &u, &w, &b, 0.5);
                            best = best.min(objective(&z));
                        }
                    }
                }
            }
            // The grid step bounds how far the discretized optimum can sit
            // above the true one.
            let resolution = (b.charge_limit / (steps - 1) as f64) * 4.0;
            assert!(got <= best + 1e-9, "qp {got} worse than grid {best}");
            assert!(got >= best - resolution, "qp {got} too far below grid {best}");
        }
    }

    #[test]
    fn consensus_update_fixed_point_at_target() {
        let target = vec![0.7, 0.7, 0.7];
        let demands = vec![target.clone(), target.clone()];
        let duals = vec![vec![0.0; 3]; 2];
        let aux = consensus_update(&demands, &duals, 1.0, &target);
        for (a_i, z_i) in aux.iter().zip(&demands) {
            for n in 0..3 {
                assert_abs_diff_eq!(a_i[n], z_i[n], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn consensus_update_matches_scalar_calculus() {
        // One household, one step: minimize (a - t)^2 - a*l + (rho/2)(z - a)^2
        // has the stationary point a = (2t + l + rho z) / (2 + rho).
        let (z, l, rho, t) = (0.4, -0.3, 1.7, 1.0);
        let aux = consensus_update(&[vec![z]], &[vec![l]], rho, &[t]);
        let expected = (2.0 * t + l + rho * z) / (2.0 + rho);
        assert_abs_diff_eq!(aux[0][0], expected, epsilon = 1e-12);
    }

    #[test]
    fn consensus_update_matches_numerical_minimizer() {
        // Random instance solved by plain gradient descent on the coordinator
        // objective, run to high accuracy.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (count, horizon) = (3, 4);
        let penalty = 1.3;
        let demands: Vec<Vec<f64>> = (0..count)
            .map(|_| (0..horizon).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let duals: Vec<Vec<f64>> = (0..count)
            .map(|_| (0..horizon).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let target: Vec<f64> = (0..horizon).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let closed = consensus_update(&demands, &duals, penalty, &target);

        let mut aux: Vec<Vec<f64>> = demands.clone();
        let step = 0.05;
        for _ in 0..20_000 {
            let mean = mean_profiles(&aux);
            for i in 0..count {
                for n in 0..horizon {
                    let grad = 2.0 / count as f64 * (mean[n] - target[n]) - duals[i][n]
                        + penalty * (aux[i][n] - demands[i][n]);
                    aux[i][n] -= step * grad;
                }
            }
        }
        for i in 0..count {
            for n in 0..horizon {
                assert_abs_diff_eq!(closed[i][n], aux[i][n], epsilon = 1e-8);
            }
        }
    }

    #[test]
    fn dual_update_algebra() {
        // Zero residual leaves the duals unchanged.
        let z = vec![vec![1.0, 2.0]];
        let l = dual_update(&[vec![0.5, -0.5]], &z, &z, 3.0);
        assert_eq!(l, vec![vec![0.5, -0.5]]);
        // Unit penalty turns the residual into the dual.
        let l = dual_update(&[vec![0.0]], &[vec![1.5]], &[vec![0.5]], 1.0);
        assert_abs_diff_eq!(l[0][0], 1.0, epsilon = 1e-15);
        // Direct substitution.
        let l = dual_update(&[vec![1.0]], &[vec![1.0]], &[vec![0.5]], 2.0);
        assert_abs_diff_eq!(l[0][0], 2.0, epsilon = 1e-15);
    }

    fn microgrid_with(batteries: Vec<BatteryParams>, w: &[Vec<f64>]) -> Microgrid {
        let households: Vec<Household> = batteries
            .into_iter()
            .zip(w)
            .enumerate()
            .map(|(id, (b, w_i))| {
                // Encode an arbitrary net-consumption series as pure load.
                let load: Vec<f64> = w_i.iter().map(|v| v.max(0.0)).collect();
                let generation: Vec<f64> = w_i.iter().map(|v| (-v).max(0.0)).collect();
                Household::new(id, b, load, generation).unwrap()
            })
            .collect();
        Microgrid::new(0, households).unwrap()
    }

    #[test]
    fn battery_free_microgrid_returns_uncontrolled_average() {
        let w = vec![vec![1.0, 0.4, 0.8], vec![0.6, 1.2, 0.2]];
        let mg = microgrid_with(vec![BatteryParams::none(); 2], &w);
        let target = vec![0.5; 3];
        let solution = solve_lower_level(
            &mg,
            &[0.0, 0.0],
            &w,
            &target,
            &AdmmConfig::default(),
            0.5,
            None,
        )
        .unwrap();
        for n in 0..3 {
            let w_bar = (w[0][n] + w[1][n]) / 2.0;
            assert_abs_diff_eq!(solution.avg_demand[n], w_bar, epsilon = 1e-12);
        }
        assert!(solution.converged);
    }

    #[test]
    fn target_equal_to_uncontrolled_average_needs_no_control() {
        let w = vec![vec![1.0, 0.4, 0.8, 0.6], vec![0.6, 1.2, 0.2, 0.6]];
        let mg = microgrid_with(vec![battery(); 2], &w);
        let target: Vec<f64> = (0..4).map(|n| (w[0][n] + w[1][n]) / 2.0).collect();
        let solution = solve_lower_level(
            &mg,
            &[0.5, 0.5],
            &w,
            &target,
            &AdmmConfig::default(),
            0.5,
            None,
        )
        .unwrap();
        assert!(solution.converged);
        let cost = tracking_cost(&solution.avg_demand, &target);
        assert!(cost < 1e-8, "tracking cost {cost}");
    }

    #[test]
    fn returned_demands_match_simulated_controls_bitwise() {
        let w = vec![vec![1.1, 0.2, 0.9], vec![0.3, 0.8, 0.5], vec![0.7, 0.7, 0.7]];
        let mg = microgrid_with(vec![battery(); 3], &w);
        let target = vec![0.6; 3];
        let soc = [0.2, 0.8, 0.5];
        let solution =
            solve_lower_level(&mg, &soc, &w, &target, &AdmmConfig::default(), 0.5, None).unwrap();
        for (i, h) in mg.households().iter().enumerate() {
            let (_, z) = simulate_horizon(soc[i], &solution.controls[i], &w[i], &h.battery, 0.5);
            assert_eq!(solution.demands[i], z);
            assert!(is_feasible(soc[i], &solution.controls[i], &h.battery, 0.5, 1e-8));
        }
    }

    #[test]
    fn identical_inputs_give_identical_outputs() {
        let w = vec![vec![1.1, 0.2, 0.9], vec![0.3, 0.8, 0.5]];
        let mg = microgrid_with(vec![battery(); 2], &w);
        let target = vec![0.6; 3];
        let first = solve_lower_level(
            &mg,
            &[0.2, 0.8],
            &w,
            &target,
            &AdmmConfig::default(),
            0.5,
            None,
        )
        .unwrap();
        let second = solve_lower_level(
            &mg,
            &[0.2, 0.8],
            &w,
            &target,
            &AdmmConfig::default(),
            0.5,
            None,
        )
        .unwrap();
        assert_eq!(first.avg_demand, second.avg_demand);
        assert_eq!(first.demands, second.demands);
        assert_eq!(first.iterations, second.iterations);
    }

    #[test]
    fn warm_start_preserves_the_fixed_point() {
        let w = vec![vec![1.1, 0.2, 0.9], vec![0.3, 0.8, 0.5]];
        let mg = microgrid_with(vec![battery(); 2], &w);
        let target = vec![0.6; 3];
        let cfg = AdmmConfig::default();
        let cold = solve_lower_level(&mg, &[0.2, 0.8], &w, &target, &cfg, 0.5, None).unwrap();
        let warm =
            solve_lower_level(&mg, &[0.2, 0.8], &w, &target, &cfg, 0.5, Some(&cold.state)).unwrap();
        assert!(warm.iterations <= cold.iterations);
        for n in 0..3 {
            assert_abs_diff_eq!(warm.avg_demand[n], cold.avg_demand[n], epsilon = 1e-3);
        }
    }

    #[test]
    fn transmissions_count_two_profiles_per_household_per_iteration() {
        let w = vec![vec![1.0, 0.4], vec![0.6, 1.2]];
        let mg = microgrid_with(vec![battery(); 2], &w);
        let target = vec![0.5; 2];
        let solution = solve_lower_level(
            &mg,
            &[0.5, 0.5],
            &w,
            &target,
            &AdmmConfig::default(),
            0.5,
            None,
        )
        .unwrap();
        assert_eq!(
            solution.transmissions,
            2 * 2 * solution.iterations as u64
        );
    }
}
