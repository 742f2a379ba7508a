//! Closed-loop model predictive control over the coupled grid.
//!
//! Each step measures the battery states, takes the (perfect) forecast
//! window, runs the bidirectional scheme, applies only the first control
//! and exchange instance, and advances the true dynamics. Stage costs,
//! open-loop traces, communication counts, and per-call solver timings are
//! logged throughout. Surrogate-driven runs append one true consensus
//! iteration per step (the repair pass) before anything is applied.

use crate::admm::AdmmConfig;
use crate::battery::{check_feasible, output_demand, step_dynamics, ControlPair, Violation};
use crate::bilevel::{
    run_bidirectional, AdmmLowerSolver, BilevelConfig, BilevelProblem, BilevelTrace, LowerRequest,
    LowerResponse, LowerSolver, SolverError, SolverKind,
};
use crate::exchange::{ExchangeSolveConfig, ExchangeTensor};
use crate::grid::{reference_profile, GridError, GridTopology};
use crate::scenario::Scenario;
use crate::surrogate::{
    repair_with_admm, RecordingSolver, Sample, SampleRecorder, SurrogateModel, SurrogateSolver,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::time::Duration;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error("step {step}, microgrid {microgrid}, household {household}: applied control infeasible: {violation}")]
    InfeasibleControl {
        step: usize,
        microgrid: usize,
        household: usize,
        violation: Violation,
    },
    #[error("solver choice {0:?} requires a fitted surrogate model")]
    MissingModel(SolverKind),
}

/// Which lower-level machinery a run uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SolverChoice {
    /// Zero controls and identity exchange (the do-nothing baseline).
    NoControl,
    Admm,
    Rbf,
    Nn,
}

impl SolverChoice {
    pub fn label(&self) -> &'static str {
        match self {
            SolverChoice::NoControl => "none",
            SolverChoice::Admm => "admm",
            SolverChoice::Rbf => "rbf",
            SolverChoice::Nn => "nn",
        }
    }
}

impl std::str::FromStr for SolverChoice {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "none" => Ok(SolverChoice::NoControl),
            "admm" => Ok(SolverChoice::Admm),
            "rbf" => Ok(SolverChoice::Rbf),
            "nn" => Ok(SolverChoice::Nn),
            other => Err(format!("unknown solver choice '{other}'")),
        }
    }
}

/// Solver parameters shared by a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverConfigs {
    pub admm: AdmmConfig,
    pub bilevel: BilevelConfig,
    pub exchange: ExchangeSolveConfig,
    /// Tolerance for the applied-control feasibility assertion.
    pub feasibility_tol: f64,
}

impl Default for SolverConfigs {
    fn default() -> Self {
        Self {
            admm: AdmmConfig::default(),
            bilevel: BilevelConfig::default(),
            exchange: ExchangeSolveConfig::default(),
            feasibility_tol: crate::battery::DEFAULT_FEASIBILITY_TOL,
        }
    }
}

/// Additive uniform noise `10^-intensity_exp * U(-1, 1)` injected into every
/// lower-level solution, emulating surrogate mapping error.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DisturbanceSpec {
    pub intensity_exp: u32,
    pub seed: u64,
}

/// Per-run options beyond the solver choice.
#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    /// Record one training sample per lower-level solve.
    pub collect_samples: bool,
    /// Disturb every lower-level return (forces the consensus solver).
    pub disturbance: Option<DisturbanceSpec>,
    /// Provenance tag carried into recorded samples.
    pub scenario_id: u64,
}

/// Everything a closed-loop run produces.
#[derive(Debug, Clone)]
pub struct MpcLog {
    pub solver: SolverChoice,
    /// Realized cost per simulated step.
    pub stage_costs: Vec<f64>,
    /// Post-exchange cost of the executed plan per step.
    pub open_loop_costs: Vec<f64>,
    /// Bidirectional trace per step (empty for the no-control baseline).
    pub traces: Vec<BilevelTrace>,
    /// Total N-profiles communicated, including repair passes.
    pub transmissions: u64,
    /// (kind, microgrid, wall time) of every lower-level call.
    pub lower_timings: Vec<(SolverKind, usize, Duration)>,
    /// First control applied at each step, per microgrid per household.
    pub applied_controls: Vec<Vec<Vec<ControlPair>>>,
    /// Realized state-of-charge path per microgrid per household.
    pub soc_paths: Vec<Vec<Vec<f64>>>,
    /// Realized average demand per step per microgrid.
    pub realized_demands: Vec<Vec<f64>>,
    /// Collected training samples (microgrid, sample), when enabled.
    pub samples: Vec<(usize, Sample)>,
}

impl MpcLog {
    pub fn total_stage_cost(&self) -> f64 {
        self.stage_costs.iter().sum()
    }

    pub fn total_open_loop_cost(&self) -> f64 {
        self.open_loop_costs.iter().sum()
    }
}

/// Realized single-step cost: the horizon cost restricted to one step, with
/// the applied exchange rates and realized average demands.
pub fn stage_cost(
    reference_value: f64,
    rates: &[Vec<f64>],
    avg_demands: &[f64],
    topology: &GridTopology,
    sizes: &[usize],
) -> f64 {
    let count = avg_demands.len();
    let mut cost = 0.0;
    for to in 0..count {
        let mut received = 0.0;
        for from in 0..count {
            received += rates[from][to]
                * topology.line_efficiency(from, to)
                * sizes[from] as f64
                * avg_demands[from];
        }
        let gap = reference_value * sizes[to] as f64 - received;
        cost += gap * gap;
    }
    cost
}

/// Adds uniform noise of magnitude `10^-intensity_exp` to a profile.
pub fn disturb(profile: &[f64], intensity_exp: u32, rng: &mut impl Rng) -> Vec<f64> {
    let scale = 10f64.powi(-(intensity_exp as i32));
    profile
        .iter()
        .map(|v| v + scale * rng.gen_range(-1.0..1.0))
        .collect()
}

/// Wraps the consensus solver and perturbs each returned average demand;
/// controls and communication counts pass through unchanged.
struct DisturbedSolver {
    inner: AdmmLowerSolver,
    intensity_exp: u32,
    rng: ChaCha8Rng,
}

impl LowerSolver for DisturbedSolver {
    fn solve(&mut self, request: &LowerRequest) -> Result<LowerResponse, SolverError> {
        let mut response = self.inner.solve(request)?;
        response.avg_demand = disturb(&response.avg_demand, self.intensity_exp, &mut self.rng);
        Ok(response)
    }

    fn kind(&self) -> SolverKind {
        SolverKind::DisturbedAdmm
    }

    fn reset(&mut self) {
        self.inner.reset();
    }
}

fn build_lower_solvers(
    scenario: &Scenario,
    choice: SolverChoice,
    models: &[Option<SurrogateModel>],
    configs: &SolverConfigs,
    options: &RunOptions,
    recorder: &SampleRecorder,
) -> Result<Vec<Box<dyn LowerSolver>>, HarnessError> {
    let count = scenario.grid.count();
    let mut solvers: Vec<Box<dyn LowerSolver>> = Vec::with_capacity(count);
    for index in 0..count {
        let base: Box<dyn LowerSolver> = if let Some(spec) = options.disturbance {
            Box::new(DisturbedSolver {
                inner: AdmmLowerSolver::new(configs.admm),
                intensity_exp: spec.intensity_exp,
                rng: ChaCha8Rng::seed_from_u64(spec.seed.wrapping_add(index as u64)),
            })
        } else {
            match choice {
                SolverChoice::Admm | SolverChoice::NoControl => {
                    Box::new(AdmmLowerSolver::new(configs.admm))
                }
                SolverChoice::Rbf | SolverChoice::Nn => match &models[index] {
                    Some(model) => Box::new(SurrogateSolver::new(model.clone())),
                    None => Box::new(AdmmLowerSolver::new(configs.admm)),
                },
            }
        };
        let solver: Box<dyn LowerSolver> = if options.collect_samples {
            Box::new(RecordingSolver::new(
                base,
                recorder.clone(),
                options.scenario_id,
            ))
        } else {
            base
        };
        solvers.push(solver);
    }
    Ok(solvers)
}

/// Runs the closed loop. `models[k]` supplies the surrogate for microgrid
/// `k` under the `Rbf`/`Nn` choices; microgrids without a model fall back to
/// the consensus solver. Surrogate runs get a repair pass each step so the
/// applied controls are always battery-feasible.
pub fn run_mpc(
    scenario: &Scenario,
    choice: SolverChoice,
    models: &[Option<SurrogateModel>],
    configs: &SolverConfigs,
    options: &RunOptions,
) -> Result<MpcLog, HarnessError> {
    let grid = &scenario.grid;
    let count = grid.count();
    let horizon = scenario.config.horizon;
    let step_hours = scenario.config.step_hours;
    let sizes = grid.sizes();
    let topology = grid.topology();

    if matches!(choice, SolverChoice::Rbf | SolverChoice::Nn)
        && options.disturbance.is_none()
        && models.iter().all(|m| m.is_none())
    {
        let kind = if choice == SolverChoice::Rbf {
            SolverKind::Rbf
        } else {
            SolverKind::Nn
        };
        return Err(HarnessError::MissingModel(kind));
    }

    let recorder = SampleRecorder::new();
    let uses_surrogate = options.disturbance.is_none()
        && matches!(choice, SolverChoice::Rbf | SolverChoice::Nn);
    let mut solvers = build_lower_solvers(scenario, choice, models, configs, options, &recorder)?;
    let mut repair_bank: Vec<Box<dyn LowerSolver>> = (0..count)
        .map(|_| Box::new(AdmmLowerSolver::new(configs.admm)) as Box<dyn LowerSolver>)
        .collect();

    let mut soc = scenario.initial_soc.clone();
    let mut log = MpcLog {
        solver: choice,
        stage_costs: Vec::with_capacity(scenario.config.sim_steps),
        open_loop_costs: Vec::with_capacity(scenario.config.sim_steps),
        traces: Vec::new(),
        transmissions: 0,
        lower_timings: Vec::new(),
        applied_controls: Vec::new(),
        soc_paths: soc
            .iter()
            .map(|grid_soc| grid_soc.iter().map(|&x| vec![x]).collect())
            .collect(),
        realized_demands: Vec::new(),
        samples: Vec::new(),
    };

    for k in 0..scenario.config.sim_steps {
        let step = scenario.start_step + k;
        recorder.set_step(step);
        let reference = reference_profile(grid, step, horizon)?;

        // Perfect forecast: the true net consumption over the horizon.
        let forecasts: Vec<Vec<Vec<f64>>> = grid
            .microgrids()
            .iter()
            .map(|mg| {
                mg.households()
                    .iter()
                    .map(|h| h.net_consumption_window(step, horizon))
                    .collect::<Result<Vec<_>, _>>()
            })
            .collect::<Result<Vec<_>, _>>()?;

        let (applied, rates_now, open_loop_cost) = if choice == SolverChoice::NoControl {
            let identity = ExchangeTensor::identity(count, horizon);
            log.traces.push(BilevelTrace::default());
            let applied: Vec<Vec<ControlPair>> = sizes
                .iter()
                .map(|&size| vec![ControlPair::idle(); size])
                .collect();
            let uncontrolled: Vec<Vec<f64>> = forecasts
                .iter()
                .map(|mg| crate::grid::average_demand(mg).expect("nonempty microgrid"))
                .collect();
            let cost = crate::exchange::upper_cost(
                &uncontrolled,
                &identity,
                topology,
                &reference,
                &sizes,
            );
            (applied, identity.step(0).to_vec(), cost)
        } else {
            let problem = BilevelProblem {
                grid,
                initial_soc: &soc,
                net_consumption: &forecasts,
                reference: &reference,
                step_hours,
            };
            let outcome = run_bidirectional(
                &problem,
                &mut solvers,
                &configs.bilevel,
                &configs.exchange,
            )?;
            log.transmissions += outcome.trace.transmissions;
            log.lower_timings.extend(outcome.lower_timings);

            let final_iterate = if uses_surrogate {
                let (repaired, timings, transmissions) = repair_with_admm(
                    &problem,
                    &outcome.best,
                    &mut repair_bank,
                    &configs.exchange,
                )?;
                log.lower_timings.extend(timings);
                log.transmissions += transmissions;
                repaired
            } else {
                outcome.best.clone()
            };
            log.traces.push(outcome.trace);

            let mut applied = Vec::with_capacity(count);
            for (index, controls) in final_iterate.controls.iter().enumerate() {
                let plan = controls.as_ref().ok_or_else(|| {
                    SolverError::Surrogate {
                        microgrid: index,
                        reason: "no controls to apply (missing repair pass)".into(),
                    }
                })?;
                applied.push(plan.iter().map(|horizon| horizon[0]).collect::<Vec<_>>());
            }
            (
                applied,
                final_iterate.tensor.step(0).to_vec(),
                final_iterate.post_cost,
            )
        };

        // Realize the first instance: outputs, feasibility, state advance.
        let mut realized = Vec::with_capacity(count);
        for (g, mg) in grid.microgrids().iter().enumerate() {
            let mut demand_sum = 0.0;
            for (i, h) in mg.households().iter().enumerate() {
                let u = applied[g][i];
                check_feasible(soc[g][i], &[u], 1, &h.battery, step_hours, configs.feasibility_tol)
                    .map_err(|violation| HarnessError::InfeasibleControl {
                        step,
                        microgrid: g,
                        household: h.id,
                        violation,
                    })?;
                demand_sum += output_demand(h.net_consumption(step), u, &h.battery);
                soc[g][i] = step_dynamics(soc[g][i], u, &h.battery, step_hours);
                log.soc_paths[g][i].push(soc[g][i]);
            }
            realized.push(demand_sum / mg.size() as f64);
        }
        log.stage_costs
            .push(stage_cost(reference[0], &rates_now, &realized, topology, &sizes));
        log.open_loop_costs.push(open_loop_cost);
        log.realized_demands.push(realized);
        log.applied_controls.push(applied);
    }

    log.samples = recorder.take();
    Ok(log)
}

/// Open- and closed-loop cost totals of one disturbed run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PerturbationRow {
    pub intensity_exp: u32,
    pub seed: u64,
    pub stage_costs: Vec<f64>,
    pub open_loop_costs: Vec<f64>,
    pub total_stage_cost: f64,
    pub total_open_loop_cost: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PerturbationStudy {
    pub baseline_stage_costs: Vec<f64>,
    pub baseline_open_loop_costs: Vec<f64>,
    pub baseline_total_stage_cost: f64,
    pub rows: Vec<PerturbationRow>,
}

impl PerturbationStudy {
    /// Mean summed closed-loop cost over the seeds of one intensity.
    pub fn mean_stage_cost(&self, intensity_exp: u32) -> f64 {
        let rows: Vec<&PerturbationRow> = self
            .rows
            .iter()
            .filter(|r| r.intensity_exp == intensity_exp)
            .collect();
        rows.iter().map(|r| r.total_stage_cost).sum::<f64>() / rows.len() as f64
    }
}

/// Runs the undisturbed consensus baseline, then one disturbed run per
/// (intensity, seed) pair with the noise injected into every lower-level
/// return.
pub fn perturbation_study(
    scenario: &Scenario,
    intensities: &[u32],
    seeds: &[u64],
    configs: &SolverConfigs,
) -> Result<PerturbationStudy, HarnessError> {
    let baseline = run_mpc(
        scenario,
        SolverChoice::Admm,
        &vec![None; scenario.grid.count()],
        configs,
        &RunOptions::default(),
    )?;
    let mut rows = Vec::with_capacity(intensities.len() * seeds.len());
    for &intensity_exp in intensities {
        for &seed in seeds {
            let options = RunOptions {
                disturbance: Some(DisturbanceSpec { intensity_exp, seed }),
                ..Default::default()
            };
            let log = run_mpc(
                scenario,
                SolverChoice::Admm,
                &vec![None; scenario.grid.count()],
                configs,
                &options,
            )?;
            rows.push(PerturbationRow {
                intensity_exp,
                seed,
                total_stage_cost: log.total_stage_cost(),
                total_open_loop_cost: log.total_open_loop_cost(),
                stage_costs: log.stage_costs,
                open_loop_costs: log.open_loop_costs,
            });
        }
    }
    Ok(PerturbationStudy {
        baseline_total_stage_cost: baseline.total_stage_cost(),
        baseline_stage_costs: baseline.stage_costs,
        baseline_open_loop_costs: baseline.open_loop_costs,
        rows,
    })
}

/// Mean and standard deviation of the per-call wall time, grouped by solver
/// kind and microgrid. Communication delays are not modeled; the numbers
/// cover the solver calls alone.
#[derive(Debug, Clone)]
pub struct TimingSummary {
    pub kind: SolverKind,
    pub microgrid: usize,
    pub calls: usize,
    pub mean: Duration,
    pub std_dev: Duration,
}

pub fn timing_report(log: &MpcLog) -> Vec<TimingSummary> {
    let mut groups: Vec<((SolverKind, usize), Vec<f64>)> = Vec::new();
    for &(kind, microgrid, elapsed) in &log.lower_timings {
        let key = (kind, microgrid);
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, samples)) => samples.push(elapsed.as_secs_f64()),
            None => groups.push((key, vec![elapsed.as_secs_f64()])),
        }
    }
    groups.sort_by_key(|((kind, mg), _)| (format!("{kind}"), *mg));
    groups
        .into_iter()
        .map(|((kind, microgrid), samples)| {
            let calls = samples.len();
            let mean = samples.iter().sum::<f64>() / calls as f64;
            let variance =
                samples.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / calls as f64;
            TimingSummary {
                kind,
                microgrid,
                calls,
                mean: Duration::from_secs_f64(mean),
                std_dev: Duration::from_secs_f64(variance.sqrt()),
            }
        })
        .collect()
}
