//! Iterative bidirectional optimization: alternate microgrid-level solves
//! (distributed consensus or a surrogate standing in for it) with grid-level
//! exchange solves, feeding the exchanged demand back into each microgrid's
//! reference, until the coupling cost stagnates.

use crate::admm::{solve_lower_level, AdmmConfig, AdmmError, AdmmState};
use crate::battery::ControlPair;
use crate::exchange::{
    apply_exchange, solve_exchange, upper_cost, ExchangeSolveConfig, ExchangeTensor,
};
use crate::grid::{Microgrid, SmartGrid};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::time::{Duration, Instant};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SolverError {
    #[error("microgrid {microgrid}: {source}")]
    Admm {
        microgrid: usize,
        #[source]
        source: AdmmError,
    },
    #[error("microgrid {microgrid}: surrogate evaluation failed: {reason}")]
    Surrogate { microgrid: usize, reason: String },
    #[error("invalid bilevel config: {0}")]
    InvalidConfig(String),
}

/// Which machinery produced a lower-level solution; used to label timings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SolverKind {
    NoControl,
    Admm,
    DisturbedAdmm,
    Rbf,
    Nn,
}

impl std::fmt::Display for SolverKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            SolverKind::NoControl => "none",
            SolverKind::Admm => "admm",
            SolverKind::DisturbedAdmm => "admm+noise",
            SolverKind::Rbf => "rbf",
            SolverKind::Nn => "nn",
        };
        write!(f, "{name}")
    }
}

/// One microgrid-level problem instance handed to a lower solver.
pub struct LowerRequest<'a> {
    pub microgrid: &'a Microgrid,
    /// State of charge of every household at the current step.
    pub initial_soc: &'a [f64],
    /// Predicted net consumption per household over the horizon.
    pub net_consumption: &'a [Vec<f64>],
    /// Reference profile this solve should track.
    pub target: &'a [f64],
    pub step_hours: f64,
}

/// What a lower solver reports back. Surrogates return no controls; the
/// repair pass restores them.
pub struct LowerResponse {
    pub avg_demand: Vec<f64>,
    pub controls: Option<Vec<Vec<ControlPair>>>,
    /// N-profiles communicated during the solve (zero for surrogates).
    pub transmissions: u64,
}

/// A microgrid-level solver: the distributed consensus scheme, a fitted
/// surrogate, or a wrapper around either.
pub trait LowerSolver: Send {
    fn solve(&mut self, request: &LowerRequest) -> Result<LowerResponse, SolverError>;
    fn kind(&self) -> SolverKind;
    /// Drops any state carried between solves (warm starts).
    fn reset(&mut self) {}
}

/// Consensus solver with optional warm starting across calls.
pub struct AdmmLowerSolver {
    pub config: AdmmConfig,
    warm: Option<AdmmState>,
}

impl AdmmLowerSolver {
    pub fn new(config: AdmmConfig) -> Self {
        Self { config, warm: None }
    }
}

impl LowerSolver for AdmmLowerSolver {
    fn solve(&mut self, request: &LowerRequest) -> Result<LowerResponse, SolverError> {
        let solution = solve_lower_level(
            request.microgrid,
            request.initial_soc,
            request.net_consumption,
            request.target,
            &self.config,
            request.step_hours,
            self.warm.as_ref(),
        )
        .map_err(|source| SolverError::Admm {
            microgrid: request.microgrid.index,
            source,
        })?;
        self.warm = Some(solution.state.clone());
        Ok(LowerResponse {
            avg_demand: solution.avg_demand,
            controls: Some(solution.controls),
            transmissions: solution.transmissions,
        })
    }

    fn kind(&self) -> SolverKind {
        SolverKind::Admm
    }

    fn reset(&mut self) {
        self.warm = None;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BilevelConfig {
    /// Maximum number of bidirectional iterations (>= 1).
    pub max_iterations: usize,
    /// Stop once the post-exchange cost improves by no more than this.
    pub improvement_tol: f64,
}

impl Default for BilevelConfig {
    fn default() -> Self {
        Self {
            max_iterations: 10,
            improvement_tol: 1e-4,
        }
    }
}

/// Cost evolution of one bidirectional run. Entry `j` holds the coupling
/// cost of iteration `j + 1` before the exchange update (against the
/// previous tensor) and after it; the first pre-exchange entry is the cost
/// without any coupling.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct BilevelTrace {
    pub pre_exchange: Vec<f64>,
    pub post_exchange: Vec<f64>,
    pub transmissions: u64,
}

impl BilevelTrace {
    pub fn iterations(&self) -> usize {
        self.post_exchange.len()
    }

    /// Post-exchange costs under the monotone safeguard: the running best.
    pub fn safeguarded_post_exchange(&self) -> Vec<f64> {
        let mut best = f64::INFINITY;
        self.post_exchange
            .iter()
            .map(|&c| {
                best = best.min(c);
                best
            })
            .collect()
    }

    /// Iteration count (1-based) after which the improvement test first
    /// passed, if it did.
    pub fn stagnation_iteration(&self, tol: f64) -> Option<usize> {
        self.post_exchange
            .windows(2)
            .position(|w| w[0] - w[1] <= tol)
            .map(|i| i + 2)
    }
}

/// One complete iterate of the scheme.
#[derive(Debug, Clone)]
pub struct BilevelIterate {
    /// Average demand per microgrid.
    pub avg_demands: Vec<Vec<f64>>,
    pub tensor: ExchangeTensor,
    /// Per-microgrid household controls; `None` where a surrogate answered.
    pub controls: Vec<Option<Vec<Vec<ControlPair>>>>,
    /// Reference profile each microgrid tracked in this iterate.
    pub targets: Vec<Vec<f64>>,
    /// Coupling cost of (avg_demands, tensor).
    pub post_cost: f64,
}

/// Result of a bidirectional run: the best iterate seen (by post-exchange
/// cost), the full trace, and per-call timing of the lower solvers.
pub struct BilevelOutcome {
    pub best: BilevelIterate,
    pub trace: BilevelTrace,
    /// (kind, microgrid, wall time) per lower-level call.
    pub lower_timings: Vec<(SolverKind, usize, Duration)>,
}

/// Reference update: shifts the shared reference by the demand surplus the
/// exchange moved away, `reference + (avg_demand - exchanged_demand)`.
pub fn updated_reference(reference: &[f64], avg_demand: &[f64], exchanged: &[f64]) -> Vec<f64> {
    reference
        .iter()
        .zip(avg_demand.iter().zip(exchanged))
        .map(|(r, (z, x))| r + (z - x))
        .collect()
}

/// Inputs shared by every iteration of one bidirectional run.
pub struct BilevelProblem<'a> {
    pub grid: &'a SmartGrid,
    /// Per-microgrid, per-household state of charge.
    pub initial_soc: &'a [Vec<f64>],
    /// Per-microgrid, per-household predicted net consumption.
    pub net_consumption: &'a [Vec<Vec<f64>>],
    /// Shared reference profile for the horizon.
    pub reference: &'a [f64],
    pub step_hours: f64,
}

impl BilevelProblem<'_> {
    fn sizes(&self) -> Vec<usize> {
        self.grid.sizes()
    }

    /// Runs all microgrid-level solves for the given per-microgrid targets,
    /// in parallel.
    fn lower_pass(
        &self,
        lowers: &mut [Box<dyn LowerSolver>],
        targets: &[Vec<f64>],
        timings: &mut Vec<(SolverKind, usize, Duration)>,
        transmissions: &mut u64,
    ) -> Result<(Vec<Vec<f64>>, Vec<Option<Vec<Vec<ControlPair>>>>), SolverError> {
        let microgrids = self.grid.microgrids();
        let results: Vec<Result<(LowerResponse, SolverKind, Duration), SolverError>> = lowers
            .par_iter_mut()
            .enumerate()
            .map(|(k, solver)| {
                let request = LowerRequest {
                    microgrid: &microgrids[k],
                    initial_soc: &self.initial_soc[k],
                    net_consumption: &self.net_consumption[k],
                    target: &targets[k],
                    step_hours: self.step_hours,
                };
                let started = Instant::now();
                let response = solver.solve(&request)?;
                Ok((response, solver.kind(), started.elapsed()))
            })
            .collect();

        let mut avg_demands = Vec::with_capacity(results.len());
        let mut controls = Vec::with_capacity(results.len());
        for (k, result) in results.into_iter().enumerate() {
            let (response, kind, elapsed) = result?;
            timings.push((kind, k, elapsed));
            *transmissions += response.transmissions;
            avg_demands.push(response.avg_demand);
            controls.push(response.controls);
        }
        Ok((avg_demands, controls))
    }

    /// One full bidirectional iteration from a previous iterate: reference
    /// update, microgrid-level solves, exchange solve.
    pub fn iterate_once(
        &self,
        lowers: &mut [Box<dyn LowerSolver>],
        previous: &BilevelIterate,
        exchange_config: &ExchangeSolveConfig,
        timings: &mut Vec<(SolverKind, usize, Duration)>,
        transmissions: &mut u64,
    ) -> Result<(BilevelIterate, f64), SolverError> {
        let sizes = self.sizes();
        let exchanged = apply_exchange(
            &previous.avg_demands,
            &previous.tensor,
            self.grid.topology(),
            &sizes,
        );
        let targets: Vec<Vec<f64>> = previous
            .avg_demands
            .iter()
            .zip(&exchanged)
            .map(|(z, x)| updated_reference(self.reference, z, x))
            .collect();

        let (avg_demands, controls) = self.lower_pass(lowers, &targets, timings, transmissions)?;
        let pre_cost = upper_cost(
            &avg_demands,
            &previous.tensor,
            self.grid.topology(),
            self.reference,
            &sizes,
        );
        let solution = solve_exchange(
            &avg_demands,
            self.grid.topology(),
            self.reference,
            &sizes,
            exchange_config,
            Some(&previous.tensor),
        );
        let post_cost = upper_cost(
            &avg_demands,
            &solution.tensor,
            self.grid.topology(),
            self.reference,
            &sizes,
        );
        Ok((
            BilevelIterate {
                avg_demands,
                tensor: solution.tensor,
                controls,
                targets,
                post_cost,
            },
            pre_cost,
        ))
    }
}

/// Runs the bidirectional scheme: an initialization pass (identity exchange,
/// microgrid solves against the shared reference, first exchange solve),
/// then repeated reference-updated iterations until the post-exchange cost
/// improves by at most `improvement_tol` or the iteration cap is hit.
///
/// Surrogate lower solvers may worsen the cost; the best iterate seen is
/// retained and returned, and the raw trace records what actually happened.
pub fn run_bidirectional(
    problem: &BilevelProblem,
    lowers: &mut [Box<dyn LowerSolver>],
    config: &BilevelConfig,
    exchange_config: &ExchangeSolveConfig,
) -> Result<BilevelOutcome, SolverError> {
    if config.max_iterations == 0 {
        return Err(SolverError::InvalidConfig(
            "max_iterations must be >= 1".into(),
        ));
    }
    if !(config.improvement_tol > 0.0) {
        return Err(SolverError::InvalidConfig(
            "improvement_tol must be > 0".into(),
        ));
    }
    let count = problem.grid.count();
    assert_eq!(lowers.len(), count, "one lower solver per microgrid");

    let sizes = problem.sizes();
    let horizon = problem.reference.len();
    let mut timings = Vec::new();
    let mut transmissions = 0u64;
    let mut trace = BilevelTrace::default();

    // Initialization: identity exchange, shared reference everywhere.
    let identity = ExchangeTensor::identity(count, horizon);
    let shared_targets: Vec<Vec<f64>> = vec![problem.reference.to_vec(); count];
    let (avg_demands, controls) =
        problem.lower_pass(lowers, &shared_targets, &mut timings, &mut transmissions)?;
    let uncoupled_cost = upper_cost(
        &avg_demands,
        &identity,
        problem.grid.topology(),
        problem.reference,
        &sizes,
    );
    let solution = solve_exchange(
        &avg_demands,
        problem.grid.topology(),
        problem.reference,
        &sizes,
        exchange_config,
        None,
    );
    let post_cost = upper_cost(
        &avg_demands,
        &solution.tensor,
        problem.grid.topology(),
        problem.reference,
        &sizes,
    );
    trace.pre_exchange.push(uncoupled_cost);
    trace.post_exchange.push(post_cost);

    let mut current = BilevelIterate {
        avg_demands,
        tensor: solution.tensor,
        controls,
        targets: shared_targets,
        post_cost,
    };
    let mut best = current.clone();

    // Improvement is measured between consecutive post-exchange costs; the
    // initialization provides the first baseline, so the test starts with
    // the second iterate.
    while trace.iterations() < config.max_iterations {
        let (next, pre_cost) = problem.iterate_once(
            lowers,
            &current,
            exchange_config,
            &mut timings,
            &mut transmissions,
        )?;
        trace.pre_exchange.push(pre_cost);
        trace.post_exchange.push(next.post_cost);
        if next.post_cost < best.post_cost {
            best = next.clone();
        }
        current = next;
        // Newly appended costs participate in the next improvement test.
        let completed = trace.iterations();
        let improvement = trace.post_exchange[completed - 2] - trace.post_exchange[completed - 1];
        if improvement <= config.improvement_tol {
            break;
        }
    }

    trace.transmissions = transmissions;
    Ok(BilevelOutcome {
        best,
        trace,
        lower_timings: timings,
    })
}
