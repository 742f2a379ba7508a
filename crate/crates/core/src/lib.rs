//! Bilevel battery scheduling and energy exchange for coupled microgrids.
//!
//! The crate models a smart grid as a set of microgrids linked by lossy
//! transmission lines. On the microgrid level, household batteries are
//! scheduled by a distributed consensus solver so that the average demand
//! tracks a slowly varying reference; on the grid level, an exchange
//! optimizer routes demand between microgrids. An iterative bidirectional
//! scheme couples the two levels, surrogate models (radial basis function
//! interpolation or a small sigmoid network) can stand in for the microgrid
//! solver to cut communication, and a model-predictive-control harness runs
//! the whole stack in closed loop with cost, timing, and communication
//! accounting.

pub mod admm;
pub mod battery;
pub mod bilevel;
pub mod exchange;
pub mod grid;
pub mod harness;
mod qp;
pub mod scenario;
pub mod surrogate;

pub use admm::{solve_lower_level, AdmmConfig, AdmmError, AdmmState, LowerLevelSolution};
pub use bilevel::{
    run_bidirectional, updated_reference, AdmmLowerSolver, BilevelConfig, BilevelOutcome,
    BilevelProblem, BilevelTrace, LowerRequest, LowerResponse, LowerSolver, SolverError,
    SolverKind,
};
pub use exchange::{
    apply_exchange, solve_exchange, upper_cost, ExchangeSolveConfig, ExchangeSolution,
    ExchangeTensor,
};
pub use battery::{
    check_feasible, is_feasible, output_demand, simulate_horizon, step_dynamics, ControlPair,
    SocTrajectory, Violation,
};
pub use grid::{
    average_demand, reference_profile, reference_trajectory, BatteryParams, GridError,
    GridTopology, Household, Microgrid, ScenarioConfig, SmartGrid, TopologyViolation,
};
pub use harness::{
    disturb, perturbation_study, run_mpc, stage_cost, timing_report, DisturbanceSpec,
    HarnessError, MpcLog, PerturbationStudy, RunOptions, SolverChoice, SolverConfigs,
    TimingSummary,
};
pub use scenario::{
    assemble_scenario, battery_fleet, benchmark_scenario, benchmark_topology, generate_profiles,
    Scenario, SyntheticConfig,
};
pub use surrogate::{
    collect_samples, fit_nn, fit_rbf, load_model, save_model, NnModel, NnTrainConfig, RbfKernel,
    RbfModel, Sample, SampleSet, SurrogateError, SurrogateInput, SurrogateModel, SurrogateSolver,
};
