//! Learnable stand-ins for the microgrid-level solver.
//!
//! The distributed solver realizes a map from (average predicted net
//! consumption, current states of charge, reference profile) to the optimal
//! average demand profile; for fixed battery parameters that map is a
//! well-defined function, so it can be sampled during closed-loop runs and
//! approximated. Two approximations are provided — radial basis function
//! interpolation and a small sigmoid network — plus a repair pass that runs
//! one true bidirectional iteration after a surrogate-driven run to restore
//! feasible controls.

mod nn;
mod rbf;

pub use nn::{eval_nn_flat, fit_nn, NnModel, NnTrainConfig, DEFAULT_HIDDEN};
pub use rbf::{eval_rbf_flat, fit_rbf, RbfKernel, RbfModel};

use crate::bilevel::{
    BilevelIterate, BilevelProblem, LowerRequest, LowerResponse, LowerSolver, SolverError,
    SolverKind,
};
use crate::exchange::ExchangeSolveConfig;
use crate::grid::average_demand;
use serde::{Deserialize, Serialize};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SurrogateError {
    #[error("input dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("samples {first} and {second} have identical inputs")]
    DuplicateCenters { first: usize, second: usize },
    #[error("singular fitting system: {0}")]
    SingularSystem(String),
    #[error("have {have} samples, need at least {need}")]
    NotEnoughSamples { have: usize, need: usize },
    #[error("training produced a non-finite loss at epoch {epoch}")]
    TrainingDiverged { epoch: usize },
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error("model io: {0}")]
    Io(#[from] std::io::Error),
    #[error("model file: {0}")]
    Format(#[from] serde_json::Error),
    #[error("unsupported model file version {0}")]
    UnsupportedVersion(u32),
}

/// Input of the approximated map: what the coordinator knows at one step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurrogateInput {
    /// Average predicted net consumption over the horizon.
    pub avg_consumption: Vec<f64>,
    /// State of charge of every household at the current step.
    pub soc: Vec<f64>,
    /// Reference profile the solve tracks.
    pub reference: Vec<f64>,
}

impl SurrogateInput {
    pub fn dim(&self) -> usize {
        self.avg_consumption.len() + self.soc.len() + self.reference.len()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut flat = Vec::with_capacity(self.dim());
        flat.extend_from_slice(&self.avg_consumption);
        flat.extend_from_slice(&self.soc);
        flat.extend_from_slice(&self.reference);
        flat
    }
}

/// One observed input/output pair of the solver map, with provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub input: SurrogateInput,
    /// Average demand profile the solver returned.
    pub output: Vec<f64>,
    pub scenario_id: u64,
    /// Closed-loop step the solve belonged to.
    pub step: usize,
    /// Bidirectional iteration within that step (0 = initialization solve).
    pub iteration: usize,
}

/// Training data for one microgrid's surrogate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleSet {
    pub input_dim: usize,
    pub output_dim: usize,
    pub samples: Vec<Sample>,
}

impl SampleSet {
    pub fn new(input_dim: usize, output_dim: usize) -> Self {
        Self {
            input_dim,
            output_dim,
            samples: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn push(&mut self, sample: Sample) -> Result<(), SurrogateError> {
        if sample.input.dim() != self.input_dim {
            return Err(SurrogateError::DimensionMismatch {
                expected: self.input_dim,
                got: sample.input.dim(),
            });
        }
        if sample.output.len() != self.output_dim {
            return Err(SurrogateError::DimensionMismatch {
                expected: self.output_dim,
                got: sample.output.len(),
            });
        }
        self.samples.push(sample);
        Ok(())
    }

    /// Keeps every `stride`-th sample, starting from the first.
    pub fn subsample(&self, stride: usize) -> Self {
        assert!(stride >= 1, "stride must be >= 1");
        Self {
            input_dim: self.input_dim,
            output_dim: self.output_dim,
            samples: self.samples.iter().step_by(stride).cloned().collect(),
        }
    }
}

/// Merges the recorded samples of one microgrid from several runs into a
/// training set. Each run contributes its samples in recording order.
pub fn collect_samples(
    runs: &[&[(usize, Sample)]],
    microgrid: usize,
) -> Result<SampleSet, SurrogateError> {
    let mut iter = runs
        .iter()
        .flat_map(|r| r.iter())
        .filter(|(mg, _)| *mg == microgrid)
        .map(|(_, s)| s)
        .peekable();
    let first = iter.peek().ok_or(SurrogateError::NotEnoughSamples {
        have: 0,
        need: 1,
    })?;
    let mut set = SampleSet::new(first.input.dim(), first.output.len());
    for sample in iter {
        set.push(sample.clone())?;
    }
    Ok(set)
}

/// A fitted surrogate of either kind, with a uniform evaluation surface.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SurrogateModel {
    Rbf(RbfModel),
    Nn(NnModel),
}

impl SurrogateModel {
    pub fn input_dim(&self) -> usize {
        match self {
            SurrogateModel::Rbf(m) => m.input_dim,
            SurrogateModel::Nn(m) => m.input_dim,
        }
    }

    pub fn output_dim(&self) -> usize {
        match self {
            SurrogateModel::Rbf(m) => m.output_dim,
            SurrogateModel::Nn(m) => m.output_dim,
        }
    }

    pub fn solver_kind(&self) -> SolverKind {
        match self {
            SurrogateModel::Rbf(_) => SolverKind::Rbf,
            SurrogateModel::Nn(_) => SolverKind::Nn,
        }
    }

    pub fn eval(&self, input: &SurrogateInput) -> Result<Vec<f64>, SurrogateError> {
        let flat = input.flatten();
        match self {
            SurrogateModel::Rbf(m) => eval_rbf_flat(m, &flat),
            SurrogateModel::Nn(m) => eval_nn_flat(m, &flat),
        }
    }

    fn validate(&self) -> Result<(), SurrogateError> {
        match self {
            SurrogateModel::Rbf(m) => m.validate(),
            SurrogateModel::Nn(m) => m.validate(),
        }
    }
}

const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format_version: u32,
    input_dim: usize,
    output_dim: usize,
    model: SurrogateModel,
}

/// Writes a model to a self-describing versioned file.
pub fn save_model(path: &Path, model: &SurrogateModel) -> Result<(), SurrogateError> {
    let file = ModelFile {
        format_version: MODEL_FORMAT_VERSION,
        input_dim: model.input_dim(),
        output_dim: model.output_dim(),
        model: model.clone(),
    };
    let text = serde_json::to_string(&file)?;
    std::fs::write(path, text)?;
    Ok(())
}

/// Loads a model and checks version and internal dimensions.
pub fn load_model(path: &Path) -> Result<SurrogateModel, SurrogateError> {
    let text = std::fs::read_to_string(path)?;
    let file: ModelFile = serde_json::from_str(&text)?;
    if file.format_version != MODEL_FORMAT_VERSION {
        return Err(SurrogateError::UnsupportedVersion(file.format_version));
    }
    if file.input_dim != file.model.input_dim() || file.output_dim != file.model.output_dim() {
        return Err(SurrogateError::InvalidModel(format!(
            "declared dimensions {}x{} do not match the payload",
            file.input_dim, file.output_dim
        )));
    }
    file.model.validate()?;
    Ok(file.model)
}

/// Loads a model and rejects it when its dimensions do not fit the microgrid
/// it is meant to serve.
pub fn load_model_for(
    path: &Path,
    expected_input: usize,
    expected_output: usize,
) -> Result<SurrogateModel, SurrogateError> {
    let model = load_model(path)?;
    if model.input_dim() != expected_input {
        return Err(SurrogateError::DimensionMismatch {
            expected: expected_input,
            got: model.input_dim(),
        });
    }
    if model.output_dim() != expected_output {
        return Err(SurrogateError::DimensionMismatch {
            expected: expected_output,
            got: model.output_dim(),
        });
    }
    Ok(model)
}

/// Builds the surrogate input for one lower-level request.
pub fn surrogate_input(request: &LowerRequest) -> SurrogateInput {
    let avg_consumption =
        average_demand(request.net_consumption).expect("microgrids hold at least one household");
    SurrogateInput {
        avg_consumption,
        soc: request.initial_soc.to_vec(),
        reference: request.target.to_vec(),
    }
}

/// Lower solver backed by a fitted model: one function evaluation, no
/// communication, no controls.
pub struct SurrogateSolver {
    model: SurrogateModel,
}

impl SurrogateSolver {
    pub fn new(model: SurrogateModel) -> Self {
        Self { model }
    }
}

impl LowerSolver for SurrogateSolver {
    fn solve(&mut self, request: &LowerRequest) -> Result<LowerResponse, SolverError> {
        let input = surrogate_input(request);
        let avg_demand = self.model.eval(&input).map_err(|e| SolverError::Surrogate {
            microgrid: request.microgrid.index,
            reason: e.to_string(),
        })?;
        Ok(LowerResponse {
            avg_demand,
            controls: None,
            transmissions: 0,
        })
    }

    fn kind(&self) -> SolverKind {
        self.model.solver_kind()
    }
}

/// Shared handles through which a recording solver publishes its samples and
/// learns the current closed-loop step.
#[derive(Clone, Default)]
pub struct SampleRecorder {
    log: Arc<Mutex<Vec<(usize, Sample)>>>,
    step: Arc<AtomicUsize>,
}

impl SampleRecorder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set_step(&self, step: usize) {
        self.step.store(step, Ordering::SeqCst);
    }

    pub fn take(&self) -> Vec<(usize, Sample)> {
        std::mem::take(&mut self.log.lock().unwrap())
    }
}

/// Wraps a lower solver and records one sample per solve, tagged with the
/// microgrid, the current step, and the solve index within that step.
pub struct RecordingSolver {
    inner: Box<dyn LowerSolver>,
    recorder: SampleRecorder,
    scenario_id: u64,
    last_step: Option<usize>,
    iteration: usize,
}

impl RecordingSolver {
    pub fn new(inner: Box<dyn LowerSolver>, recorder: SampleRecorder, scenario_id: u64) -> Self {
        Self {
            inner,
            recorder,
            scenario_id,
            last_step: None,
            iteration: 0,
        }
    }
}

impl LowerSolver for RecordingSolver {
    fn solve(&mut self, request: &LowerRequest) -> Result<LowerResponse, SolverError> {
        let input = surrogate_input(request);
        let response = self.inner.solve(request)?;
        let step = self.recorder.step.load(Ordering::SeqCst);
        if self.last_step != Some(step) {
            self.last_step = Some(step);
            self.iteration = 0;
        }
        let sample = Sample {
            input,
            output: response.avg_demand.clone(),
            scenario_id: self.scenario_id,
            step,
            iteration: self.iteration,
        };
        self.iteration += 1;
        self.recorder
            .log
            .lock()
            .unwrap()
            .push((request.microgrid.index, sample));
        Ok(response)
    }

    fn kind(&self) -> SolverKind {
        self.inner.kind()
    }

    fn reset(&mut self) {
        self.inner.reset();
    }
}

/// One true bidirectional iteration after a surrogate-driven run: reference
/// update from the run's final iterate, microgrid-level solves with the
/// given (consensus) solvers, and an exchange solve. The returned iterate
/// carries battery-feasible controls for every microgrid.
pub fn repair_with_admm(
    problem: &BilevelProblem,
    prior: &BilevelIterate,
    admm_solvers: &mut [Box<dyn LowerSolver>],
    exchange_config: &ExchangeSolveConfig,
) -> Result<(BilevelIterate, Vec<(SolverKind, usize, Duration)>, u64), SolverError> {
    let mut timings = Vec::new();
    let mut transmissions = 0;
    let (iterate, _) = problem.iterate_once(
        admm_solvers,
        prior,
        exchange_config,
        &mut timings,
        &mut transmissions,
    )?;
    Ok((iterate, timings, transmissions))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::admm::AdmmConfig;
    use crate::bilevel::AdmmLowerSolver;
    use crate::grid::{BatteryParams, Household, Microgrid};
    use approx::assert_abs_diff_eq;

    fn sample(values: (f64, f64, f64), output: f64) -> Sample {
        Sample {
            input: SurrogateInput {
                avg_consumption: vec![values.0],
                soc: vec![values.1],
                reference: vec![values.2],
            },
            output: vec![output],
            scenario_id: 7,
            step: 0,
            iteration: 0,
        }
    }

    #[test]
    fn subsample_stride_one_is_identity_and_full_stride_keeps_first() {
        let mut set = SampleSet::new(3, 1);
        for i in 0..10 {
            set.push(sample((i as f64, 0.0, 0.0), i as f64)).unwrap();
        }
        assert_eq!(set.subsample(1), set);
        let single = set.subsample(10);
        assert_eq!(single.len(), 1);
        assert_eq!(single.samples[0], set.samples[0]);
        // Stride 25 over 4540 recordings keeps 182.
        let mut large = SampleSet::new(3, 1);
        for i in 0..4540 {
            large.push(sample((i as f64, 0.0, 0.0), 0.0)).unwrap();
        }
        assert_eq!(large.subsample(25).len(), 182);
    }

    #[test]
    fn collect_samples_filters_by_microgrid() {
        let runs: Vec<(usize, Sample)> = vec![
            (0, sample((1.0, 0.0, 0.0), 1.0)),
            (1, sample((2.0, 0.0, 0.0), 2.0)),
            (0, sample((3.0, 0.0, 0.0), 3.0)),
        ];
        let set = collect_samples(&[&runs], 0).unwrap();
        assert_eq!(set.len(), 2);
        assert_eq!(set.samples[1].output, vec![3.0]);
        assert!(collect_samples(&[&runs], 5).is_err());
    }

    #[test]
    fn model_round_trips_through_a_file_with_identical_evaluations() {
        let dir = std::env::temp_dir().join("mgopt-model-roundtrip");
        std::fs::create_dir_all(&dir).unwrap();

        let mut set = SampleSet::new(3, 1);
        for i in 0..12 {
            let x = i as f64 / 11.0;
            set.push(sample((x, 1.0 - x, 0.5 * x), x * x)).unwrap();
        }
        let rbf = SurrogateModel::Rbf(fit_rbf(&set, RbfKernel::Gaussian, None, 1e-10).unwrap());
        let nn = SurrogateModel::Nn(
            fit_nn(
                &set,
                &[4],
                &NnTrainConfig {
                    epochs: 30,
                    ..Default::default()
                },
            )
            .unwrap(),
        );
        for (name, model) in [("rbf.json", rbf), ("nn.json", nn)] {
            let path = dir.join(name);
            save_model(&path, &model).unwrap();
            let loaded = load_model(&path).unwrap();
            let probe = SurrogateInput {
                avg_consumption: vec![0.33],
                soc: vec![0.44],
                reference: vec![0.55],
            };
            assert_eq!(model.eval(&probe).unwrap(), loaded.eval(&probe).unwrap());
        }
    }

    #[test]
    fn loading_mismatched_dimensions_is_an_error() {
        let dir = std::env::temp_dir().join("mgopt-model-dims");
        std::fs::create_dir_all(&dir).unwrap();
        let mut set = SampleSet::new(3, 1);
        for i in 0..8 {
            let x = i as f64;
            set.push(sample((x, -x, 2.0 * x), x)).unwrap();
        }
        let model = SurrogateModel::Rbf(fit_rbf(&set, RbfKernel::Gaussian, None, 1e-10).unwrap());
        let path = dir.join("model.json");
        save_model(&path, &model).unwrap();
        assert!(load_model_for(&path, 3, 1).is_ok());
        assert!(matches!(
            load_model_for(&path, 5, 1),
            Err(SurrogateError::DimensionMismatch { expected: 5, got: 3 })
        ));
    }

    #[test]
    fn recording_solver_captures_one_sample_per_solve() {
        let w = vec![vec![1.0, 0.5], vec![0.7, 0.9]];
        let households: Vec<Household> = w
            .iter()
            .enumerate()
            .map(|(id, series)| {
                Household::new(id, BatteryParams::none(), series.clone(), vec![0.0; 2]).unwrap()
            })
            .collect();
        let mg = Microgrid::new(0, households).unwrap();
        let recorder = SampleRecorder::new();
        let mut solver = RecordingSolver::new(
            Box::new(AdmmLowerSolver::new(AdmmConfig::default())),
            recorder.clone(),
            42,
        );
        recorder.set_step(3);
        let request = LowerRequest {
            microgrid: &mg,
            initial_soc: &[0.0, 0.0],
            net_consumption: &w,
            target: &[0.8, 0.7],
            step_hours: 0.5,
        };
        solver.solve(&request).unwrap();
        solver.solve(&request).unwrap();
        recorder.set_step(4);
        solver.solve(&request).unwrap();
        let samples = recorder.take();
        assert_eq!(samples.len(), 3);
        assert_eq!(samples[0].1.step, 3);
        assert_eq!(samples[0].1.iteration, 0);
        assert_eq!(samples[1].1.iteration, 1);
        assert_eq!(samples[2].1.step, 4);
        assert_eq!(samples[2].1.iteration, 0);
        assert_eq!(samples[0].1.scenario_id, 42);
        // The recorded input is the averaged consumption plus SoC and target.
        let expected_avg = vec![(1.0 + 0.7) / 2.0, (0.5 + 0.9) / 2.0];
        for (got, want) in samples[0].1.input.avg_consumption.iter().zip(&expected_avg) {
            assert_abs_diff_eq!(got, want, epsilon = 1e-12);
        }
    }
}
