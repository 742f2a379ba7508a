//! Domain model for the smart grid: households with batteries, microgrids,
//! the transmission topology between microgrids, and the averaged reference
//! trajectory the controllers track.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GridError {
    #[error("invalid battery parameters: {0}")]
    InvalidBattery(String),
    #[error("household {id}: {reason}")]
    InvalidHousehold { id: usize, reason: String },
    #[error("microgrid {index}: {reason}")]
    InvalidMicrogrid { index: usize, reason: String },
    #[error("invalid topology: {0}")]
    InvalidTopology(String),
    #[error("invalid scenario config: {0}")]
    InvalidConfig(String),
    #[error("household {id}: data range [{start}, {end}] exceeds series length {len}")]
    DataRange {
        id: usize,
        start: usize,
        end: usize,
        len: usize,
    },
    #[error("empty profile collection")]
    EmptyCollection,
    #[error("profile length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },
}

/// Physical battery parameters of one household storage unit.
///
/// Efficiencies are per-step multiplicative factors in `(0, 1]`. Power limits
/// follow the sign convention used throughout: charging power is nonnegative,
/// discharging power is nonpositive. A household without a storage device is
/// modeled by `capacity = 0` together with zero power limits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BatteryParams {
    /// Self-discharge retention per step (1.0 means no self-discharge).
    pub self_discharge: f64,
    /// Charging efficiency.
    pub charge_efficiency: f64,
    /// Discharging efficiency.
    pub discharge_efficiency: f64,
    /// Usable capacity in kWh (>= 0).
    pub capacity: f64,
    /// Maximum charging power in kW (>= 0).
    pub charge_limit: f64,
    /// Maximum discharging power in kW (<= 0).
    pub discharge_limit: f64,
}

impl BatteryParams {
    pub fn new(
        self_discharge: f64,
        charge_efficiency: f64,
        discharge_efficiency: f64,
        capacity: f64,
        charge_limit: f64,
        discharge_limit: f64,
    ) -> Result<Self, GridError> {
        let in_unit = |v: f64| v > 0.0 && v <= 1.0;
        if !in_unit(self_discharge) {
            return Err(GridError::InvalidBattery(format!(
                "self-discharge efficiency {self_discharge} not in (0, 1]"
            )));
        }
        if !in_unit(charge_efficiency) {
            return Err(GridError::InvalidBattery(format!(
                "charge efficiency {charge_efficiency} not in (0, 1]"
            )));
        }
        if !in_unit(discharge_efficiency) {
            return Err(GridError::InvalidBattery(format!(
                "discharge efficiency {discharge_efficiency} not in (0, 1]"
            )));
        }
        if !(capacity >= 0.0 && capacity.is_finite()) {
            return Err(GridError::InvalidBattery(format!(
                "capacity {capacity} must be finite and >= 0"
            )));
        }
        if !(charge_limit >= 0.0 && charge_limit.is_finite()) {
            return Err(GridError::InvalidBattery(format!(
                "charge limit {charge_limit} must be finite and >= 0"
            )));
        }
        if !(discharge_limit <= 0.0 && discharge_limit.is_finite()) {
            return Err(GridError::InvalidBattery(format!(
                "discharge limit {discharge_limit} must be finite and <= 0"
            )));
        }
        Ok(Self {
            self_discharge,
            charge_efficiency,
            discharge_efficiency,
            capacity,
            charge_limit,
            discharge_limit,
        })
    }

    /// Battery of a household without a storage device.
    pub fn none() -> Self {
        Self {
            self_discharge: 1.0,
            charge_efficiency: 1.0,
            discharge_efficiency: 1.0,
            capacity: 0.0,
            charge_limit: 0.0,
            discharge_limit: 0.0,
        }
    }

    /// True when the control set collapses to the zero control.
    pub fn is_inert(&self) -> bool {
        self.charge_limit == 0.0 && self.discharge_limit == 0.0
    }
}

/// One residential energy system: a battery plus measured load and
/// generation series sampled at a fixed period.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Household {
    pub id: usize,
    pub battery: BatteryParams,
    load: Vec<f64>,
    generation: Vec<f64>,
}

impl Household {
    pub fn new(
        id: usize,
        battery: BatteryParams,
        load: Vec<f64>,
        generation: Vec<f64>,
    ) -> Result<Self, GridError> {
        if load.len() != generation.len() {
            return Err(GridError::InvalidHousehold {
                id,
                reason: format!(
                    "load series has {} samples, generation has {}",
                    load.len(),
                    generation.len()
                ),
            });
        }
        for (n, (&l, &g)) in load.iter().zip(&generation).enumerate() {
            if !(l.is_finite() && l >= 0.0) {
                return Err(GridError::InvalidHousehold {
                    id,
                    reason: format!("load[{n}] = {l} must be finite and >= 0"),
                });
            }
            if !(g.is_finite() && g >= 0.0) {
                return Err(GridError::InvalidHousehold {
                    id,
                    reason: format!("generation[{n}] = {g} must be finite and >= 0"),
                });
            }
        }
        Ok(Self {
            id,
            battery,
            load,
            generation,
        })
    }

    pub fn series_len(&self) -> usize {
        self.load.len()
    }

    pub fn load(&self) -> &[f64] {
        &self.load
    }

    pub fn generation(&self) -> &[f64] {
        &self.generation
    }

    /// Net consumption at step `n`: load minus generation.
    pub fn net_consumption(&self, n: usize) -> f64 {
        self.load[n] - self.generation[n]
    }

    /// Net consumption over `[start, start + len)`.
    pub fn net_consumption_window(&self, start: usize, len: usize) -> Result<Vec<f64>, GridError> {
        if start + len > self.load.len() {
            return Err(GridError::DataRange {
                id: self.id,
                start,
                end: start + len,
                len: self.load.len(),
            });
        }
        Ok((start..start + len).map(|n| self.net_consumption(n)).collect())
    }
}

/// A cluster of households whose internal exchange is lossless.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Microgrid {
    pub index: usize,
    households: Vec<Household>,
}

impl Microgrid {
    pub fn new(index: usize, households: Vec<Household>) -> Result<Self, GridError> {
        if households.is_empty() {
            return Err(GridError::InvalidMicrogrid {
                index,
                reason: "must contain at least one household".into(),
            });
        }
        let mut ids: Vec<usize> = households.iter().map(|h| h.id).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(GridError::InvalidMicrogrid {
                index,
                reason: "household ids must be unique".into(),
            });
        }
        Ok(Self { index, households })
    }

    pub fn households(&self) -> &[Household] {
        &self.households
    }

    pub fn size(&self) -> usize {
        self.households.len()
    }

    /// Average net consumption profile over `[start, start + len)`.
    pub fn avg_net_consumption(&self, start: usize, len: usize) -> Result<Vec<f64>, GridError> {
        let profiles: Vec<Vec<f64>> = self
            .households
            .iter()
            .map(|h| h.net_consumption_window(start, len))
            .collect::<Result<_, _>>()?;
        average_demand(&profiles)
    }
}

/// A violated topology invariant, naming the offending cell(s).
#[derive(Debug, Clone, PartialEq)]
pub enum TopologyViolation {
    /// `efficiency[row][col] != efficiency[col][row]`.
    Asymmetric { row: usize, col: usize, forward: f64, backward: f64 },
    /// Diagonal entry differs from one.
    DiagonalNotOne { index: usize, value: f64 },
    /// Entry outside `[0, 1]` (or not finite).
    OutOfRange { row: usize, col: usize, value: f64 },
}

impl std::fmt::Display for TopologyViolation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TopologyViolation::Asymmetric { row, col, forward, backward } => write!(
                f,
                "efficiency[{row}][{col}] = {forward} but efficiency[{col}][{row}] = {backward}"
            ),
            TopologyViolation::DiagonalNotOne { index, value } => {
                write!(f, "efficiency[{index}][{index}] = {value}, expected 1")
            }
            TopologyViolation::OutOfRange { row, col, value } => {
                write!(f, "efficiency[{row}][{col}] = {value} outside [0, 1]")
            }
        }
    }
}

/// Transmission topology between microgrids: a symmetric matrix of line
/// efficiencies in `[0, 1]`. A zero entry means there is no line; the
/// diagonal is one (transfers inside a microgrid are lossless).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridTopology {
    efficiency: Vec<Vec<f64>>,
}

impl GridTopology {
    /// Builds a topology after checking all structural invariants.
    pub fn new(efficiency: Vec<Vec<f64>>) -> Result<Self, GridError> {
        let unchecked = Self::new_unchecked(efficiency)?;
        let violations = unchecked.validate();
        if violations.is_empty() {
            Ok(unchecked)
        } else {
            let report: Vec<String> = violations.iter().map(|v| v.to_string()).collect();
            Err(GridError::InvalidTopology(report.join("; ")))
        }
    }

    /// Builds a topology checking only squareness; pair with [`Self::validate`].
    pub fn new_unchecked(efficiency: Vec<Vec<f64>>) -> Result<Self, GridError> {
        let n = efficiency.len();
        if n == 0 {
            return Err(GridError::InvalidTopology("matrix is empty".into()));
        }
        if let Some(row) = efficiency.iter().find(|r| r.len() != n) {
            return Err(GridError::InvalidTopology(format!(
                "matrix is not square: row of length {} in a {n}x{n} matrix",
                row.len()
            )));
        }
        Ok(Self { efficiency })
    }

    /// Fully connected lossless topology.
    pub fn lossless(count: usize) -> Self {
        Self {
            efficiency: vec![vec![1.0; count]; count],
        }
    }

    /// Number of microgrids.
    pub fn count(&self) -> usize {
        self.efficiency.len()
    }

    pub fn line_efficiency(&self, from: usize, to: usize) -> f64 {
        self.efficiency[from][to]
    }

    pub fn matrix(&self) -> &[Vec<f64>] {
        &self.efficiency
    }

    /// True when a (lossy) line connects the two microgrids.
    pub fn connected(&self, from: usize, to: usize) -> bool {
        from == to || self.efficiency[from][to] > 0.0
    }

    /// Checks symmetry, unit diagonal, and entry bounds; returns every
    /// violated cell. An empty report means the topology is valid.
    pub fn validate(&self) -> Vec<TopologyViolation> {
        let n = self.count();
        let mut violations = Vec::new();
        for row in 0..n {
            for col in 0..n {
                let v = self.efficiency[row][col];
                if !(v.is_finite() && (0.0..=1.0).contains(&v)) {
                    violations.push(TopologyViolation::OutOfRange { row, col, value: v });
                }
            }
        }
        for index in 0..n {
            let v = self.efficiency[index][index];
            if v != 1.0 {
                violations.push(TopologyViolation::DiagonalNotOne { index, value: v });
            }
        }
        for row in 0..n {
            for col in row + 1..n {
                let forward = self.efficiency[row][col];
                let backward = self.efficiency[col][row];
                if forward != backward {
                    violations.push(TopologyViolation::Asymmetric { row, col, forward, backward });
                }
            }
        }
        violations
    }
}

/// Time discretization and closed-loop length of one experiment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    /// Step length in hours.
    pub step_hours: f64,
    /// Prediction horizon in steps (>= 2).
    pub horizon: usize,
    /// Number of closed-loop steps to simulate.
    pub sim_steps: usize,
    pub rng_seed: u64,
}

impl ScenarioConfig {
    pub fn new(step_hours: f64, horizon: usize, sim_steps: usize, rng_seed: u64) -> Result<Self, GridError> {
        if !(step_hours > 0.0 && step_hours.is_finite()) {
            return Err(GridError::InvalidConfig(format!(
                "step length {step_hours} must be finite and > 0"
            )));
        }
        if horizon < 2 {
            return Err(GridError::InvalidConfig(format!(
                "prediction horizon {horizon} must be >= 2"
            )));
        }
        Ok(Self {
            step_hours,
            horizon,
            sim_steps,
            rng_seed,
        })
    }
}

/// The whole coupled system: microgrids plus the topology linking them.
#[derive(Debug, Clone)]
pub struct SmartGrid {
    microgrids: Vec<Microgrid>,
    topology: GridTopology,
}

impl SmartGrid {
    pub fn new(microgrids: Vec<Microgrid>, topology: GridTopology) -> Result<Self, GridError> {
        if microgrids.is_empty() {
            return Err(GridError::InvalidTopology("no microgrids".into()));
        }
        if microgrids.len() != topology.count() {
            return Err(GridError::InvalidTopology(format!(
                "{} microgrids but a {}x{} efficiency matrix",
                microgrids.len(),
                topology.count(),
                topology.count()
            )));
        }
        let violations = topology.validate();
        if !violations.is_empty() {
            let report: Vec<String> = violations.iter().map(|v| v.to_string()).collect();
            return Err(GridError::InvalidTopology(report.join("; ")));
        }
        Ok(Self { microgrids, topology })
    }

    pub fn microgrids(&self) -> &[Microgrid] {
        &self.microgrids
    }

    pub fn topology(&self) -> &GridTopology {
        &self.topology
    }

    pub fn count(&self) -> usize {
        self.microgrids.len()
    }

    /// Household count per microgrid.
    pub fn sizes(&self) -> Vec<usize> {
        self.microgrids.iter().map(|m| m.size()).collect()
    }

    pub fn total_households(&self) -> usize {
        self.microgrids.iter().map(|m| m.size()).sum()
    }

    fn households(&self) -> impl Iterator<Item = &Household> {
        self.microgrids.iter().flat_map(|m| m.households().iter())
    }

    /// Shortest series length over all households.
    pub fn data_len(&self) -> usize {
        self.households().map(|h| h.series_len()).min().unwrap_or(0)
    }
}

/// Overall average net consumption at step `n`, averaged backwards over a
/// window of at most `horizon` steps and over every household in the grid.
/// This is the slowly varying trajectory the demand flattening targets.
pub fn reference_trajectory(grid: &SmartGrid, n: usize, horizon: usize) -> Result<f64, GridError> {
    let window = n.min(horizon - 1);
    let start = n - window;
    let steps = window + 1;
    let total: usize = grid.total_households();
    let mut sum = 0.0;
    for household in grid.households() {
        if n >= household.series_len() {
            return Err(GridError::DataRange {
                id: household.id,
                start,
                end: n + 1,
                len: household.series_len(),
            });
        }
        for j in start..=n {
            sum += household.net_consumption(j);
        }
    }
    Ok(sum / (total as f64 * steps as f64))
}

/// Reference values for every step of the horizon `[start, start + horizon)`.
pub fn reference_profile(grid: &SmartGrid, start: usize, horizon: usize) -> Result<Vec<f64>, GridError> {
    (start..start + horizon)
        .map(|n| reference_trajectory(grid, n, horizon))
        .collect()
}

/// Pointwise arithmetic mean of equally long power profiles.
pub fn average_demand(profiles: &[Vec<f64>]) -> Result<Vec<f64>, GridError> {
    let first = profiles.first().ok_or(GridError::EmptyCollection)?;
    let len = first.len();
    for p in profiles {
        if p.len() != len {
            return Err(GridError::LengthMismatch {
                expected: len,
                got: p.len(),
            });
        }
    }
    let scale = 1.0 / profiles.len() as f64;
    let mut mean = vec![0.0; len];
    for p in profiles {
        for (m, v) in mean.iter_mut().zip(p) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m *= scale;
    }
    Ok(mean)
}
