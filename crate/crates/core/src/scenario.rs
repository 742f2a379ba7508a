//! Scenario assembly: synthetic household data, randomized battery fleets,
//! and the committed benchmark scenario used by the regression suite.

use crate::grid::{
    BatteryParams, GridError, GridTopology, Household, Microgrid, ScenarioConfig, SmartGrid,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// A fully assembled closed-loop experiment.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub grid: SmartGrid,
    pub config: ScenarioConfig,
    /// First simulated step (data before it feeds the reference window).
    pub start_step: usize,
    /// Initial state of charge per microgrid per household.
    pub initial_soc: Vec<Vec<f64>>,
}

impl Scenario {
    pub fn new(
        grid: SmartGrid,
        config: ScenarioConfig,
        start_step: usize,
        initial_soc: Vec<Vec<f64>>,
    ) -> Result<Self, GridError> {
        let needed = start_step + config.sim_steps + config.horizon;
        if grid.data_len() < needed {
            return Err(GridError::InvalidConfig(format!(
                "household data covers {} steps but the run needs {needed}",
                grid.data_len()
            )));
        }
        if initial_soc.len() != grid.count() {
            return Err(GridError::InvalidConfig(
                "one SoC vector per microgrid required".into(),
            ));
        }
        for (mg, soc) in grid.microgrids().iter().zip(&initial_soc) {
            if soc.len() != mg.size() {
                return Err(GridError::InvalidConfig(format!(
                    "microgrid {} has {} households but {} SoC values",
                    mg.index,
                    mg.size(),
                    soc.len()
                )));
            }
            for (h, &x) in mg.households().iter().zip(soc) {
                if !(0.0..=h.battery.capacity).contains(&x) {
                    return Err(GridError::InvalidConfig(format!(
                        "household {} starts at SoC {x} outside [0, {}]",
                        h.id, h.battery.capacity
                    )));
                }
            }
        }
        Ok(Self {
            grid,
            config,
            start_step,
            initial_soc,
        })
    }
}

/// Shape of the synthetic household data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub households: usize,
    pub days: usize,
    /// Step length in hours.
    pub step_hours: f64,
    /// Relative multiplicative noise level (0 disables noise).
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            households: 16,
            days: 4,
            step_hours: 0.5,
            noise: 0.15,
            seed: 1,
        }
    }
}

fn daily_load_shape(hour: f64) -> f64 {
    let morning = 0.35 * (-((hour - 7.5) * (hour - 7.5)) / (2.0 * 1.5 * 1.5)).exp();
    let evening = 0.6 * (-((hour - 19.0) * (hour - 19.0)) / (2.0 * 2.2 * 2.2)).exp();
    0.35 + morning + evening
}

fn daily_solar_shape(hour: f64) -> f64 {
    if (6.0..18.0).contains(&hour) {
        let phase = std::f64::consts::PI * (hour - 6.0) / 12.0;
        0.95 * phase.sin().powf(1.5)
    } else {
        0.0
    }
}

/// Generates per-household (load, generation) series in kW. Households share
/// the daily shapes up to per-household scaling: loads vary randomly around
/// one, solar capacity grows along the household index so that contiguous
/// groups end up with different generation mixes. Generation is zero at
/// night; load stays strictly positive.
pub fn generate_profiles(config: &SyntheticConfig) -> Vec<(Vec<f64>, Vec<f64>)> {
    let steps_per_day = (24.0 / config.step_hours).round() as usize;
    let steps = steps_per_day * config.days;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut profiles = Vec::with_capacity(config.households);
    for index in 0..config.households {
        let load_scale = 0.75 + 0.5 * rng.gen::<f64>();
        let position = if config.households > 1 {
            index as f64 / (config.households - 1) as f64
        } else {
            0.5
        };
        let solar_gradient = 0.25 + 1.75 * position.powf(1.5);
        let solar_scale = solar_gradient * (0.8 + 0.4 * rng.gen::<f64>());
        let mut load = Vec::with_capacity(steps);
        let mut generation = Vec::with_capacity(steps);
        for step in 0..steps {
            let hour = (step % steps_per_day) as f64 * config.step_hours;
            let load_noise = 1.0 + config.noise * rng.gen_range(-1.0..1.0);
            let solar_noise = 1.0 + config.noise * rng.gen_range(-1.0..1.0);
            load.push((load_scale * daily_load_shape(hour) * load_noise).max(0.02));
            generation.push((solar_scale * daily_solar_shape(hour) * solar_noise).max(0.0));
        }
        profiles.push((load, generation));
    }
    profiles
}

/// Draws battery parameters uniformly within `1 +- spread` of the given
/// means. The efficiency means are fixed; capacity and power limits follow
/// the configured means.
pub fn battery_fleet(
    count: usize,
    capacity_mean: f64,
    charge_limit_mean: f64,
    discharge_limit_mean: f64,
    spread: f64,
    seed: u64,
) -> Vec<BatteryParams> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fleet = Vec::with_capacity(count);
    for _ in 0..count {
        let mut draw = |mean: f64| mean * (1.0 + spread * rng.gen_range(-1.0..1.0));
        let capacity = draw(capacity_mean).max(0.0);
        let charge = draw(charge_limit_mean).max(0.0);
        let discharge = draw(discharge_limit_mean).min(0.0);
        let self_discharge = (1.0 - 0.002 * rng.gen_range(0.5..1.5f64)).clamp(0.0001, 1.0);
        let charge_eff = (0.95 * (1.0 + 0.02 * rng.gen_range(-1.0..1.0f64))).clamp(0.0001, 1.0);
        let discharge_eff = (0.95 * (1.0 + 0.02 * rng.gen_range(-1.0..1.0f64))).clamp(0.0001, 1.0);
        fleet.push(
            BatteryParams::new(
                self_discharge,
                charge_eff,
                discharge_eff,
                capacity,
                charge,
                discharge,
            )
            .expect("drawn battery parameters are valid by construction"),
        );
    }
    fleet
}

/// Groups generated household data into microgrids (in index order) and
/// pairs it with a battery fleet. Initial SoC is the given fraction of each
/// battery's capacity.
pub fn assemble_scenario(
    sizes: &[usize],
    topology: GridTopology,
    profiles: Vec<(Vec<f64>, Vec<f64>)>,
    batteries: Vec<BatteryParams>,
    config: ScenarioConfig,
    start_step: usize,
    initial_soc_fraction: f64,
) -> Result<Scenario, GridError> {
    let total: usize = sizes.iter().sum();
    if profiles.len() != total || batteries.len() != total {
        return Err(GridError::InvalidConfig(format!(
            "{total} households required, got {} profiles and {} batteries",
            profiles.len(),
            batteries.len()
        )));
    }
    let mut microgrids = Vec::with_capacity(sizes.len());
    let mut soc = Vec::with_capacity(sizes.len());
    let mut iter = profiles.into_iter().zip(batteries).enumerate();
    for (index, &size) in sizes.iter().enumerate() {
        let mut households = Vec::with_capacity(size);
        let mut grid_soc = Vec::with_capacity(size);
        for _ in 0..size {
            let (id, ((load, generation), battery)) =
                iter.next().expect("sizes sum to the household count");
            grid_soc.push(initial_soc_fraction * battery.capacity);
            households.push(Household::new(id, battery, load, generation)?);
        }
        microgrids.push(Microgrid::new(index, households)?);
        soc.push(grid_soc);
    }
    let grid = SmartGrid::new(microgrids, topology)?;
    Scenario::new(grid, config, start_step, soc)
}

/// The four-microgrid transmission topology used by the benchmark runs.
pub fn benchmark_topology() -> GridTopology {
    GridTopology::new(vec![
        vec![1.0, 0.9, 0.9, 0.85],
        vec![0.9, 1.0, 0.0, 0.85],
        vec![0.9, 0.0, 1.0, 0.0],
        vec![0.85, 0.85, 0.0, 1.0],
    ])
    .expect("benchmark topology is valid")
}

/// Committed regression scenario: four microgrids of sizes 50/10/10/10 on
/// the benchmark topology, half-hour steps, a six-step horizon, four days of
/// synthetic data, and a 48-step (one day) evaluation window starting after
/// two days. Fully determined by the seed.
pub fn benchmark_scenario(seed: u64) -> Scenario {
    let sizes = [50usize, 10, 10, 10];
    let total: usize = sizes.iter().sum();
    let profiles = generate_profiles(&SyntheticConfig {
        households: total,
        days: 4,
        step_hours: 0.5,
        noise: 0.15,
        seed,
    });
    let batteries = battery_fleet(total, 0.98, 0.25, -0.24, 0.2, seed ^ 0x9e3779b97f4a7c15);
    let config = ScenarioConfig::new(0.5, 6, 48, seed).expect("valid benchmark config");
    assemble_scenario(
        &sizes,
        benchmark_topology(),
        profiles,
        batteries,
        config,
        96,
        0.5,
    )
    .expect("benchmark scenario assembles")
}
