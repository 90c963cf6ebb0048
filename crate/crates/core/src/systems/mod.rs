//! Ground-truth data: ODE emulators, random-step excitation, measured
//! datasets, and splitting/windowing.

mod cstr;
mod dataset;
mod excitation;
mod ode;
mod twotank;

pub use cstr::{simulate_cstr, CstrParams, CSTR_NOMINAL_COOLANT, CSTR_NOMINAL_STATE};
pub use dataset::{
    load_aero, read_dataset, split_and_window, windows, write_dataset, NormalizationStats, SplitData,
    TrajectoryDataset, WindowBatch, AERO_DT, AERO_INPUTS, AERO_OUTPUTS,
};
pub use excitation::{binarize_channel, random_step_input};
pub use ode::{rk4_integrate, rk4_integrate_projected, rk4_step};
pub use twotank::{simulate_twotank, TwoTankParams};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffcore::Matrix;
use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SystemKind {
    Cstr,
    Twotank,
    Aero,
}

/// Excitation and integration settings for an emulated system.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimulationSpec {
    pub steps: usize,
    pub dt: f64,
    pub hold_range: (usize, usize),
    pub level_ranges: Vec<(f64, f64)>,
    pub x0: [f64; 2],
    /// Round the two-tank valve input to `{0, 1}`.
    #[serde(default)]
    pub binary_valve: bool,
}

impl SimulationSpec {
    pub fn cstr_default(steps: usize) -> Self {
        Self {
            steps,
            dt: 0.1,
            hold_range: (20, 200),
            level_ranges: vec![(297.0, 303.0)],
            x0: CSTR_NOMINAL_STATE,
            binary_valve: false,
        }
    }

    pub fn twotank_default(steps: usize) -> Self {
        Self {
            steps,
            dt: 1.0,
            hold_range: (20, 200),
            level_ranges: vec![(0.0, 1.0), (0.0, 1.0)],
            x0: [0.1, 0.1],
            binary_valve: false,
        }
    }
}

pub fn generate_cstr(params: &CstrParams, spec: &SimulationSpec, seed: u64) -> Result<TrajectoryDataset> {
    let u = random_step_input(seed, spec.steps, spec.hold_range, &spec.level_ranges)?;
    let y = simulate_cstr(params, &u, spec.x0, spec.dt)?;
    TrajectoryDataset::new(u, y, spec.dt)
}

pub fn generate_twotank(params: &TwoTankParams, spec: &SimulationSpec, seed: u64) -> Result<TrajectoryDataset> {
    let mut u = random_step_input(seed, spec.steps, spec.hold_range, &spec.level_ranges)?;
    if spec.binary_valve {
        binarize_channel(&mut u, 0);
    }
    let y = simulate_twotank(params, &u, spec.x0, spec.dt)?;
    TrajectoryDataset::new(u, y, spec.dt)
}

/// SHA-256 over the shape and little-endian bytes of a series.
pub fn series_checksum(m: &Matrix) -> String {
    let mut h = Sha256::new();
    h.update((m.rows() as u64).to_le_bytes());
    h.update((m.cols() as u64).to_le_bytes());
    for v in m.as_slice() {
        h.update(v.to_le_bytes());
    }
    hex::encode(h.finalize())
}
