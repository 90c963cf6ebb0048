use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::run_parallel;
use super::train::{train, DIVERGED_MSE};
use crate::blocks::ActivationKind;
use crate::error::{Error, Result};
use crate::linmaps::LinMapKind;
use crate::ssm::ModelClass;
use crate::systems::{split_and_window, TrajectoryDataset};

/// Axes of a grid search; an empty axis keeps the template's value.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridSpec {
    pub lr: Vec<f64>,
    pub layers: Vec<usize>,
    pub nodes: Vec<usize>,
    pub class: Vec<ModelClass>,
    pub activation: Vec<ActivationKind>,
    pub linmap: Vec<LinMapKind>,
    pub horizon: Vec<usize>,
    pub seed: Vec<u64>,
    /// Upper bound on the number of cells; defaults to 24.
    pub max_cells: Option<usize>,
}

pub const DEFAULT_MAX_CELLS: usize = 24;

impl GridSpec {
    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    /// Cartesian product of all axes applied to `template`.
    pub fn expand(&self, template: &ExperimentConfig) -> Result<Vec<ExperimentConfig>> {
        fn axis<T: Clone>(values: &[T], current: T) -> Vec<T> {
            if values.is_empty() {
                vec![current]
            } else {
                values.to_vec()
            }
        }
        let t = template;
        let mut out = Vec::new();
        for lr in axis(&self.lr, t.optimizer.lr) {
            for layers in axis(&self.layers, t.model.block.layers) {
                for nodes in axis(&self.nodes, t.model.block.nodes) {
                    for class in axis(&self.class, t.model.class) {
                        for act in axis(&self.activation, t.model.block.activation) {
                            for linmap in axis(&self.linmap, t.model.block.linmap) {
                                for horizon in axis(&self.horizon, t.horizon) {
                                    for seed in axis(&self.seed, t.seed) {
                                        let mut c = t.clone();
                                        c.optimizer.lr = lr;
                                        c.model.block.layers = layers;
                                        c.model.block.nodes = nodes;
                                        c.model.class = class;
                                        c.model.block.activation = act;
                                        c.model.block.linmap = linmap;
                                        c.horizon = horizon;
                                        c.seed = seed;
                                        if !class.is_structured() {
                                            c.weights.q_con_fu = 0.0;
                                        }
                                        c.name = format!("{}#{}", t.name, out.len());
                                        c.validate()?;
                                        out.push(c);
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        let limit = self.max_cells.unwrap_or(DEFAULT_MAX_CELLS);
        if out.len() > limit {
            return Err(Error::Config(format!("grid has {} cells, limit is {limit}", out.len())));
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LeaderboardEntry {
    pub rank: usize,
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub dev_open_loop_mse: f64,
    pub test_open_loop_mse: f64,
    pub dev_nstep_mse: f64,
    pub test_nstep_mse: f64,
    pub diverged: bool,
}

/// Grid cells ranked by dev open-loop error (best first).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Leaderboard {
    pub entries: Vec<LeaderboardEntry>,
}

impl Leaderboard {
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// Trains every grid cell on `data` and ranks them.
pub fn grid_search(template: &ExperimentConfig, spec: &GridSpec, data: &TrajectoryDataset) -> Result<Leaderboard> {
    let cells = spec.expand(template)?;
    let outcomes = run_parallel(cells, |cfg| {
        let split = split_and_window(data, cfg.horizon, cfg.model.n_p, cfg.stride)?;
        let entry = match train(&cfg, &split) {
            Ok(o) => LeaderboardEntry {
                rank: 0,
                config_hash: cfg.hash(),
                dev_open_loop_mse: o.result.dev_open_loop_mse,
                test_open_loop_mse: o.result.test_open_loop_mse,
                dev_nstep_mse: o.result.dev_nstep_mse,
                test_nstep_mse: o.result.test_nstep_mse,
                diverged: false,
                config: cfg,
            },
            Err(Error::TrainingDiverged { .. }) => LeaderboardEntry {
                rank: 0,
                config_hash: cfg.hash(),
                dev_open_loop_mse: DIVERGED_MSE,
                test_open_loop_mse: DIVERGED_MSE,
                dev_nstep_mse: DIVERGED_MSE,
                test_nstep_mse: DIVERGED_MSE,
                diverged: true,
                config: cfg,
            },
            Err(e) => return Err(e),
        };
        Ok(entry)
    });
    let mut entries = outcomes.into_iter().collect::<Result<Vec<_>>>()?;
    entries.sort_by(|a, b| a.dev_open_loop_mse.total_cmp(&b.dev_open_loop_mse));
    for (i, e) in entries.iter_mut().enumerate() {
        e.rank = i + 1;
    }
    Ok(Leaderboard { entries })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::systems::SystemKind;

    #[test]
    fn expansion_is_a_cartesian_product() {
        let t = ExperimentConfig::best_observed(SystemKind::Twotank);
        let spec = GridSpec { lr: vec![1e-3, 1e-4], nodes: vec![10, 20, 30], ..Default::default() };
        let cells = spec.expand(&t).unwrap();
        assert_eq!(cells.len(), 6);
        assert!(cells.iter().all(|c| c.model.block.layers == t.model.block.layers));
        assert_eq!(cells[5].optimizer.lr, 1e-4);
        assert_eq!(cells[5].model.block.nodes, 30);
    }

    #[test]
    fn oversized_grid_is_rejected() {
        let t = ExperimentConfig::best_observed(SystemKind::Twotank);
        let spec = GridSpec { seed: (0..25).collect(), ..Default::default() };
        assert!(spec.expand(&t).is_err());
    }

    #[test]
    fn unstructured_cells_drop_the_input_penalty() {
        let t = ExperimentConfig::best_observed(SystemKind::Twotank);
        let spec = GridSpec { class: vec![ModelClass::Unstructured], ..Default::default() };
        assert_eq!(spec.expand(&t).unwrap()[0].weights.q_con_fu, 0.0);
    }
}
