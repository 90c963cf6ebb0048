use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::run_parallel;
use super::train::{train, RunResult, DIVERGED_MSE};
use crate::blocks::BlockConfig;
use crate::error::{Error, Result};
use crate::linmaps::LinMapKind;
use crate::ssm::ModelClass;
use crate::systems::SplitData;

/// One column of the ablation table.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationCell {
    /// The base configuration unchanged.
    All,
    NoConY,
    NoDx,
    NoConFu,
    /// Every constrained linear map replaced by a dense one.
    NoLinmapPrior,
    /// All penalty terms off, block structure kept.
    NoConstraints,
    /// Unstructured model with all penalty terms off.
    NoStructureNoConstraints,
}

impl AblationCell {
    pub const ALL: [AblationCell; 7] = [
        AblationCell::All,
        AblationCell::NoConY,
        AblationCell::NoDx,
        AblationCell::NoConFu,
        AblationCell::NoLinmapPrior,
        AblationCell::NoConstraints,
        AblationCell::NoStructureNoConstraints,
    ];

    pub fn label(self) -> &'static str {
        match self {
            AblationCell::All => "All",
            AblationCell::NoConY => "-Q_con_y",
            AblationCell::NoDx => "-Q_dx",
            AblationCell::NoConFu => "-Q_con_fu",
            AblationCell::NoLinmapPrior => "-linmap prior",
            AblationCell::NoConstraints => "-All constraints",
            AblationCell::NoStructureNoConstraints => "-All*",
        }
    }

    /// The configuration this cell trains, derived from `base`.
    pub fn apply(self, base: &ExperimentConfig) -> ExperimentConfig {
        let mut cfg = base.clone();
        let w = &mut cfg.weights;
        match self {
            AblationCell::All => {}
            AblationCell::NoConY => w.q_con_y = 0.0,
            AblationCell::NoDx => w.q_dx = 0.0,
            AblationCell::NoConFu => w.q_con_fu = 0.0,
            AblationCell::NoLinmapPrior => {
                strip_prior(&mut cfg.model.block);
                strip_prior(&mut cfg.model.observer);
                cfg.weights.q_reg = 0.0;
            }
            AblationCell::NoConstraints => {
                w.q_con_y = 0.0;
                w.q_dx = 0.0;
                w.q_con_fu = 0.0;
            }
            AblationCell::NoStructureNoConstraints => {
                w.q_con_y = 0.0;
                w.q_dx = 0.0;
                w.q_con_fu = 0.0;
                cfg.model.class = ModelClass::Unstructured;
            }
        }
        cfg.name = format!("{}/{}", base.name, self.label());
        cfg
    }
}

fn strip_prior(b: &mut BlockConfig) {
    b.linmap = LinMapKind::Dense;
    b.bounds = None;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationPlan {
    pub base: ExperimentConfig,
    #[serde(default = "all_cells")]
    pub cells: Vec<AblationCell>,
    pub seeds: Vec<u64>,
}

fn all_cells() -> Vec<AblationCell> {
    AblationCell::ALL.to_vec()
}

impl AblationPlan {
    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub cell: AblationCell,
    pub label: String,
    /// Hash of the cell configuration with the first seed.
    pub config_hash: String,
    /// Test open-loop MSE per seed, in plan order.
    pub test_open_loop: Vec<f64>,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    pub min: f64,
    pub max: f64,
    /// Seeds whose training diverged; they count as [`DIVERGED_MSE`].
    pub diverged: usize,
    /// Keys into [`AblationTable::runs`], one per seed.
    pub run_keys: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub base_hash: String,
    pub rows: Vec<AblationRow>,
    /// Results of every run that finished, keyed by seed-specific config hash.
    pub runs: BTreeMap<String, RunResult>,
}

impl AblationTable {
    pub fn row(&self, cell: AblationCell) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.cell == cell)
    }

    /// Finished runs of one cell, in seed order.
    pub fn cell_runs(&self, cell: AblationCell) -> Vec<&RunResult> {
        self.row(cell).map_or_else(Vec::new, |r| r.run_keys.iter().filter_map(|k| self.runs.get(k)).collect())
    }
}

/// Linear-interpolated quantile of sorted values.
pub(crate) fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Trains every (cell, seed) pair on `data` and summarizes test open-loop
/// error per cell. Cells that reduce to the same configuration (for example
/// removing a prior the base does not use) share their runs.
pub fn run_ablation(plan: &AblationPlan, data: &SplitData) -> Result<AblationTable> {
    if plan.seeds.is_empty() || plan.cells.is_empty() {
        return Err(Error::Config("ablation needs at least one cell and one seed".into()));
    }
    plan.base.validate()?;
    let mut unique: BTreeMap<String, ExperimentConfig> = BTreeMap::new();
    let mut layout = Vec::new();
    for &cell in &plan.cells {
        let mut keys = Vec::new();
        for &seed in &plan.seeds {
            let mut cfg = cell.apply(&plan.base);
            cfg.seed = seed;
            let mut keyed = cfg.clone();
            keyed.name.clear();
            let key = keyed.hash();
            unique.entry(key.clone()).or_insert(cfg);
            keys.push(key);
        }
        layout.push((cell, keys));
    }

    let jobs: Vec<(String, ExperimentConfig)> = unique.into_iter().collect();
    let outcomes = run_parallel(jobs, |(key, cfg)| {
        let r = match train(&cfg, data) {
            Ok(o) => Ok(Some(o.result)),
            Err(Error::TrainingDiverged { .. }) => Ok(None),
            Err(e) => Err(e),
        };
        (key, r)
    });
    let mut results = BTreeMap::new();
    let mut runs = BTreeMap::new();
    for (key, r) in outcomes {
        match r? {
            Some(run) => {
                results.insert(key.clone(), (run.test_open_loop_mse, false));
                runs.insert(key, run);
            }
            None => {
                results.insert(key, (DIVERGED_MSE, true));
            }
        }
    }

    let rows = layout
        .into_iter()
        .map(|(cell, keys)| {
            let vals: Vec<(f64, bool)> = keys.iter().map(|k| results[k]).collect();
            let test: Vec<f64> = vals.iter().map(|v| v.0).collect();
            let mut sorted = test.clone();
            sorted.sort_by(f64::total_cmp);
            let mut first = cell.apply(&plan.base);
            first.seed = plan.seeds[0];
            AblationRow {
                cell,
                label: cell.label().to_string(),
                config_hash: first.hash(),
                median: quantile(&sorted, 0.5),
                q1: quantile(&sorted, 0.25),
                q3: quantile(&sorted, 0.75),
                min: sorted[0],
                max: sorted[sorted.len() - 1],
                diverged: vals.iter().filter(|v| v.1).count(),
                test_open_loop: test,
                run_keys: keys,
            }
        })
        .collect();
    Ok(AblationTable { base_hash: plan.base.hash(), rows, runs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::systems::SystemKind;

    #[test]
    fn cells_change_only_their_knobs() {
        let base = ExperimentConfig::best_observed(SystemKind::Twotank);
        let c = AblationCell::NoDx.apply(&base);
        assert_eq!(c.weights.q_dx, 0.0);
        assert_eq!(c.weights.q_con_y, base.weights.q_con_y);
        let s = AblationCell::NoStructureNoConstraints.apply(&base);
        assert_eq!(s.model.class, ModelClass::Unstructured);
        assert_eq!(s.weights.q_con_fu, 0.0);
        s.validate().unwrap();
    }

    #[test]
    fn dense_base_makes_prior_removal_a_no_op() {
        let base = ExperimentConfig::best_observed(SystemKind::Twotank);
        let mut a = AblationCell::All.apply(&base);
        let mut b = AblationCell::NoLinmapPrior.apply(&base);
        a.name.clear();
        b.name.clear();
        assert_eq!(a.hash(), b.hash());
    }

    #[test]
    fn quantiles_interpolate() {
        let v = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile(&v, 0.5), 2.5);
        assert_eq!(quantile(&v, 0.0), 1.0);
        assert_eq!(quantile(&v, 1.0), 4.0);
    }
}
