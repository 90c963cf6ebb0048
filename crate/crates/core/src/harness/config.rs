use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::blocks::{ActivationKind, BlockConfig, BlockKind};
use crate::error::{Error, Result};
use crate::linmaps::{LinMapKind, SpectralBounds};
use crate::objective::{AdamWConfig, Bounds, LossWeights};
use crate::ssm::{ModelClass, ModelConfig};
use crate::systems::{
    generate_cstr, generate_twotank, load_aero, read_dataset, CstrParams, SimulationSpec, SplitData, SystemKind,
    TrajectoryDataset, TwoTankParams,
};

/// How output and input-influence bounds are chosen.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "snake_case")]
pub enum BoundsPolicy {
    /// Output bounds from the training split's per-channel min/max, widened
    /// by `margin` of the range on each side; `f_u` bounds `±fu_limit`.
    Observed {
        #[serde(default = "default_margin")]
        margin: f64,
        #[serde(default = "default_fu_limit")]
        fu_limit: f64,
    },
    Explicit(Bounds),
}

fn default_margin() -> f64 {
    0.05
}
fn default_fu_limit() -> f64 {
    1.0
}

impl Default for BoundsPolicy {
    fn default() -> Self {
        BoundsPolicy::Observed { margin: default_margin(), fu_limit: default_fu_limit() }
    }
}

impl BoundsPolicy {
    pub fn resolve(&self, data: &SplitData, n_x: usize) -> Result<Bounds> {
        let bounds = match self {
            BoundsPolicy::Explicit(b) => b.clone(),
            BoundsPolicy::Observed { margin, fu_limit } => {
                let y = &data.train.y;
                let mut y_lower = vec![f64::INFINITY; y.cols()];
                let mut y_upper = vec![f64::NEG_INFINITY; y.cols()];
                for r in 0..y.rows() {
                    for (c, v) in y.row_slice(r).iter().enumerate() {
                        y_lower[c] = y_lower[c].min(*v);
                        y_upper[c] = y_upper[c].max(*v);
                    }
                }
                for (lo, hi) in y_lower.iter_mut().zip(y_upper.iter_mut()) {
                    let span = (*hi - *lo).max(1e-12);
                    *lo -= margin * span;
                    *hi += margin * span;
                }
                Bounds { y_lower, y_upper, fu_lower: vec![-fu_limit; n_x], fu_upper: vec![*fu_limit; n_x] }
            }
        };
        bounds.validate()?;
        Ok(bounds)
    }
}

/// Where a run's trajectory data comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DataSource {
    /// Emulate the configured system with default excitation.
    Simulated {
        seed: u64,
        steps: usize,
    },
    File {
        path: PathBuf,
    },
}

/// Everything that defines one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    #[serde(default = "default_name")]
    pub name: String,
    pub system: SystemKind,
    pub model: ModelConfig,
    pub weights: LossWeights,
    #[serde(default)]
    pub bounds: BoundsPolicy,
    pub optimizer: AdamWConfig,
    /// Prediction horizon `N`.
    pub horizon: usize,
    /// Window stride in samples.
    #[serde(default = "default_stride")]
    pub stride: usize,
    pub seed: u64,
    pub max_steps: usize,
    /// Windows per gradient step; `None` uses every training window.
    #[serde(default)]
    pub batch_size: Option<usize>,
    /// Dev open-loop evaluation (checkpoint selection) period, in steps.
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
    #[serde(default = "default_divergence")]
    pub divergence_threshold: f64,
    #[serde(default)]
    pub data: Option<DataSource>,
}

fn default_name() -> String {
    "run".into()
}
fn default_stride() -> usize {
    1
}
fn default_eval_every() -> usize {
    100
}
fn default_divergence() -> f64 {
    1e6
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.weights.validate()?;
        if self.horizon == 0 || self.stride == 0 || self.eval_every == 0 {
            return Err(Error::Config("horizon, stride and eval_every must be positive".into()));
        }
        if !(self.optimizer.lr > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if self.batch_size == Some(0) {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.weights.q_con_fu > 0.0 && !self.model.class.is_structured() {
            return Err(Error::Config("input-influence weight set for an unstructured model".into()));
        }
        Ok(())
    }

    /// Short stable digest of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(&Sha256::digest(json.as_bytes())[..8])
    }

    pub fn load(path: &Path) -> Result<Self> {
        let cfg: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    /// Best-observed configuration for each system (layers, nodes, maps,
    /// activation, learning rate, loss weights, bounds, horizons).
    pub fn best_observed(system: SystemKind) -> Self {
        let (class, observer, linmap, bounds, layers, nodes, act, lr, weights, horizon, n_p, n_u, n_y) = match system {
            SystemKind::Cstr => (
                ModelClass::BlockNonlinear,
                BlockKind::Rnn,
                LinMapKind::Dense,
                None,
                6,
                60,
                ActivationKind::Gelu,
                1e-4,
                LossWeights { q_y: 0.5, q_reg: 0.0, q_dx: 0.2, q_con_y: 0.2, q_con_fu: 0.1 },
                64,
                1,
                1,
                2,
            ),
            SystemKind::Twotank => (
                ModelClass::Hammerstein,
                BlockKind::ResMlp,
                LinMapKind::Dense,
                None,
                3,
                40,
                ActivationKind::Gelu,
                3e-4,
                LossWeights { q_y: 0.5, q_reg: 0.0, q_dx: 0.3, q_con_y: 0.3, q_con_fu: 0.1 },
                64,
                4,
                2,
                2,
            ),
            SystemKind::Aero => (
                ModelClass::Unstructured,
                BlockKind::Rnn,
                LinMapKind::Spectral,
                Some(SpectralBounds { lambda_min: 0.4, lambda_max: 0.7 }),
                2,
                25,
                ActivationKind::Blu,
                0.01,
                LossWeights { q_y: 0.5, q_reg: 0.0, q_dx: 0.2, q_con_y: 0.2, q_con_fu: 0.0 },
                16,
                2,
                10,
                5,
            ),
        };
        let block = BlockConfig::new(BlockKind::ResMlp, layers, nodes, act).with_linmap(linmap, bounds);
        let observer = BlockConfig::new(observer, layers, nodes, act);
        Self {
            name: format!("{system:?}").to_lowercase(),
            system,
            model: ModelConfig { class, n_u, n_y, n_x: None, n_p, block, observer },
            weights,
            bounds: BoundsPolicy::default(),
            optimizer: AdamWConfig::new(lr),
            horizon,
            stride: 1,
            seed: 0,
            max_steps: 10_000,
            batch_size: None,
            eval_every: default_eval_every(),
            divergence_threshold: default_divergence(),
            data: None,
        }
    }

    /// Loads or simulates the configured data source.
    pub fn load_data(&self) -> Result<TrajectoryDataset> {
        let source = self.data.as_ref().ok_or_else(|| Error::Config("configuration has no data source".into()))?;
        load_source(self.system, source)
    }
}

pub fn load_source(system: SystemKind, source: &DataSource) -> Result<TrajectoryDataset> {
    match (source, system) {
        (DataSource::File { path }, SystemKind::Aero) => load_aero(path),
        (DataSource::File { path }, _) => read_dataset(path, None, None, None),
        (DataSource::Simulated { seed, steps }, SystemKind::Cstr) => {
            generate_cstr(&CstrParams::default(), &SimulationSpec::cstr_default(*steps), *seed)
        }
        (DataSource::Simulated { seed, steps }, SystemKind::Twotank) => {
            generate_twotank(&TwoTankParams::default(), &SimulationSpec::twotank_default(*steps), *seed)
        }
        (DataSource::Simulated { .. }, SystemKind::Aero) => {
            Err(Error::Config("aerodynamic body data cannot be simulated; use a file source".into()))
        }
    }
}
