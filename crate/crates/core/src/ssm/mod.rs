//! Block-structured neural state space models.
//!
//! Structured classes evolve the latent state as
//! `x_{t+1} = f_x(x_t) + f_u(u_t)` and unstructured models as
//! `x_{t+1} = f_xu([x_t; u_t])`; in both cases `ŷ_{t+1} = f_y(x_{t+1})`.
//! The initial state comes from an observer over the last `N_p` outputs.

mod checkpoint;
mod eval;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointManifest, CHECKPOINT_VERSION};
pub use eval::{n_step_mse, open_loop_eval, write_trace_csv, OpenLoop};

use serde::{Deserialize, Serialize};

use crate::blocks::{Block, BlockConfig, BlockKind, BoundBlock};
use crate::diffcore::{Matrix, ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::init::Initializer;
use crate::linmaps::LinearMap;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelClass {
    Unstructured,
    BlockNonlinear,
    Hammerstein,
    HammersteinWiener,
    Wiener,
    Linear,
}

/// Which of `(f_x, f_u, f_y)` are linear.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Linearity {
    pub fx: bool,
    pub fu: bool,
    pub fy: bool,
}

impl ModelClass {
    pub const ALL: [ModelClass; 6] = [
        ModelClass::Unstructured,
        ModelClass::BlockNonlinear,
        ModelClass::Hammerstein,
        ModelClass::HammersteinWiener,
        ModelClass::Wiener,
        ModelClass::Linear,
    ];

    pub fn is_structured(self) -> bool {
        self != ModelClass::Unstructured
    }

    /// Component linearity; for unstructured models only `f_y` is linear and
    /// `fx`/`fu` describe the joint map `f_xu`.
    pub fn linearity(self) -> Linearity {
        let (fx, fu, fy) = match self {
            ModelClass::Unstructured => (false, false, true),
            ModelClass::BlockNonlinear => (false, false, true),
            ModelClass::Hammerstein => (true, false, true),
            ModelClass::HammersteinWiener => (true, false, false),
            ModelClass::Wiener => (true, true, false),
            ModelClass::Linear => (true, true, true),
        };
        Linearity { fx, fu, fy }
    }
}

/// Model architecture.
///
/// `block` configures every nonlinear dynamics component; its linear-map
/// kind and bounds are the map prior used by all dynamics maps, including the
/// linear components. The observer has its own configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub class: ModelClass,
    pub n_u: usize,
    pub n_y: usize,
    /// Latent state dimension; defaults to `n_y`.
    #[serde(default)]
    pub n_x: Option<usize>,
    /// Observer lookback `N_p`.
    pub n_p: usize,
    pub block: BlockConfig,
    pub observer: BlockConfig,
}

impl ModelConfig {
    pub fn state_dim(&self) -> usize {
        self.n_x.unwrap_or(self.n_y)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_u == 0 || self.n_y == 0 || self.state_dim() == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if self.n_p == 0 {
            return Err(Error::Config("observer lookback n_p must be >= 1".into()));
        }
        self.block.validate()?;
        self.observer.validate()
    }
}

#[derive(Clone, Debug)]
enum Dynamics {
    Structured { fx: Block, fu: Block },
    Joint { fxu: Block },
}

/// A neural state space model together with its parameters.
#[derive(Clone, Debug)]
pub struct BlockSsm {
    config: ModelConfig,
    params: ParamStore,
    dynamics: Dynamics,
    fy: Block,
    observer: Block,
}

fn component(nonlinear: bool, cfg: &BlockConfig) -> BlockConfig {
    if nonlinear {
        cfg.clone()
    } else {
        BlockConfig::linear(cfg.linmap, cfg.bounds)
    }
}

impl BlockSsm {
    /// Builds a model with freshly initialized parameters.
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut init = Initializer::new(seed);
        let (n_x, n_u, n_y) = (config.state_dim(), config.n_u, config.n_y);
        let lin = config.class.linearity();

        let observer_in = if config.observer.kind == BlockKind::Rnn { n_y } else { config.n_p * n_y };
        let observer = Block::new("fo", &config.observer, observer_in, n_x, true, &mut params, &mut init)?;

        let dynamics = if config.class.is_structured() {
            let fx_cfg = component(!lin.fx, &config.block);
            // Linear f_x stays bias-free so its spectrum describes the dynamics.
            let fx = Block::new("fx", &fx_cfg, n_x, n_x, !lin.fx, &mut params, &mut init)?;
            let fu_cfg = component(!lin.fu, &config.block);
            let fu = Block::new("fu", &fu_cfg, n_u, n_x, true, &mut params, &mut init)?;
            Dynamics::Structured { fx, fu }
        } else {
            let fxu = Block::new("fxu", &config.block, n_x + n_u, n_x, true, &mut params, &mut init)?;
            Dynamics::Joint { fxu }
        };
        let fy_cfg = component(!lin.fy, &config.block);
        let fy = Block::new("fy", &fy_cfg, n_x, n_y, !lin.fy, &mut params, &mut init)?;
        Ok(Self { config: config.clone(), params, dynamics, fy, observer })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn class(&self) -> ModelClass {
        self.config.class
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn fx(&self) -> Option<&Block> {
        match &self.dynamics {
            Dynamics::Structured { fx, .. } => Some(fx),
            Dynamics::Joint { .. } => None,
        }
    }

    pub fn fu(&self) -> Option<&Block> {
        match &self.dynamics {
            Dynamics::Structured { fu, .. } => Some(fu),
            Dynamics::Joint { .. } => None,
        }
    }

    pub fn fxu(&self) -> Option<&Block> {
        match &self.dynamics {
            Dynamics::Joint { fxu } => Some(fxu),
            Dynamics::Structured { .. } => None,
        }
    }

    pub fn fy(&self) -> &Block {
        &self.fy
    }

    pub fn observer(&self) -> &Block {
        &self.observer
    }

    fn blocks(&self) -> Vec<&Block> {
        let mut out = vec![&self.observer];
        match &self.dynamics {
            Dynamics::Structured { fx, fu } => out.extend([fx, fu]),
            Dynamics::Joint { fxu } => out.push(fxu),
        }
        out.push(&self.fy);
        out
    }

    /// Linear maps of the state-transition component (`f_x`, or `f_xu`).
    pub fn state_transition_maps(&self) -> Vec<&LinearMap> {
        match &self.dynamics {
            Dynamics::Structured { fx, .. } => fx.maps(),
            Dynamics::Joint { fxu } => fxu.maps(),
        }
    }

    /// BLU slopes to be projected back into `[-1, 1]` after each update.
    pub fn beta_params(&self) -> Vec<ParamId> {
        self.blocks().iter().flat_map(|b| b.beta_params()).collect()
    }

    pub fn uses_soft_svd(&self) -> bool {
        self.blocks().iter().flat_map(|b| b.maps()).any(|m| m.kind() == crate::linmaps::LinMapKind::SoftSvd)
    }

    /// Sum of soft SVD orthogonality penalties, if any map uses soft SVD.
    pub fn reg_penalty(&self, tape: &mut Tape) -> Result<Option<Var>> {
        let mut terms = Vec::new();
        for b in self.blocks() {
            terms.extend(b.reg_penalties(tape, &self.params)?);
        }
        if terms.is_empty() {
            Ok(None)
        } else {
            tape.add_all(&terms).map(Some)
        }
    }

    /// Records all effective weights on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> Result<BoundSsm> {
        let p = &self.params;
        let dynamics = match &self.dynamics {
            Dynamics::Structured { fx, fu } => {
                BoundDynamics::Structured { fx: fx.bind(tape, p)?, fu: fu.bind(tape, p)? }
            }
            Dynamics::Joint { fxu } => BoundDynamics::Joint { fxu: fxu.bind(tape, p)? },
        };
        Ok(BoundSsm {
            n_x: self.config.state_dim(),
            n_u: self.config.n_u,
            n_y: self.config.n_y,
            n_p: self.config.n_p,
            observer_is_rnn: self.observer.kind() == BlockKind::Rnn,
            observer: self.observer.bind(tape, p)?,
            dynamics,
            fy: self.fy.bind(tape, p)?,
        })
    }

    /// Value-level rollout for a batch: `history` holds `N_p` matrices of
    /// shape `B × n_y` (oldest first), `inputs` holds `N` matrices `B × n_u`.
    pub fn simulate(&self, history: &[Matrix], inputs: &[Matrix]) -> Result<RolloutValues> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape)?;
        let h = history.iter().map(|m| tape.constant(m.clone())).collect::<Result<Vec<_>>>()?;
        let u = inputs.iter().map(|m| tape.constant(m.clone())).collect::<Result<Vec<_>>>()?;
        let r = bound.rollout(&mut tape, &h, &u)?;
        let grab = |vs: &[Var]| vs.iter().map(|&v| tape.value(v).clone()).collect::<Vec<_>>();
        Ok(RolloutValues {
            x0: tape.value(r.x0).clone(),
            states: grab(&r.states),
            predictions: grab(&r.predictions),
            fu_contributions: grab(&r.fu_contributions),
        })
    }
}

#[derive(Clone, Debug)]
enum BoundDynamics {
    Structured { fx: BoundBlock, fu: BoundBlock },
    Joint { fxu: BoundBlock },
}

/// A model bound to a tape.
#[derive(Clone, Debug)]
pub struct BoundSsm {
    n_x: usize,
    n_u: usize,
    n_y: usize,
    n_p: usize,
    observer_is_rnn: bool,
    observer: BoundBlock,
    dynamics: BoundDynamics,
    fy: BoundBlock,
}

/// Tape nodes produced by a rollout; every list has length `N`.
#[derive(Clone, Debug)]
pub struct Rollout {
    pub x0: Var,
    pub states: Vec<Var>,
    pub predictions: Vec<Var>,
    /// `f_u(u_t)` per step; empty for unstructured models.
    pub fu_contributions: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct RolloutValues {
    pub x0: Matrix,
    pub states: Vec<Matrix>,
    pub predictions: Vec<Matrix>,
    pub fu_contributions: Vec<Matrix>,
}

/// One state update.
#[derive(Clone, Copy, Debug)]
pub struct Step {
    pub state: Var,
    pub prediction: Var,
    pub fu: Option<Var>,
}

impl BoundSsm {
    /// `x_0 = f_o([y_{1−N_p}; …; y_0])`.
    pub fn observe(&self, tape: &mut Tape, history: &[Var]) -> Result<Var> {
        if history.len() != self.n_p {
            return Err(Error::Shape(format!("observer expects {} past outputs, got {}", self.n_p, history.len())));
        }
        for &h in history {
            if tape.shape(h).1 != self.n_y {
                return Err(Error::Shape(format!("history entries must have {} columns", self.n_y)));
            }
        }
        if self.observer_is_rnn {
            let outs = self.observer.forward_sequence(tape, history)?;
            Ok(*outs.last().expect("non-empty history"))
        } else {
            let stacked = if history.len() == 1 { history[0] } else { tape.concat_cols(history)? };
            self.observer.forward(tape, stacked)
        }
    }

    pub fn step(&self, tape: &mut Tape, x: Var, u: Var) -> Result<Step> {
        if tape.shape(x).1 != self.n_x || tape.shape(u).1 != self.n_u {
            return Err(Error::Shape(format!(
                "step expects state width {} and input width {}, got {} and {}",
                self.n_x,
                self.n_u,
                tape.shape(x).1,
                tape.shape(u).1
            )));
        }
        let (state, fu) = match &self.dynamics {
            BoundDynamics::Structured { fx, fu } => {
                let a = fx.forward(tape, x)?;
                let b = fu.forward(tape, u)?;
                (tape.add(a, b)?, Some(b))
            }
            BoundDynamics::Joint { fxu } => {
                let xu = tape.concat_cols(&[x, u])?;
                (fxu.forward(tape, xu)?, None)
            }
        };
        let prediction = self.fy.forward(tape, state)?;
        Ok(Step { state, prediction, fu })
    }

    pub fn rollout(&self, tape: &mut Tape, history: &[Var], inputs: &[Var]) -> Result<Rollout> {
        if inputs.is_empty() {
            return Err(Error::Shape("rollout needs at least one input step".into()));
        }
        let x0 = self.observe(tape, history)?;
        let mut x = x0;
        let n = inputs.len();
        let mut out = Rollout {
            x0,
            states: Vec::with_capacity(n),
            predictions: Vec::with_capacity(n),
            fu_contributions: Vec::new(),
        };
        for &u in inputs {
            let s = self.step(tape, x, u)?;
            x = s.state;
            out.states.push(s.state);
            out.predictions.push(s.prediction);
            out.fu_contributions.extend(s.fu);
        }
        Ok(out)
    }
}
