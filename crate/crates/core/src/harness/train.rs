use std::io::Write;
use std::time::Instant;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::eigen::{export_eigenvalues, EigenRecord};
use crate::diffcore::{Tape, Var};
use crate::error::{Error, Result};
use crate::objective::{con_fu, con_y, loss_dx, loss_y, total_loss, AdamW, Bounds, LossReport, LossTerms, LossWeights};
use crate::ssm::{n_step_mse, open_loop_eval, BlockSsm};
use crate::systems::{SplitData, WindowBatch};

/// Reported in place of an open-loop error whose simulation left the
/// representable range.
pub const DIVERGED_MSE: f64 = 1e6;

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    #[serde(flatten)]
    pub report: LossReport,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DevRecord {
    pub step: usize,
    pub open_loop_mse: f64,
}

/// Metrics of the dev-selected checkpoint plus the run's traces.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub name: String,
    pub config_hash: String,
    pub seed: u64,
    pub best_step: usize,
    pub steps_run: usize,
    pub dev_nstep_mse: f64,
    pub test_nstep_mse: f64,
    pub dev_open_loop_mse: f64,
    pub test_open_loop_mse: f64,
    pub loss_curve: Vec<LossRecord>,
    pub dev_curve: Vec<DevRecord>,
    pub eigenvalues: Vec<EigenRecord>,
    pub wall_time_s: f64,
}

pub struct TrainOutcome {
    pub result: RunResult,
    /// Model holding the dev-selected parameters.
    pub model: BlockSsm,
    pub bounds: Bounds,
}

/// Builds the weighted objective for one batch of windows on `tape`.
pub fn batch_objective(
    tape: &mut Tape,
    model: &BlockSsm,
    batch: &WindowBatch,
    weights: &LossWeights,
    bounds: &Bounds,
) -> Result<(Var, LossReport)> {
    let bound = model.bind(tape)?;
    let hist = batch.histories.iter().map(|m| tape.constant(m.clone())).collect::<Result<Vec<_>>>()?;
    let inputs = batch.inputs.iter().map(|m| tape.constant(m.clone())).collect::<Result<Vec<_>>>()?;
    let targets = batch.targets.iter().map(|m| tape.constant(m.clone())).collect::<Result<Vec<_>>>()?;
    let r = bound.rollout(tape, &hist, &inputs)?;

    let terms = LossTerms {
        l_y: loss_y(tape, &r.predictions, &targets)?,
        l_reg: model.reg_penalty(tape)?,
        l_dx: if r.states.len() < 2 { None } else { Some(loss_dx(tape, &r.states)?) },
        l_con_y: Some(con_y(tape, &r.predictions, bounds)?),
        l_con_fu: if r.fu_contributions.is_empty() { None } else { Some(con_fu(tape, &r.fu_contributions, bounds)?) },
    };
    total_loss(tape, &terms, weights)
}

/// Open-loop dev error, saturating at [`DIVERGED_MSE`].
fn open_loop_or_diverged(model: &BlockSsm, data: &crate::systems::TrajectoryDataset) -> Result<f64> {
    match open_loop_eval(model, data) {
        Ok(r) if r.mse.is_finite() => Ok(r.mse.min(DIVERGED_MSE)),
        Ok(_) | Err(Error::NonFinite(_)) => Ok(DIVERGED_MSE),
        Err(e) => Err(e),
    }
}

fn diverged(step: usize, reason: impl Into<String>) -> Error {
    Error::TrainingDiverged { step, reason: reason.into() }
}

/// Trains one model and evaluates the dev-selected checkpoint.
pub fn train(config: &ExperimentConfig, data: &SplitData) -> Result<TrainOutcome> {
    config.validate()?;
    if data.train_windows.horizon() != config.horizon || data.train_windows.lookback() != config.model.n_p {
        return Err(Error::Config("data was windowed with a different horizon or lookback".into()));
    }
    let started = Instant::now();
    let mut model = BlockSsm::new(&config.model, config.seed)?;
    let bounds = config.bounds.resolve(data, config.model.state_dim())?;
    let mut opt = AdamW::new(config.optimizer, model.params());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_ba7c);
    let n_windows = data.train_windows.len();

    let mut best_mse = open_loop_or_diverged(&model, &data.dev)?;
    let mut best_params = model.params().flatten();
    let mut best_step = 0;
    let mut dev_curve = vec![DevRecord { step: 0, open_loop_mse: best_mse }];
    let mut loss_curve = Vec::new();

    for step in 1..=config.max_steps {
        let picked;
        let batch = match config.batch_size {
            Some(b) if b < n_windows => {
                let mut rows = sample(&mut rng, n_windows, b).into_vec();
                rows.sort_unstable();
                picked = data.train_windows.select(&rows);
                &picked
            }
            _ => &data.train_windows,
        };

        let mut tape = Tape::new();
        let (total, report) = match batch_objective(&mut tape, &model, batch, &config.weights, &bounds) {
            Ok(v) => v,
            Err(Error::NonFinite(what)) => return Err(diverged(step, format!("non-finite {what}"))),
            Err(e) => return Err(e),
        };
        if !report.total.is_finite() || report.total > config.divergence_threshold {
            return Err(diverged(step, format!("loss {}", report.total)));
        }
        model.params_mut().zero_grad();
        match tape.backward(total, model.params_mut()) {
            Ok(()) => {}
            Err(Error::NonFinite(what)) => return Err(diverged(step, format!("non-finite gradient in {what}"))),
            Err(e) => return Err(e),
        }
        match opt.step(model.params_mut()) {
            Ok(()) => {}
            Err(Error::NonFiniteGradient(name)) => {
                return Err(diverged(step, format!("non-finite gradient for {name}")))
            }
            Err(e) => return Err(e),
        }
        model.params_mut().project();

        if step % config.eval_every == 0 || step == config.max_steps {
            loss_curve.push(LossRecord { step, report });
            let mse = open_loop_or_diverged(&model, &data.dev)?;
            dev_curve.push(DevRecord { step, open_loop_mse: mse });
            if mse < best_mse {
                best_mse = mse;
                best_params = model.params().flatten();
                best_step = step;
            }
        }
    }

    model.params_mut().load_flat(&best_params)?;
    let saturate = |r: Result<f64>| match r {
        Ok(v) if v.is_finite() => Ok(v.min(DIVERGED_MSE)),
        Ok(_) | Err(Error::NonFinite(_)) => Ok(DIVERGED_MSE),
        Err(e) => Err(e),
    };
    let result = RunResult {
        name: config.name.clone(),
        config_hash: config.hash(),
        seed: config.seed,
        best_step,
        steps_run: config.max_steps,
        dev_nstep_mse: saturate(n_step_mse(&model, &data.dev_windows))?,
        test_nstep_mse: saturate(n_step_mse(&model, &data.test_windows))?,
        dev_open_loop_mse: best_mse,
        test_open_loop_mse: open_loop_or_diverged(&model, &data.test)?,
        loss_curve,
        dev_curve,
        eigenvalues: export_eigenvalues(&model)?,
        wall_time_s: started.elapsed().as_secs_f64(),
    };
    Ok(TrainOutcome { result, model, bounds })
}

/// Writes the loss curve as JSON lines.
pub fn write_loss_log<W: Write>(mut out: W, records: &[LossRecord]) -> Result<()> {
    for r in records {
        writeln!(out, "{}", serde_json::to_string(r)?)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocks::{ActivationKind, BlockConfig, BlockKind};
    use crate::harness::config::DataSource;
    use crate::systems::{split_and_window, SystemKind};

    fn tiny(seed: u64) -> (ExperimentConfig, SplitData) {
        let mut cfg = ExperimentConfig::best_observed(SystemKind::Twotank);
        cfg.model.block = BlockConfig::new(BlockKind::ResMlp, 1, 8, ActivationKind::Gelu);
        cfg.model.observer = BlockConfig::new(BlockKind::Mlp, 1, 8, ActivationKind::Gelu);
        cfg.horizon = 8;
        cfg.max_steps = 30;
        cfg.eval_every = 10;
        cfg.batch_size = Some(16);
        cfg.optimizer.lr = 3e-3;
        cfg.seed = seed;
        cfg.data = Some(DataSource::Simulated { seed: 2, steps: 600 });
        let data = split_and_window(&cfg.load_data().unwrap(), cfg.horizon, cfg.model.n_p, 1).unwrap();
        (cfg, data)
    }

    #[test]
    fn training_is_deterministic() {
        let (cfg, data) = tiny(5);
        let a = train(&cfg, &data).unwrap().result;
        let b = train(&cfg, &data).unwrap().result;
        assert_eq!(a.test_open_loop_mse, b.test_open_loop_mse);
        assert_eq!(a.loss_curve, b.loss_curve);
        assert_eq!(a.dev_curve.len(), 4);
    }

    #[test]
    fn selected_checkpoint_is_the_dev_minimum() {
        let (cfg, data) = tiny(1);
        let r = train(&cfg, &data).unwrap().result;
        let min = r.dev_curve.iter().map(|d| d.open_loop_mse).fold(f64::INFINITY, f64::min);
        assert_eq!(r.dev_open_loop_mse, min);
    }

    #[test]
    fn huge_learning_rate_is_reported_as_divergence() {
        let (mut cfg, data) = tiny(3);
        cfg.optimizer.lr = 1e6;
        cfg.divergence_threshold = 10.0;
        match train(&cfg, &data) {
            Err(Error::TrainingDiverged { step, .. }) => assert!(step >= 1),
            other => panic!("expected divergence, got {:?}", other.map(|o| o.result.test_open_loop_mse)),
        }
    }
}
