//! Experiment orchestration: training runs, ablations, grid search and
//! artifact export.

mod ablation;
mod config;
mod eigen;
mod grid;
mod train;

pub use ablation::{run_ablation, AblationCell, AblationPlan, AblationRow, AblationTable};
pub use config::{load_source, BoundsPolicy, DataSource, ExperimentConfig};
pub use eigen::{export_eigenvalues, EigenRecord};
pub use grid::{grid_search, GridSpec, Leaderboard, LeaderboardEntry};
pub use train::{batch_objective, train, write_loss_log, DevRecord, LossRecord, RunResult, TrainOutcome, DIVERGED_MSE};

/// Environment variable capping the number of parallel training runs.
pub const WORKERS_ENV: &str = "BLOCKSSM_WORKERS";

/// Worker count from [`WORKERS_ENV`], defaulting to the available cores.
pub fn worker_count() -> usize {
    std::env::var(WORKERS_ENV)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Runs `jobs` on a dedicated pool of [`worker_count`] threads, keeping order.
pub(crate) fn run_parallel<T, R, F>(jobs: Vec<T>, f: F) -> Vec<R>
where
    T: Send,
    R: Send,
    F: Fn(T) -> R + Sync + Send,
{
    use rayon::prelude::*;
    let pool = rayon::ThreadPoolBuilder::new().num_threads(worker_count()).build().expect("thread pool");
    pool.install(|| jobs.into_par_iter().map(&f).collect())
}
