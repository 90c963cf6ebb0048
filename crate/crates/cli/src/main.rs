use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use blockssm::harness::{
    export_eigenvalues, grid_search, load_source, run_ablation, train, write_loss_log, AblationPlan, DataSource,
    ExperimentConfig, GridSpec,
};
use blockssm::linmaps::write_eigen_csv;
use blockssm::ssm::{load_checkpoint, n_step_mse, open_loop_eval, save_checkpoint, write_trace_csv, BlockSsm};
use blockssm::systems::{
    generate_cstr, generate_twotank, read_dataset, split_and_window, windows, write_dataset, CstrParams,
    NormalizationStats, SimulationSpec, TrajectoryDataset, TwoTankParams,
};

#[derive(Parser)]
#[command(name = "blockssm", version, about = "Block-structured neural state space models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Emulator {
    Cstr,
    Twotank,
}

#[derive(Subcommand)]
enum Command {
    /// Excite an emulated system with random steps and write the trajectory.
    Simulate {
        #[arg(long, value_enum)]
        system: Emulator,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Number of samples.
        #[arg(long = "steps", short = 'T', default_value_t = 10_000)]
        steps: usize,
        /// Sampling interval; defaults to the system's own.
        #[arg(long)]
        dt: Option<f64>,
        /// Round the two-tank valve input to 0 or 1.
        #[arg(long)]
        binary_valve: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model and write its checkpoint, logs and traces.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Dataset file; overrides the configuration's data source.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Score a checkpoint on a dataset (dev and test thirds).
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Normalization statistics; defaults to `stats.json` beside the
        /// checkpoint, else they are refitted on the first third.
        #[arg(long)]
        stats: Option<PathBuf>,
        /// Also report N-step MSE for this horizon.
        #[arg(long)]
        horizon: Option<usize>,
        /// Write the test-split open-loop trace as CSV.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Run an ablation plan and write the summary table as JSON.
    Ablate {
        #[arg(long)]
        plan: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train every cell of a grid and write the leaderboard as JSON.
    Grid {
        #[arg(long)]
        template: PathBuf,
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Export state-transition eigenvalues of a checkpoint as CSV.
    Eigen {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Simulate { system, seed, steps, dt, binary_valve, out } => {
            simulate(system, seed, steps, dt, binary_valve, &out)
        }
        Command::Train { config, data, out_dir } => train_cmd(&config, data, &out_dir),
        Command::Eval { checkpoint, data, stats, horizon, trace } => {
            eval_cmd(&checkpoint, &data, stats, horizon, trace.as_deref())
        }
        Command::Ablate { plan, data, out } => ablate_cmd(&plan, data, &out),
        Command::Grid { template, grid, data, out } => grid_cmd(&template, &grid, data, &out),
        Command::Eigen { checkpoint, out } => eigen_cmd(&checkpoint, &out),
    }
}

fn simulate(system: Emulator, seed: u64, steps: usize, dt: Option<f64>, binary_valve: bool, out: &Path) -> Result<()> {
    let data = match system {
        Emulator::Cstr => {
            let mut spec = SimulationSpec::cstr_default(steps);
            spec.dt = dt.unwrap_or(spec.dt);
            if binary_valve {
                bail!("--binary-valve only applies to the two-tank system");
            }
            generate_cstr(&CstrParams::default(), &spec, seed)?
        }
        Emulator::Twotank => {
            let mut spec = SimulationSpec::twotank_default(steps);
            spec.dt = dt.unwrap_or(spec.dt);
            spec.binary_valve = binary_valve;
            generate_twotank(&TwoTankParams::default(), &spec, seed)?
        }
    };
    write_dataset(out, &data).with_context(|| format!("writing {}", out.display()))?;
    eprintln!("wrote {} samples to {}", data.len(), out.display());
    Ok(())
}

fn with_data(mut cfg: ExperimentConfig, data: Option<PathBuf>) -> ExperimentConfig {
    if let Some(path) = data {
        cfg.data = Some(DataSource::File { path });
    }
    cfg
}

fn load_config(path: &Path) -> Result<ExperimentConfig> {
    ExperimentConfig::load(path).with_context(|| format!("reading config {}", path.display()))
}

fn train_cmd(config: &Path, data: Option<PathBuf>, out_dir: &Path) -> Result<()> {
    let cfg = with_data(load_config(config)?, data);
    let dataset = cfg.load_data().context("loading training data")?;
    let split = split_and_window(&dataset, cfg.horizon, cfg.model.n_p, cfg.stride)?;
    fs::create_dir_all(out_dir)?;
    cfg.save(&out_dir.join("config.json"))?;

    let outcome = train(&cfg, &split)?;
    let r = &outcome.result;
    save_checkpoint(&outcome.model, &out_dir.join("model.json"))?;
    split.stats.save(&out_dir.join("stats.json"))?;
    write_loss_log(BufWriter::new(File::create(out_dir.join("loss.jsonl"))?), &r.loss_curve)?;
    fs::write(out_dir.join("result.json"), serde_json::to_string_pretty(r)?)?;
    write_eigen_csv(BufWriter::new(File::create(out_dir.join("eigen.csv"))?), &r.eigenvalues)?;
    let trace = open_loop_eval(&outcome.model, &split.test)?;
    write_trace_csv(
        BufWriter::new(File::create(out_dir.join("test_trace.csv"))?),
        &trace,
        split.ranges[2].0 + cfg.model.n_p,
    )?;

    println!(
        "best step {} | dev open-loop {:.6} | test open-loop {:.6} | test N-step {:.6} | {:.1}s",
        r.best_step, r.dev_open_loop_mse, r.test_open_loop_mse, r.test_nstep_mse, r.wall_time_s
    );
    Ok(())
}

fn eval_cmd(
    checkpoint: &Path,
    data: &Path,
    stats: Option<PathBuf>,
    horizon: Option<usize>,
    trace: Option<&Path>,
) -> Result<()> {
    let model = load_checkpoint(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    let cfg = model.config();
    let raw = read_dataset(data, Some(cfg.n_u), Some(cfg.n_y), None)?;
    let third = raw.len() / 3;
    let sidecar = checkpoint.with_file_name("stats.json");
    let stats = match stats {
        Some(p) => NormalizationStats::load(&p)?,
        None if sidecar.exists() => NormalizationStats::load(&sidecar)?,
        None => NormalizationStats::fit(&raw.slice(0, third)),
    };
    let dev = stats.normalize(&raw.slice(third, 2 * third));
    let test = stats.normalize(&raw.slice(2 * third, raw.len()));

    let mut report = serde_json::Map::new();
    report.insert("dev_open_loop_mse".into(), open_loop_eval(&model, &dev)?.mse.into());
    let test_ol = open_loop_eval(&model, &test)?;
    report.insert("test_open_loop_mse".into(), test_ol.mse.into());
    if let Some(n) = horizon {
        report.insert("dev_nstep_mse".into(), nstep(&model, &dev, n)?.into());
        report.insert("test_nstep_mse".into(), nstep(&model, &test, n)?.into());
    }
    if let Some(path) = trace {
        write_trace_csv(BufWriter::new(File::create(path)?), &test_ol, 2 * third + cfg.n_p)?;
    }
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn nstep(model: &BlockSsm, data: &TrajectoryDataset, horizon: usize) -> Result<f64> {
    Ok(n_step_mse(model, &windows(data, horizon, model.config().n_p, 1)?)?)
}

fn ablate_cmd(plan: &Path, data: Option<PathBuf>, out: &Path) -> Result<()> {
    let mut plan = AblationPlan::load(plan).with_context(|| format!("reading plan {}", plan.display()))?;
    plan.base = with_data(plan.base, data);
    let dataset = plan.base.load_data()?;
    let split = split_and_window(&dataset, plan.base.horizon, plan.base.model.n_p, plan.base.stride)?;
    let table = run_ablation(&plan, &split)?;
    fs::write(out, serde_json::to_string_pretty(&table)?)?;
    for row in &table.rows {
        println!(
            "{:<18} median {:.6}  IQR [{:.6}, {:.6}]  diverged {}",
            row.label, row.median, row.q1, row.q3, row.diverged
        );
    }
    Ok(())
}

fn grid_cmd(template: &Path, grid: &Path, data: Option<PathBuf>, out: &Path) -> Result<()> {
    let template = with_data(load_config(template)?, data);
    let spec = GridSpec::load(grid).with_context(|| format!("reading grid {}", grid.display()))?;
    let source = template.data.clone().context("template has no data source and --data was not given")?;
    let dataset = load_source(template.system, &source)?;
    let board = grid_search(&template, &spec, &dataset)?;
    board.save(out)?;
    for e in &board.entries {
        println!(
            "#{:<3} {}  dev open-loop {:.6}  test open-loop {:.6}",
            e.rank, e.config_hash, e.dev_open_loop_mse, e.test_open_loop_mse
        );
    }
    Ok(())
}

fn eigen_cmd(checkpoint: &Path, out: &Path) -> Result<()> {
    let model = load_checkpoint(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    let records = export_eigenvalues(&model)?;
    write_eigen_csv(BufWriter::new(File::create(out)?), &records)?;
    eprintln!("wrote {} eigenvalues to {}", records.len(), out.display());
    Ok(())
}
