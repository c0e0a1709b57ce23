use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;
use serde::Serialize;

use mutagame_core::config::FileConfig;
use mutagame_core::harness::{
    run_simulation, run_sweep, slice_thresholds, solve_abandonment, solve_agent, Axis, SweepCell,
    SweepGrid, SweepResult,
};
use mutagame_core::Error;

mod output;

use output::{json_bytes, now, Outputs};

#[derive(Debug, Parser)]
#[command(
    name = "mutagame",
    version,
    about = "Miner cooperation under protocol mutation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// TOML configuration file. Defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Master seed, overriding the config.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run one trajectory.
    Simulate {
        #[command(flatten)]
        common: Common,
    },
    /// Run the mutability x sensitivity x concentration sweep.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Worker threads. Results do not depend on this.
        #[arg(long)]
        jobs: Option<usize>,
        #[arg(long)]
        replicates: Option<u32>,
        /// start:stop:count
        #[arg(long)]
        eps: Option<String>,
        #[arg(long)]
        kappa: Option<String>,
        #[arg(long)]
        gamma: Option<String>,
    },
    /// Solve one agent's dynamic program and locate its abandonment level.
    Solve {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        grid_levels: Option<usize>,
        /// Agent index; 0 holds the concentrated share.
        #[arg(long, default_value_t = 0)]
        agent: usize,
    },
    /// Re-detect thresholds from an existing sweep.csv.
    Threshold {
        #[arg(long)]
        sweep: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
}

#[derive(Debug)]
enum Failure {
    Core(Error),
    Io(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

impl Failure {
    fn exit_code(&self) -> u8 {
        match self {
            Failure::Io(_) => 3,
            Failure::Core(e) => core_code(e),
        }
    }
}

fn core_code(e: &Error) -> u8 {
    match e {
        Error::NonConvergence { .. } | Error::NonFinite { .. } => 4,
        Error::Cell { source, .. } => core_code(source),
        _ => 2,
    }
}

#[derive(Debug, Serialize)]
struct Summary {
    epochs: u64,
    n_agents: usize,
    incidence: f64,
    cooperation_index: f64,
    mean_churn: f64,
    discounted_utilities: Vec<f64>,
    first_deviation: Vec<Option<u64>>,
}

#[derive(Debug, Serialize)]
struct Abandonment {
    agent: usize,
    grid: Axis,
    abandonment_mutability: Option<f64>,
}

fn load_config(common: &Common) -> Result<FileConfig, Failure> {
    let mut cfg = match &common.config {
        Some(path) => FileConfig::load(path)?,
        None => FileConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.simulation.seed = seed;
    }
    Ok(cfg)
}

fn parse_axis(flag: &str, value: &Option<String>, fallback: Axis) -> Result<Axis, Failure> {
    match value {
        None => Ok(fallback),
        Some(s) => s
            .parse()
            .map_err(|e: Error| Failure::Core(Error::config(flag, e.to_string()))),
    }
}

fn config_json(cfg: &FileConfig) -> serde_json::Value {
    serde_json::to_value(cfg).expect("config serialises to JSON")
}

fn commit(
    outputs: Outputs,
    dir: &Path,
    command: &str,
    seed: u64,
    started: String,
    config: serde_json::Value,
) -> Result<(), Failure> {
    let written = outputs
        .commit(dir, command, seed, started, config)
        .map_err(|e| Failure::Io(format!("{}: {e}", dir.display())))?;
    for p in written {
        info!("wrote {}", p.display());
    }
    Ok(())
}

fn simulate(common: &Common) -> Result<(), Failure> {
    let started = now();
    let cfg = load_config(common)?;
    let sim = &cfg.simulation;
    let traj = run_simulation(sim)?;
    let n = sim.n_agents;
    let summary = Summary {
        epochs: sim.epochs,
        n_agents: n,
        incidence: traj.incidence(),
        cooperation_index: traj.cooperation_index(),
        mean_churn: traj.mean_churn(),
        discounted_utilities: traj.discounted_utilities(),
        first_deviation: (0..n).map(|i| traj.first_deviation(i)).collect(),
    };
    let mut out = Outputs::default();
    out.add("epochs.csv", output::epochs_csv(&traj.records));
    out.add("summary.json", json_bytes(&summary));
    commit(
        out,
        &common.out,
        "simulate",
        sim.seed,
        started,
        config_json(&cfg),
    )
}

#[allow(clippy::too_many_arguments)]
fn sweep(
    common: &Common,
    jobs: Option<usize>,
    replicates: Option<u32>,
    eps: &Option<String>,
    kappa: &Option<String>,
    gamma: &Option<String>,
) -> Result<(), Failure> {
    let started = now();
    let mut cfg = load_config(common)?;
    cfg.sweep.eps = parse_axis("eps", eps, cfg.sweep.eps)?;
    cfg.sweep.kappa = parse_axis("kappa", kappa, cfg.sweep.kappa)?;
    cfg.sweep.gamma = parse_axis("gamma", gamma, cfg.sweep.gamma)?;
    if let Some(r) = replicates {
        cfg.sweep.replicates = r;
    }
    cfg.validate()?;
    let jobs = jobs.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    let grid = cfg.sweep.grid();
    info!(
        "sweeping {} cells x {} replicates on {jobs} threads",
        grid.cell_count(),
        cfg.sweep.replicates
    );
    let result = run_sweep(&cfg.simulation, &grid, cfg.sweep.replicates, jobs)?;
    let slices = slice_thresholds(&result)?;
    let mut out = Outputs::default();
    out.add("sweep.csv", output::sweep_csv(&result.cells));
    out.add("threshold.json", output::thresholds_json(&slices));
    commit(
        out,
        &common.out,
        "sweep",
        cfg.simulation.seed,
        started,
        config_json(&cfg),
    )
}

fn solve(common: &Common, grid_levels: Option<usize>, agent: usize) -> Result<(), Failure> {
    let started = now();
    let mut cfg = load_config(common)?;
    if let Some(g) = grid_levels {
        cfg.simulation.solve.grid_levels = g;
    }
    cfg.validate()?;
    let sim = &cfg.simulation;
    let (space, solution) = solve_agent(sim, agent)?;
    info!(
        "solved {} states in {} iterations, residual {:e}",
        solution.values.len(),
        solution.iterations,
        solution.residual
    );
    let level = solve_abandonment(sim, agent, &cfg.abandonment)?;
    let abandonment = Abandonment {
        agent,
        grid: cfg.abandonment,
        abandonment_mutability: level,
    };
    let mut out = Outputs::default();
    out.add("values.csv", output::values_csv(&space, &solution));
    out.add("abandonment.json", json_bytes(&abandonment));
    commit(
        out,
        &common.out,
        "solve",
        sim.seed,
        started,
        config_json(&cfg),
    )
}

/// Rebuilds the grid from a sweep table in `eps`-slowest order.
fn read_sweep(path: &Path) -> Result<SweepResult, Failure> {
    let mut rdr = csv::Reader::from_path(path)
        .map_err(|e| Failure::Io(format!("{}: {e}", path.display())))?;
    let bad = |msg: String| Failure::Core(Error::config("sweep", msg));
    let header = rdr.headers().map_err(|e| bad(e.to_string()))?.clone();
    if header.iter().ne(output::SWEEP_COLUMNS) {
        return Err(bad(format!(
            "unexpected columns {:?}",
            header.iter().collect::<Vec<_>>()
        )));
    }
    let mut cells = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        let f = |i: usize| -> Result<f64, Failure> {
            rec[i]
                .parse()
                .map_err(|_| bad(format!("row {}: `{}` is not a number", line + 1, &rec[i])))
        };
        cells.push(SweepCell {
            eps: f(0)?,
            kappa: f(1)?,
            gamma: f(2)?,
            incidence: f(3)?,
            cooperation_index: f(4)?,
            mean_churn: f(5)?,
            first_deviation_gamma_hi: f(6)?,
            first_deviation_gamma_lo: f(7)?,
            replicates: rec[8]
                .parse()
                .map_err(|_| bad(format!("row {}: bad replicate count", line + 1)))?,
        });
    }
    let axis = |get: fn(&SweepCell) -> f64| {
        let mut v: Vec<f64> = cells.iter().map(get).collect();
        v.sort_by(f64::total_cmp);
        v.dedup();
        match v.as_slice() {
            [] => Axis::single(0.0),
            [x] => Axis::single(*x),
            _ => Axis {
                start: v[0],
                stop: v[v.len() - 1],
                count: v.len(),
            },
        }
    };
    let grid = SweepGrid {
        eps: axis(|c| c.eps),
        kappa: axis(|c| c.kappa),
        gamma: axis(|c| c.gamma),
    };
    if cells.is_empty() || grid.cell_count() != cells.len() {
        return Err(bad(
            "rows do not form a complete eps x kappa x gamma grid".into()
        ));
    }
    if cells
        .iter()
        .zip(grid.cells())
        .any(|(c, (e, k, g))| (c.eps, c.kappa, c.gamma) != (e, k, g))
    {
        return Err(bad("rows are not in eps, kappa, gamma order".into()));
    }
    Ok(SweepResult { grid, cells })
}

fn threshold(sweep: &Path, out_dir: &Path) -> Result<(), Failure> {
    let started = now();
    let result = read_sweep(sweep)?;
    let slices = slice_thresholds(&result)?;
    let mut out = Outputs::default();
    out.add("threshold.json", output::thresholds_json(&slices));
    let config = serde_json::json!({ "sweep": sweep.display().to_string(), "grid": result.grid });
    commit(out, out_dir, "threshold", 0, started, config)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("MUTAGAME_LOG", "warn"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Simulate { common } => simulate(common),
        Command::Sweep {
            common,
            jobs,
            replicates,
            eps,
            kappa,
            gamma,
        } => sweep(common, *jobs, *replicates, eps, kappa, gamma),
        Command::Solve {
            common,
            grid_levels,
            agent,
        } => solve(common, *grid_levels, *agent),
        Command::Threshold { sweep, out } => threshold(sweep, out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            match &f {
                Failure::Io(msg) => eprintln!("mutagame: i/o error: {msg}"),
                Failure::Core(e) => eprintln!("mutagame: {e}"),
            }
            ExitCode::from(f.exit_code())
        }
    }
}
