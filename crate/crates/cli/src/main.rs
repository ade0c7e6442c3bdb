use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use sto_cli::{load_config, run, ConfigError, Hessian, Modification, Problem, RunConfig, RunError, SWEEP_GRIDS};

#[derive(Parser)]
#[command(name = "sto", version, about = "Switching-time and trajectory optimization of switched systems")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve a built-in problem and write trajectory, log and summary.
    Solve(SolveArgs),
}

#[derive(Args)]
struct SolveArgs {
    /// TOML config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    problem: Option<Problem>,
    /// Comma-separated total grid counts.
    #[arg(long, value_delimiter = ',')]
    grids: Option<Vec<usize>>,
    /// Comma-separated per-phase grid counts (single grid only).
    #[arg(long, value_delimiter = ',')]
    split: Option<Vec<usize>>,
    /// Comma-separated initial switching times.
    #[arg(long, value_delimiter = ',')]
    switching_times: Option<Vec<f64>>,
    #[arg(long)]
    tol: Option<f64>,
    /// Largest allowed step size; enables mesh refinement.
    #[arg(long)]
    dt_max: Option<f64>,
    /// Smallest allowed step size (defaults to dt-max / 50).
    #[arg(long)]
    dt_min: Option<f64>,
    #[arg(long, value_enum)]
    hessian: Option<Hessian>,
    #[arg(long, value_enum)]
    modification: Option<Modification>,
    /// Keep the barrier parameter fixed at this value.
    #[arg(long, value_name = "EPS", num_args = 0..=1, default_missing_value = "1e-8")]
    barrier_fixed: Option<f64>,
    #[arg(long)]
    repeats: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads for stage-parallel assembly.
    #[arg(long)]
    threads: Option<usize>,
    /// Run the grid sizes 10, 50, 100 and 500 and print one timing row each.
    #[arg(long)]
    sweep: bool,
    /// Cross-check every Newton step against the dense KKT solve.
    #[arg(long)]
    oracle_check: bool,
}

impl SolveArgs {
    fn into_config(self) -> Result<RunConfig, ConfigError> {
        let mut cfg = match &self.config {
            Some(path) => load_config(path)?,
            None => RunConfig::default(),
        };
        if let Some(p) = self.problem {
            cfg.problem.name = p;
        }
        if self.sweep {
            if self.grids.is_some() {
                return Err(ConfigError::Invalid("--sweep and --grids are exclusive".into()));
            }
            cfg.grid.sizes = SWEEP_GRIDS.to_vec();
        }
        if let Some(g) = self.grids {
            cfg.grid.sizes = g;
        }
        if let Some(s) = self.split {
            cfg.grid.split = Some(s);
        }
        if let Some(t) = self.switching_times {
            cfg.grid.switching_times = t;
        }
        if self.dt_max.is_some() {
            cfg.grid.dt_max = self.dt_max;
        }
        if self.dt_min.is_some() {
            cfg.grid.dt_min = self.dt_min;
        }
        if let Some(tol) = self.tol {
            cfg.solver.tol = tol;
        }
        if let Some(h) = self.hessian {
            cfg.solver.hessian = h;
        }
        if self.modification.is_some() {
            cfg.solver.modification = self.modification;
        }
        if self.barrier_fixed.is_some() {
            cfg.solver.barrier_fixed = self.barrier_fixed;
        }
        if let Some(t) = self.threads {
            cfg.solver.threads = t;
        }
        cfg.solver.oracle_check |= self.oracle_check;
        if let Some(r) = self.repeats {
            cfg.output.repeats = r;
        }
        if let Some(o) = self.out {
            cfg.output.dir = o;
        }
        Ok(cfg)
    }
}

fn main() -> ExitCode {
    let Command::Solve(args) = Cli::parse().command;
    let result = args.into_config().map_err(RunError::from).and_then(|cfg| {
        if cfg.solver.threads > 1 {
            rayon::ThreadPoolBuilder::new()
                .num_threads(cfg.solver.threads)
                .build_global()
                .map_err(|e| ConfigError::Invalid(format!("thread pool: {e}")))?;
        }
        run(&cfg, &mut |s| println!("{}", s.timing_row()))
    });
    match result {
        Ok(summaries) => {
            if let Some(failed) = summaries.iter().find(|s| !s.converged()) {
                eprintln!("solver failed at N = {}: {:?}", failed.n, failed.status);
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
