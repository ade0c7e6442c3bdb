//! Benchmark runner for the built-in switched-system examples.
//!
//! A run is described by a [`RunConfig`], read from a TOML file and then
//! overridden by command-line flags. Every grid size produces a trajectory
//! CSV, a JSON-lines convergence log and a JSON summary.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use sto_core::grid::{build_grid, MeshOptions};
use sto_core::interior_point::initialize_slacks;
use sto_core::iterate::Iterate;
use sto_core::model::{SwitchedOcp, Vector};
use sto_core::oracle::{assemble_dense, compare, solve_dense};
use sto_core::problems::{bouncing_mass, even_split, three_subsystem, BouncingMassConfig, ThreeSubsystemConfig};
use sto_core::riccati::ModificationPolicy;
use sto_core::solver::{solve_observed, ConvergenceLog, Solution, SolverOptions, Status};
use sto_core::HessianMode;

/// Relative tolerance of the oracle cross-check.
pub const ORACLE_TOL: f64 = 1e-8;

/// Grid sizes of the timing sweep.
pub const SWEEP_GRIDS: [usize; 4] = [10, 50, 100, 500];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Problem {
    ThreeSubsystem,
    BouncingMass,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Hessian {
    Exact,
    GaussNewton,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Modification {
    Off,
    Always,
    Adaptive,
}

impl From<Modification> for ModificationPolicy {
    fn from(m: Modification) -> Self {
        match m {
            Modification::Off => ModificationPolicy::Off,
            Modification::Always => ModificationPolicy::Always,
            Modification::Adaptive => ModificationPolicy::Adaptive,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProblemSection {
    pub name: Problem,
}

impl Default for ProblemSection {
    fn default() -> Self {
        Self {
            name: Problem::ThreeSubsystem,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSection {
    /// Total grid counts; empty selects the problem default.
    pub sizes: Vec<usize>,
    /// Per-phase split; only valid with a single grid size.
    pub split: Option<Vec<usize>>,
    /// Initial switching times; empty selects the problem default.
    pub switching_times: Vec<f64>,
    pub dt_max: Option<f64>,
    pub dt_min: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverSection {
    pub tol: f64,
    pub hessian: Hessian,
    /// Unset selects the problem default.
    pub modification: Option<Modification>,
    /// Unset selects the problem default.
    pub riccati_dt_max: Option<f64>,
    pub max_newton_iters: usize,
    /// Holds the barrier parameter at this value.
    pub barrier_fixed: Option<f64>,
    /// Worker threads for stage-parallel assembly; 1 is sequential.
    pub threads: usize,
    /// Compare every Newton step against the dense KKT solve.
    pub oracle_check: bool,
}

impl Default for SolverSection {
    fn default() -> Self {
        Self {
            tol: 1e-7,
            hessian: Hessian::Exact,
            modification: None,
            riccati_dt_max: None,
            max_newton_iters: 100,
            barrier_fixed: None,
            threads: 1,
            oracle_check: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
    pub repeats: usize,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("out"),
            repeats: 1,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub problem: ProblemSection,
    pub grid: GridSection,
    pub solver: SolverSection,
    pub output: OutputSection,
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("invalid config file {path}: {source}")]
    Parse { path: PathBuf, source: toml::de::Error },
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("cannot write {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("solver error: {0}")]
    Solver(String),
}

impl RunError {
    /// 2 for configuration errors, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) => 2,
            _ => 1,
        }
    }
}

pub fn load_config(path: &Path) -> Result<RunConfig, ConfigError> {
    let text = fs::read_to_string(path).map_err(|source| ConfigError::Read {
        path: path.to_path_buf(),
        source,
    })?;
    toml::from_str(&text).map_err(|source| ConfigError::Parse {
        path: path.to_path_buf(),
        source,
    })
}

/// A fully resolved run for one grid size.
#[derive(Clone, Debug)]
pub struct Case {
    pub n: usize,
    pub counts: Vec<usize>,
    pub switching_times: Vec<f64>,
}

impl RunConfig {
    pub fn num_phases(&self) -> usize {
        match self.problem.name {
            Problem::ThreeSubsystem => 3,
            Problem::BouncingMass => 2,
        }
    }

    pub fn ocp(&self) -> SwitchedOcp {
        match self.problem.name {
            Problem::ThreeSubsystem => three_subsystem(&ThreeSubsystemConfig::default()),
            Problem::BouncingMass => bouncing_mass(&BouncingMassConfig::default()),
        }
    }

    fn default_sizes(&self) -> Vec<usize> {
        match self.problem.name {
            Problem::ThreeSubsystem => vec![10],
            Problem::BouncingMass => vec![BouncingMassConfig::default().split.iter().sum()],
        }
    }

    fn default_times(&self) -> Vec<f64> {
        match self.problem.name {
            Problem::ThreeSubsystem => ThreeSubsystemConfig::default().initial_switches.to_vec(),
            Problem::BouncingMass => vec![BouncingMassConfig::default().initial_switch],
        }
    }

    /// Resolves the grid sizes, splits and switching times, checking that
    /// every split sums to its grid size.
    pub fn cases(&self) -> Result<Vec<Case>, ConfigError> {
        let sizes = if self.grid.sizes.is_empty() { self.default_sizes() } else { self.grid.sizes.clone() };
        let phases = self.num_phases();
        if self.grid.split.is_some() && sizes.len() != 1 {
            return Err(ConfigError::Invalid("a split requires exactly one grid size".into()));
        }
        let times = if self.grid.switching_times.is_empty() {
            self.default_times()
        } else {
            self.grid.switching_times.clone()
        };
        if times.len() != phases - 1 {
            return Err(ConfigError::Invalid(format!(
                "expected {} switching times, got {}",
                phases - 1,
                times.len()
            )));
        }
        sizes
            .iter()
            .map(|&n| {
                let counts = match &self.grid.split {
                    Some(split) => split.clone(),
                    None if n < phases => {
                        return Err(ConfigError::Invalid(format!("grid size {n} is smaller than the {phases} phases")))
                    }
                    None => even_split(n, phases),
                };
                if counts.len() != phases {
                    return Err(ConfigError::Invalid(format!("split needs {phases} entries, got {}", counts.len())));
                }
                if counts.iter().sum::<usize>() != n {
                    return Err(ConfigError::Invalid(format!("split {counts:?} does not sum to {n}")));
                }
                Ok(Case {
                    n,
                    counts,
                    switching_times: times.clone(),
                })
            })
            .collect()
    }

    pub fn solver_options(&self) -> Result<SolverOptions, ConfigError> {
        let s = &self.solver;
        let (default_mod, default_dt) = match self.problem.name {
            Problem::ThreeSubsystem => (Some(ModificationPolicy::Adaptive), 0.5),
            Problem::BouncingMass => (None, 0.1),
        };
        let mesh = match (self.grid.dt_max, self.grid.dt_min) {
            (None, None) => None,
            (Some(max), min) => Some(MeshOptions::new(max, min.unwrap_or(max / 50.0))),
            (None, Some(_)) => return Err(ConfigError::Invalid("dt-min requires dt-max".into())),
        };
        let mut opts = SolverOptions {
            tol: s.tol,
            max_newton_iters: s.max_newton_iters,
            mesh,
            hessian: match s.hessian {
                Hessian::Exact => HessianMode::Exact,
                Hessian::GaussNewton => HessianMode::GaussNewton,
            },
            modification: s.modification.map(Into::into).or(default_mod),
            riccati_dt_max: s.riccati_dt_max.unwrap_or(default_dt),
            parallel: s.threads > 1,
            ..SolverOptions::default()
        };
        if let Some(eps) = s.barrier_fixed {
            opts.ip.fixed_barrier = true;
            opts.ip.eps0 = eps;
            opts.ip.eps_min = eps.min(opts.ip.eps_min);
        }
        opts.check().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.output.repeats == 0 {
            return Err(ConfigError::Invalid("repeats must be at least 1".into()));
        }
        if s.threads == 0 {
            return Err(ConfigError::Invalid("threads must be at least 1".into()));
        }
        Ok(opts)
    }
}

/// Contents of `summary.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub problem: Problem,
    pub n: usize,
    pub counts: Vec<usize>,
    pub status: Status,
    pub objective: f64,
    pub switching_times: Vec<f64>,
    pub iters: usize,
    pub refinements: usize,
    pub residual: f64,
    pub repeats: usize,
    /// Mean wall time of a full solve over the repeats.
    pub mean_ms: f64,
    /// Median wall time of one Newton iteration over all repeats.
    pub median_ms_per_iter: f64,
    pub oracle_max_deviation: Option<f64>,
    /// Recursion error behind a `riccati-failure` status.
    pub failure: Option<String>,
}

impl Summary {
    pub fn converged(&self) -> bool {
        self.status == Status::Converged && self.oracle_max_deviation.is_none_or(|d| d <= ORACLE_TOL)
    }

    pub fn timing_row(&self) -> String {
        format!(
            "N={:<5} status={:<15} iters={:<3} mean_ms={:.3} median_ms_per_iter={:.4} J={:.6}",
            self.n,
            format!("{:?}", self.status),
            self.iters,
            self.mean_ms,
            self.median_ms_per_iter,
            self.objective
        )
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// Solves one case `repeats` times; the last run's solution and log are kept.
pub fn run_case(cfg: &RunConfig, case: &Case) -> Result<(Summary, Solution, ConvergenceLog), RunError> {
    let ocp = cfg.ocp();
    let opts = cfg.solver_options()?;
    let grid = build_grid(&ocp, &case.counts, &case.switching_times)
        .map_err(|e| ConfigError::Invalid(format!("grid: {e}")))?;
    let mut init = Iterate::constant(&ocp, &grid, &ocp.initial_state, &Vector::zeros(ocp.nu), opts.ip.eps0);
    initialize_slacks(&ocp, &grid, &mut init, &opts.ip);

    let mut totals = Vec::with_capacity(cfg.output.repeats);
    let mut step_times = Vec::new();
    let mut last = None;
    for r in 0..cfg.output.repeats {
        let check = cfg.solver.oracle_check && r == 0;
        let mut deviation: Option<f64> = check.then_some(0.0);
        let mut observer = |s: &sto_core::solver::StepInfo| {
            if let Some(worst) = deviation.as_mut() {
                let dev = assemble_dense(s.system)
                    .ok()
                    .and_then(|d| solve_dense(&d).ok())
                    .and_then(|reference| compare(s.step, &reference, ORACLE_TOL).ok())
                    .map_or(f64::INFINITY, |c| c.max_deviation());
                *worst = worst.max(dev);
            }
        };
        let start = Instant::now();
        let (sol, log) = solve_observed(&ocp, &grid, init.clone(), &opts, &mut observer)
            .map_err(|e| RunError::Solver(e.to_string()))?;
        totals.push(start.elapsed().as_secs_f64() * 1e3);
        step_times.extend(log.step_times_ms());
        if r == 0 {
            last = Some((sol, log, deviation));
        } else if let Some(l) = last.as_mut() {
            l.0 = sol;
            l.1 = log;
        }
    }
    let (sol, log, deviation) = last.expect("at least one repeat");
    let summary = Summary {
        problem: cfg.problem.name,
        n: case.n,
        counts: sol.grid.counts.clone(),
        status: sol.status,
        objective: sol.objective,
        switching_times: sol.switching_times().to_vec(),
        iters: sol.iterations,
        refinements: sol.refinements,
        residual: sol.norms.unperturbed_max,
        repeats: cfg.output.repeats,
        mean_ms: totals.iter().sum::<f64>() / totals.len() as f64,
        median_ms_per_iter: median(step_times),
        oracle_max_deviation: deviation,
        failure: log.failure.as_ref().map(ToString::to_string),
    };
    Ok((summary, sol, log))
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RunError + '_ {
    move |source| RunError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn create(path: &Path) -> Result<BufWriter<File>, RunError> {
    File::create(path).map(BufWriter::new).map_err(io_err(path))
}

/// Writes `trajectory.csv`, `log.jsonl` and `summary.json` into `dir`.
pub fn write_artifacts(dir: &Path, summary: &Summary, sol: &Solution, log: &ConvergenceLog) -> Result<(), RunError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let path = dir.join("trajectory.csv");
    let mut out = create(&path)?;
    sol.write_csv(&mut out).and_then(|_| out.flush()).map_err(io_err(&path))?;

    let path = dir.join("log.jsonl");
    let mut out = create(&path)?;
    log.write_jsonl(&mut out).and_then(|_| out.flush()).map_err(io_err(&path))?;

    let path = dir.join("summary.json");
    let mut out = create(&path)?;
    serde_json::to_writer_pretty(&mut out, summary)
        .map_err(std::io::Error::from)
        .and_then(|_| writeln!(out))
        .and_then(|_| out.flush())
        .map_err(io_err(&path))
}

/// Runs every case. With a single grid size the artifacts go directly into
/// the output directory, otherwise into one `n<N>` subdirectory per size.
pub fn run(cfg: &RunConfig, report: &mut dyn FnMut(&Summary)) -> Result<Vec<Summary>, RunError> {
    let cases = cfg.cases()?;
    cfg.solver_options()?;
    let mut summaries = Vec::with_capacity(cases.len());
    for case in &cases {
        let (summary, sol, log) = run_case(cfg, case)?;
        let dir = if cases.len() == 1 {
            cfg.output.dir.clone()
        } else {
            cfg.output.dir.join(format!("n{}", case.n))
        };
        write_artifacts(&dir, &summary, &sol, &log)?;
        report(&summary);
        summaries.push(summary);
    }
    Ok(summaries)
}
