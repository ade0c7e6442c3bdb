//! Newton iterations on the discretized NLP and the outer mesh-refinement
//! loop.

use std::io::{self, Write};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{refine_with, GridError, MeshOptions, RefineMode, TimeGrid};
use crate::interior_point::{clip_slacks, fraction_to_boundary, recover_bound_steps, update_barrier, IpOptions};
use crate::iterate::{Iterate, NewtonStep};
use crate::kkt::{assemble, eval_residual, HessianMode, KktError, KktSystem, ResidualNorms};
use crate::model::{SwitchedOcp, Vector};
use crate::riccati::{solve_step, ModificationPolicy, RiccatiOptions, RiccatiReport};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TerminationNorm {
    Max,
    L2,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    /// Threshold on the unperturbed KKT residual.
    pub tol: f64,
    pub termination: TerminationNorm,
    pub max_newton_iters: usize,
    /// Cap on Newton iterations summed over all refinement rounds.
    pub max_total_iters: usize,
    pub mesh: Option<MeshOptions>,
    /// Perturbed KKT l2 norm below which the mesh may be refined.
    pub refine_trigger: f64,
    pub hessian: HessianMode,
    /// `None` selects `Off` for the exact Hessian and `Adaptive` for
    /// Gauss-Newton.
    pub modification: Option<ModificationPolicy>,
    pub riccati_dt_max: f64,
    pub ip: IpOptions,
    /// Assemble stages in parallel.
    pub parallel: bool,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tol: 1e-7,
            termination: TerminationNorm::Max,
            max_newton_iters: 100,
            max_total_iters: 500,
            mesh: None,
            refine_trigger: 1e-1,
            hessian: HessianMode::Exact,
            modification: None,
            riccati_dt_max: 0.5,
            ip: IpOptions::default(),
            parallel: false,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OptionsError {
    #[error("tol must be positive, got {0}")]
    Tolerance(f64),
    #[error(transparent)]
    Mesh(#[from] GridError),
    #[error("invalid interior-point options")]
    InteriorPoint,
    #[error("riccati dt_max must be positive, got {0}")]
    RiccatiDtMax(f64),
}

impl SolverOptions {
    pub fn check(&self) -> Result<(), OptionsError> {
        if !(self.tol > 0.0) {
            return Err(OptionsError::Tolerance(self.tol));
        }
        if let Some(mesh) = &self.mesh {
            mesh.check()?;
        }
        if !self.ip.is_valid() {
            return Err(OptionsError::InteriorPoint);
        }
        if !(self.riccati_dt_max > 0.0) {
            return Err(OptionsError::RiccatiDtMax(self.riccati_dt_max));
        }
        Ok(())
    }

    /// Exact Hessian with adaptive modifications, the configuration used for
    /// the three-subsystem benchmark.
    pub fn exact_modified() -> Self {
        Self {
            modification: Some(ModificationPolicy::Adaptive),
            ..Self::default()
        }
    }

    pub fn modification_policy(&self) -> ModificationPolicy {
        self.modification.unwrap_or(match self.hessian {
            HessianMode::Exact => ModificationPolicy::Off,
            HessianMode::GaussNewton => ModificationPolicy::Adaptive,
        })
    }

    fn riccati(&self) -> RiccatiOptions {
        RiccatiOptions {
            modification: self.modification_policy(),
            dt_max: self.riccati_dt_max,
        }
    }

    fn metric(&self, norms: &ResidualNorms) -> f64 {
        match self.termination {
            TerminationNorm::Max => norms.unperturbed_max,
            TerminationNorm::L2 => norms.unperturbed_l2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Status {
    Converged,
    MaxIterations,
    RiccatiFailure,
    /// The step left the set of ordered switching times or produced a
    /// non-finite iterate.
    InvalidIterate,
    /// The mesh is too coarse and the residual is small enough to refine.
    RefinementRequested,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iter: usize,
    pub num_stages: usize,
    pub norms: ResidualNorms,
    pub eps: f64,
    pub switching_times: Vec<f64>,
    /// `None` for the final residual evaluation, where no step is taken.
    pub alpha_primal: Option<f64>,
    pub alpha_dual: Option<f64>,
    pub step_max: Option<f64>,
    pub modified: bool,
    pub wall_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefinementEvent {
    /// Number of Newton iterations performed before the event.
    pub after_iter: usize,
    pub grow: bool,
    pub changed: Vec<usize>,
    pub flagged: Vec<usize>,
    pub counts: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "kebab-case")]
pub enum LogRecord {
    Iteration(IterationRecord),
    Refinement(RefinementEvent),
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceLog {
    pub records: Vec<LogRecord>,
    pub failure: Option<String>,
}

impl ConvergenceLog {
    pub fn iterations(&self) -> impl Iterator<Item = &IterationRecord> {
        self.records.iter().filter_map(|r| match r {
            LogRecord::Iteration(it) => Some(it),
            LogRecord::Refinement(_) => None,
        })
    }

    pub fn refinements(&self) -> impl Iterator<Item = &RefinementEvent> {
        self.records.iter().filter_map(|r| match r {
            LogRecord::Refinement(ev) => Some(ev),
            LogRecord::Iteration(_) => None,
        })
    }

    /// Number of Newton steps taken.
    pub fn num_steps(&self) -> usize {
        self.iterations().filter(|r| r.alpha_primal.is_some()).count()
    }

    pub fn num_refinements(&self) -> usize {
        self.refinements().filter(|ev| !ev.changed.is_empty()).count()
    }

    /// Wall times of the iterations that took a step.
    pub fn step_times_ms(&self) -> Vec<f64> {
        self.iterations().filter(|r| r.alpha_primal.is_some()).map(|r| r.wall_ms).collect()
    }

    pub fn write_jsonl(&self, out: &mut impl Write) -> io::Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut *out, r)?;
            writeln!(out)?;
        }
        Ok(())
    }
}

/// Everything the solver knows about one Newton step, handed to observers
/// before the step is applied.
pub struct StepInfo<'a> {
    pub iter: usize,
    pub grid: &'a TimeGrid,
    pub iterate: &'a Iterate,
    pub system: &'a KktSystem,
    pub step: &'a NewtonStep,
    pub report: &'a RiccatiReport,
}

#[derive(Clone, Debug)]
pub struct NlpResult {
    pub iterate: Iterate,
    pub grid: TimeGrid,
    pub status: Status,
    pub norms: ResidualNorms,
    /// Newton steps taken.
    pub steps: usize,
}

/// Stage, jump and terminal costs of the discretized problem.
pub fn objective(ocp: &SwitchedOcp, grid: &TimeGrid, it: &Iterate) -> f64 {
    let mut j = 0.0;
    for i in 0..grid.num_stages() {
        let p = grid.phase_of(i);
        j += grid.dt[p] * ocp.phases[p].cost.eval(&it.x[i], &it.u[i]);
    }
    for (s, pre) in it.x_pre.iter().enumerate() {
        if let (Some(pre), Some(cost)) = (pre, ocp.event(s).and_then(|e| e.jump_cost.as_ref())) {
            j += cost.eval(pre);
        }
    }
    j + ocp.terminal_cost.eval(&it.x[grid.num_stages()])
}

fn finite(it: &Iterate) -> bool {
    let vecs = it.x.iter().chain(&it.u).chain(&it.lam).chain(&it.z).chain(&it.nu);
    let opts = it.x_pre.iter().chain(&it.lam_pre).chain(&it.zeta).flatten();
    vecs.chain(opts).all(|v| v.iter().all(|e| e.is_finite()))
        && it.t.iter().chain(&it.w).chain(&it.upsilon).all(|e| e.is_finite())
}

struct NlpRun<'a> {
    ocp: &'a SwitchedOcp,
    opts: &'a SolverOptions,
    /// Newton steps allowed in this call.
    budget: usize,
    first_iter: usize,
    /// Return early once the mesh is too coarse and the perturbed residual
    /// is below this value.
    refine_below: Option<(f64, f64)>,
}

impl NlpRun<'_> {
    fn run(
        &self,
        mut grid: TimeGrid,
        mut it: Iterate,
        log: &mut ConvergenceLog,
        observer: &mut dyn FnMut(&StepInfo),
    ) -> Result<NlpResult, KktError> {
        let ocp = self.ocp;
        let opts = self.opts;
        let riccati = opts.riccati();
        let mut taken = 0;
        loop {
            let start = Instant::now();
            let res = eval_residual(ocp, &grid, &it)?;
            let norms = res.norms;
            let mut record = IterationRecord {
                iter: self.first_iter + taken,
                num_stages: grid.num_stages(),
                norms,
                eps: it.eps,
                switching_times: it.t.clone(),
                alpha_primal: None,
                alpha_dual: None,
                step_max: None,
                modified: false,
                wall_ms: 0.0,
            };
            let finish = |status: Status, it: Iterate, grid: TimeGrid, mut record: IterationRecord, log: &mut ConvergenceLog| {
                record.wall_ms = start.elapsed().as_secs_f64() * 1e3;
                log.records.push(LogRecord::Iteration(record));
                Ok(NlpResult {
                    iterate: it,
                    grid,
                    status,
                    norms,
                    steps: taken,
                })
            };
            if !norms.unperturbed_max.is_finite() {
                log.failure = Some("non-finite KKT residual".to_string());
                return finish(Status::InvalidIterate, it, grid, record, log);
            }
            if opts.metric(&norms) <= opts.tol {
                return finish(Status::Converged, it, grid, record, log);
            }
            if let Some((trigger, dt_max)) = self.refine_below {
                if norms.perturbed_l2 < trigger && grid.dt.iter().any(|&h| h > dt_max) {
                    return finish(Status::RefinementRequested, it, grid, record, log);
                }
            }
            if taken >= self.budget {
                return finish(Status::MaxIterations, it, grid, record, log);
            }

            it.eps = update_barrier(it.eps, norms.perturbed_l2, &opts.ip);
            let sys = assemble(ocp, &grid, &it, opts.hessian, opts.parallel)?;
            let (mut step, report) = match solve_step(&sys, &riccati) {
                Ok(v) => v,
                Err(e) => {
                    log.failure = Some(e.to_string());
                    return finish(Status::RiccatiFailure, it, grid, record, log);
                }
            };
            recover_bound_steps(&sys, &mut step);
            observer(&StepInfo {
                iter: record.iter,
                grid: &grid,
                iterate: &it,
                system: &sys,
                step: &step,
                report: &report,
            });
            let (ap, ad) = fraction_to_boundary(&it, &step, opts.ip.tau);
            it.apply(&step, ap, ad);
            taken += 1;
            record.alpha_primal = Some(ap);
            record.alpha_dual = Some(ad);
            record.step_max = Some(step.max_abs());
            record.modified = report.any_modified();
            record.wall_ms = start.elapsed().as_secs_f64() * 1e3;
            log.records.push(LogRecord::Iteration(record));

            grid = match grid.with_switching_times(&it.t) {
                Ok(g) if finite(&it) => g,
                Ok(_) => {
                    log.failure = Some("non-finite iterate".to_string());
                    return Ok(NlpResult {
                        iterate: it,
                        grid,
                        status: Status::InvalidIterate,
                        norms,
                        steps: taken,
                    });
                }
                Err(e) => {
                    log.failure = Some(e.to_string());
                    return Ok(NlpResult {
                        iterate: it,
                        grid,
                        status: Status::InvalidIterate,
                        norms,
                        steps: taken,
                    });
                }
            };
        }
    }
}

/// Newton iterations on a fixed grid structure (switching times move with
/// the iterate).
pub fn solve_nlp(
    ocp: &SwitchedOcp,
    grid: &TimeGrid,
    init: Iterate,
    opts: &SolverOptions,
) -> Result<(NlpResult, ConvergenceLog), KktError> {
    solve_nlp_observed(ocp, grid, init, opts, &mut |_| {})
}

pub fn solve_nlp_observed(
    ocp: &SwitchedOcp,
    grid: &TimeGrid,
    init: Iterate,
    opts: &SolverOptions,
    observer: &mut dyn FnMut(&StepInfo),
) -> Result<(NlpResult, ConvergenceLog), KktError> {
    let mut log = ConvergenceLog::default();
    let run = NlpRun {
        ocp,
        opts,
        budget: opts.max_newton_iters,
        first_iter: 0,
        refine_below: None,
    };
    let res = run.run(grid.clone(), init, &mut log, observer)?;
    Ok((res, log))
}

#[derive(Debug, Error)]
pub enum SolveError {
    #[error(transparent)]
    Options(#[from] OptionsError),
    #[error(transparent)]
    Kkt(#[from] KktError),
    #[error(transparent)]
    Grid(#[from] GridError),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Solution {
    pub status: Status,
    pub grid: TimeGrid,
    pub iterate: Iterate,
    pub objective: f64,
    pub norms: ResidualNorms,
    pub iterations: usize,
    pub refinements: usize,
}

impl Solution {
    pub fn switching_times(&self) -> &[f64] {
        &self.iterate.t
    }

    pub fn converged(&self) -> bool {
        self.status == Status::Converged
    }

    /// Rows of `(t, x, u)`. Pre-jump states appear as an extra row at the
    /// switching time, before the post-jump row; rows without a control of
    /// their own repeat the previous control.
    pub fn trajectory_rows(&self) -> Vec<(f64, Vector, Vector)> {
        let grid = &self.grid;
        let it = &self.iterate;
        let n = grid.num_stages();
        let mut rows = Vec::with_capacity(n + 1 + it.t.len());
        for i in 0..n {
            rows.push((grid.node_time(i), it.x[i].clone(), it.u[i].clone()));
            if let Some(j) = grid.pre_jump_after(i) {
                rows.push((it.t[j], it.x_pre[j].clone().expect("pre-jump state"), it.u[i].clone()));
            }
        }
        let u_last = it.u.last().cloned().unwrap_or_else(|| Vector::zeros(0));
        rows.push((grid.tf, it.x[n].clone(), u_last));
        rows
    }

    /// CSV with columns `t, x0.., u0..`.
    pub fn write_csv(&self, out: &mut impl Write) -> io::Result<()> {
        let rows = self.trajectory_rows();
        let (nx, nu) = rows.first().map_or((0, 0), |r| (r.1.len(), r.2.len()));
        let header: Vec<String> = std::iter::once("t".to_string())
            .chain((0..nx).map(|k| format!("x{k}")))
            .chain((0..nu).map(|k| format!("u{k}")))
            .collect();
        writeln!(out, "{}", header.join(","))?;
        for (t, x, u) in rows {
            let fields: Vec<String> = std::iter::once(t).chain(x.iter().copied()).chain(u.iter().copied()).map(|v| format!("{v:e}")).collect();
            writeln!(out, "{}", fields.join(","))?;
        }
        Ok(())
    }
}

/// Alternates Newton solves with mesh refinement: shrink before each solve,
/// grow after it, until the residual is below `tol` and every step size is
/// at most `dt_max`.
pub fn solve(
    ocp: &SwitchedOcp,
    grid: &TimeGrid,
    init: Iterate,
    opts: &SolverOptions,
) -> Result<(Solution, ConvergenceLog), SolveError> {
    solve_observed(ocp, grid, init, opts, &mut |_| {})
}

pub fn solve_observed(
    ocp: &SwitchedOcp,
    grid: &TimeGrid,
    init: Iterate,
    opts: &SolverOptions,
    observer: &mut dyn FnMut(&StepInfo),
) -> Result<(Solution, ConvergenceLog), SolveError> {
    opts.check()?;
    let mut log = ConvergenceLog::default();
    let mut grid = grid.clone();
    let mut it = init;
    let mut total = 0;
    let mut refinements = 0;
    let mut refine = |grid: &mut TimeGrid, it: &mut Iterate, mode: RefineMode, total: usize, log: &mut ConvergenceLog| {
        let Some(mesh) = &opts.mesh else {
            return Ok::<bool, GridError>(false);
        };
        let r = refine_with(ocp, grid, it, mesh, mode)?;
        let changed = !r.changed.is_empty();
        if changed || !r.flagged.is_empty() {
            log.records.push(LogRecord::Refinement(RefinementEvent {
                after_iter: total,
                grow: mode == RefineMode::Grow,
                changed: r.changed,
                flagged: r.flagged,
                counts: r.grid.counts.clone(),
            }));
        }
        if changed {
            refinements += 1;
            *grid = r.grid;
            *it = r.iterate;
            clip_slacks(it, opts.ip.slack_floor);
        }
        Ok(changed)
    };

    let result = loop {
        refine(&mut grid, &mut it, RefineMode::Shrink, total, &mut log)?;
        let run = NlpRun {
            ocp,
            opts,
            budget: opts.max_newton_iters.min(opts.max_total_iters - total),
            first_iter: total,
            refine_below: opts.mesh.map(|m| (opts.refine_trigger, m.dt_max)),
        };
        let res = run.run(grid, it, &mut log, observer)?;
        total += res.steps;
        grid = res.grid;
        it = res.iterate;
        match res.status {
            Status::Converged | Status::RefinementRequested => {
                let grown = refine(&mut grid, &mut it, RefineMode::Grow, total, &mut log)?;
                if !grown && res.status == Status::Converged {
                    break (Status::Converged, res.norms);
                }
                if total >= opts.max_total_iters {
                    break (Status::MaxIterations, res.norms);
                }
            }
            status => break (status, res.norms),
        }
    };
    let (status, norms) = result;
    let objective = objective(ocp, &grid, &it);
    let solution = Solution {
        status,
        grid,
        iterate: it,
        objective,
        norms,
        iterations: total,
        refinements,
    };
    Ok((solution, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::build_grid;
    use crate::interior_point::initialize_slacks;
    use crate::model::{LinearDynamics, Matrix, PhaseSpec, QuadraticStageCost, QuadraticStateCost};
    use crate::problems::{even_split, three_subsystem};
    use std::sync::Arc;

    fn scalar_lqr() -> SwitchedOcp {
        let one = Matrix::from_element(1, 1, 1.0);
        SwitchedOcp {
            phases: vec![PhaseSpec::new(
                Arc::new(LinearDynamics {
                    a: one.clone(),
                    b: one,
                    c: Vector::zeros(1),
                }),
                Arc::new(QuadraticStageCost::diagonal(&[1.0], &[1.0], Vector::zeros(1), Vector::zeros(1))),
            )],
            terminal_cost: Arc::new(QuadraticStateCost::diagonal(&[1.0], Vector::zeros(1))),
            initial_state: Vector::from_element(1, 1.0),
            t0: 0.0,
            tf: 1.0,
            nx: 1,
            nu: 1,
        }
    }

    #[test]
    fn quadratic_problem_converges_in_one_step() {
        let ocp = scalar_lqr();
        let grid = build_grid(&ocp, &[5], &[]).unwrap();
        for start in [-3.0, 0.0, 7.5] {
            let init = Iterate::constant(&ocp, &grid, &Vector::from_element(1, start), &Vector::from_element(1, start), 0.1);
            let (res, log) = solve_nlp(&ocp, &grid, init, &SolverOptions::default()).unwrap();
            assert_eq!(res.status, Status::Converged);
            assert_eq!(log.num_steps(), 1);
        }
    }

    #[test]
    fn converged_start_returns_immediately() {
        let ocp = scalar_lqr();
        let grid = build_grid(&ocp, &[5], &[]).unwrap();
        let init = Iterate::constant(&ocp, &grid, &Vector::zeros(1), &Vector::zeros(1), 0.1);
        let (res, _) = solve_nlp(&ocp, &grid, init, &SolverOptions::default()).unwrap();
        let opts = SolverOptions {
            mesh: Some(MeshOptions::new(0.5, 0.01)),
            ..Default::default()
        };
        let (sol, log) = solve(&ocp, &res.grid, res.iterate, &opts).unwrap();
        assert!(sol.converged());
        assert_eq!(sol.iterations, 0);
        assert_eq!(sol.refinements, 0);
        assert_eq!(log.num_refinements(), 0);
    }

    fn benchmark_run() -> ConvergenceLog {
        let ocp = three_subsystem(&Default::default());
        let grid = build_grid(&ocp, &even_split(10, 3), &[1.0, 2.0]).unwrap();
        let opts = SolverOptions::exact_modified();
        let mut init = Iterate::constant(&ocp, &grid, &ocp.initial_state, &Vector::zeros(1), opts.ip.eps0);
        initialize_slacks(&ocp, &grid, &mut init, &opts.ip);
        solve_nlp(&ocp, &grid, init, &opts).unwrap().1
    }

    #[test]
    fn runs_are_deterministic() {
        let strip = |log: ConvergenceLog| {
            log.iterations()
                .map(|r| IterationRecord { wall_ms: 0.0, ..r.clone() })
                .collect::<Vec<_>>()
        };
        assert_eq!(strip(benchmark_run()), strip(benchmark_run()));
    }

    #[test]
    fn jsonl_has_one_line_per_record() {
        let log = benchmark_run();
        let mut buf = Vec::new();
        log.write_jsonl(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), log.records.len());
        let back: LogRecord = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert_eq!(back, log.records[0]);
    }

    #[test]
    fn invalid_options_rejected() {
        let opts = SolverOptions {
            tol: 0.0,
            ..Default::default()
        };
        assert_eq!(opts.check(), Err(OptionsError::Tolerance(0.0)));
        let opts = SolverOptions {
            mesh: Some(MeshOptions::new(0.01, 0.1)),
            ..Default::default()
        };
        assert!(matches!(opts.check(), Err(OptionsError::Mesh(_))));
    }
}
