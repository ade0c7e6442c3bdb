//! Direct multiple-shooting discretization: per-phase uniform grids whose step
//! sizes follow the switching times, forward-Euler rollout and mesh
//! refinement.

use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::iterate::Iterate;
use crate::model::{SwitchedOcp, Vector};

/// Errors raised while building or transforming a grid. Phase numbers are one
/// based, matching the problem's phase numbering in reports.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum GridError {
    #[error("expected {expected} per-phase grid counts, got {got}")]
    CountMismatch { expected: usize, got: usize },
    #[error("phase {phase} has zero grid points")]
    ZeroCount { phase: usize },
    #[error("expected {expected} switching times, got {got}")]
    TimesMismatch { expected: usize, got: usize },
    #[error("switching times are not strictly increasing inside the horizon at phase {phase}")]
    NonIncreasing { phase: usize },
    #[error("phase {phase} ends with a switching condition and needs at least 2 grid points")]
    ConditionStageTooShort { phase: usize },
    #[error("dynamics evaluation failed at stage {stage}")]
    NonFinite { stage: usize },
    #[error("invalid mesh thresholds: need dt_max > dt_min > 0, got dt_max = {dt_max}, dt_min = {dt_min}")]
    Thresholds { dt_max: f64, dt_min: f64 },
}

/// Discretization of the horizon into `K + 1` phases with `N_k` uniform
/// Euler steps each. Stage `N` (terminal) belongs to no phase.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub t0: f64,
    pub tf: f64,
    pub counts: Vec<usize>,
    pub switching_times: Vec<f64>,
    pub dt: Vec<f64>,
    /// First stage of every phase, followed by `N`.
    pub phase_start: Vec<usize>,
    /// Per switch: the grid index `i_k` whose pre-jump copy is an auxiliary point.
    pub jump_stages: Vec<Option<usize>>,
    /// Per switch: the stage carrying the transformed switching condition.
    pub condition_stages: Vec<Option<usize>>,
    stage_phase: Vec<usize>,
}

impl TimeGrid {
    pub fn num_stages(&self) -> usize {
        self.stage_phase.len()
    }

    pub fn num_phases(&self) -> usize {
        self.counts.len()
    }

    pub fn num_switches(&self) -> usize {
        self.counts.len() - 1
    }

    /// Phase containing stage `i`; the terminal stage maps to the last phase.
    pub fn phase_of(&self, i: usize) -> usize {
        self.stage_phase.get(i).copied().unwrap_or(self.counts.len() - 1)
    }

    pub fn stage_range(&self, phase: usize) -> Range<usize> {
        self.phase_start[phase]..self.phase_start[phase + 1]
    }

    /// `(t_{k-1}, t_k)` of a zero-based phase.
    pub fn phase_interval(&self, phase: usize) -> (f64, f64) {
        let start = if phase == 0 { self.t0 } else { self.switching_times[phase - 1] };
        let end = self.switching_times.get(phase).copied().unwrap_or(self.tf);
        (start, end)
    }

    /// Time of grid node `i` (the post-jump node at a switch).
    pub fn node_time(&self, i: usize) -> f64 {
        if i >= self.num_stages() {
            return self.tf;
        }
        let p = self.phase_of(i);
        self.phase_interval(p).0 + (i - self.phase_start[p]) as f64 * self.dt[p]
    }

    /// Switch index `j` when stage `i` is the last stage of phase `j` and the
    /// switch has a pre-jump auxiliary point.
    pub fn pre_jump_after(&self, i: usize) -> Option<usize> {
        let p = self.phase_of(i);
        if p + 1 < self.counts.len() && i + 1 == self.phase_start[p + 1] && self.jump_stages[p].is_some() {
            Some(p)
        } else {
            None
        }
    }

    /// Switch index `j` when stage `i` carries the transformed switching condition.
    pub fn condition_at(&self, i: usize) -> Option<usize> {
        let p = self.phase_of(i);
        (p < self.condition_stages.len() && self.condition_stages[p] == Some(i)).then_some(p)
    }

    /// Same structure with new switching times.
    pub fn with_switching_times(&self, times: &[f64]) -> Result<TimeGrid, GridError> {
        check_times(self.t0, self.tf, times, self.counts.len())?;
        let mut grid = self.clone();
        grid.switching_times = times.to_vec();
        grid.update_steps();
        Ok(grid)
    }

    fn update_steps(&mut self) {
        for p in 0..self.counts.len() {
            let (a, b) = self.phase_interval(p);
            self.dt[p] = (b - a) / self.counts[p] as f64;
        }
    }
}

fn check_times(t0: f64, tf: f64, times: &[f64], num_phases: usize) -> Result<(), GridError> {
    if times.len() + 1 != num_phases {
        return Err(GridError::TimesMismatch {
            expected: num_phases - 1,
            got: times.len(),
        });
    }
    let mut prev = t0;
    for (j, &t) in times.iter().chain(std::iter::once(&tf)).enumerate() {
        if !(t > prev) {
            return Err(GridError::NonIncreasing { phase: j + 1 });
        }
        prev = t;
    }
    Ok(())
}

/// Builds the grid for per-phase counts and switching times.
pub fn build_grid(ocp: &SwitchedOcp, counts: &[usize], times: &[f64]) -> Result<TimeGrid, GridError> {
    let num_phases = ocp.num_phases();
    if counts.len() != num_phases {
        return Err(GridError::CountMismatch {
            expected: num_phases,
            got: counts.len(),
        });
    }
    if let Some(p) = counts.iter().position(|&c| c == 0) {
        return Err(GridError::ZeroCount { phase: p + 1 });
    }
    check_times(ocp.t0, ocp.tf, times, num_phases)?;

    let mut phase_start = Vec::with_capacity(num_phases + 1);
    let mut stage_phase = Vec::new();
    for (p, &c) in counts.iter().enumerate() {
        phase_start.push(stage_phase.len());
        stage_phase.extend(std::iter::repeat(p).take(c));
    }
    phase_start.push(stage_phase.len());

    let mut jump_stages = Vec::with_capacity(num_phases - 1);
    let mut condition_stages = Vec::with_capacity(num_phases - 1);
    for j in 0..num_phases - 1 {
        let boundary = phase_start[j + 1];
        jump_stages.push(ocp.has_jump(j).then_some(boundary));
        if ocp.condition_dim(j) > 0 {
            if counts[j] < 2 {
                return Err(GridError::ConditionStageTooShort { phase: j + 1 });
            }
            condition_stages.push(Some(boundary - 2));
        } else {
            condition_stages.push(None);
        }
    }

    let mut grid = TimeGrid {
        t0: ocp.t0,
        tf: ocp.tf,
        counts: counts.to_vec(),
        switching_times: times.to_vec(),
        dt: vec![0.0; num_phases],
        phase_start,
        jump_stages,
        condition_stages,
        stage_phase,
    };
    grid.update_steps();
    Ok(grid)
}

/// Forward-Euler state trajectory, including pre-jump auxiliary states.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub x: Vec<Vector>,
    pub x_pre: Vec<Option<Vector>>,
}

/// Integrates `x_{i+1} = x_i + f_k(x_i, u_i) dt_k` from `x0`, applying jump
/// maps at the auxiliary pre-jump points.
pub fn rollout(ocp: &SwitchedOcp, grid: &TimeGrid, x0: &Vector, u: &[Vector]) -> Result<Trajectory, GridError> {
    let n = grid.num_stages();
    assert_eq!(u.len(), n, "one control per non-terminal stage");
    let mut x = Vec::with_capacity(n + 1);
    let mut x_pre = vec![None; grid.num_switches()];
    x.push(x0.clone());
    for i in 0..n {
        let p = grid.phase_of(i);
        let next = &x[i] + ocp.phases[p].dynamics.eval(&x[i], &u[i]) * grid.dt[p];
        if next.iter().any(|v| !v.is_finite()) {
            return Err(GridError::NonFinite { stage: i });
        }
        let next = match grid.pre_jump_after(i) {
            Some(j) => {
                let post = match ocp.event(j).and_then(|e| e.jump_map.as_ref()) {
                    Some(map) => map.eval(&next),
                    None => next.clone(),
                };
                if post.iter().any(|v| !v.is_finite()) {
                    return Err(GridError::NonFinite { stage: i + 1 });
                }
                x_pre[j] = Some(next);
                post
            }
            None => next,
        };
        x.push(next);
    }
    Ok(Trajectory { x, x_pre })
}

// ---------------------------------------------------------------------------
// Mesh refinement
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MeshPolicy {
    /// Every phase independently grows or shrinks.
    AdaptiveN,
    /// Grid points added to one phase are removed from the others.
    FixedN,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeshOptions {
    pub dt_max: f64,
    pub dt_min: f64,
    pub policy: MeshPolicy,
}

impl MeshOptions {
    pub fn new(dt_max: f64, dt_min: f64) -> Self {
        Self {
            dt_max,
            dt_min,
            policy: MeshPolicy::AdaptiveN,
        }
    }

    pub fn check(&self) -> Result<(), GridError> {
        if self.dt_max > self.dt_min && self.dt_min > 0.0 {
            Ok(())
        } else {
            Err(GridError::Thresholds {
                dt_max: self.dt_max,
                dt_min: self.dt_min,
            })
        }
    }

    pub fn satisfied_by(&self, grid: &TimeGrid) -> bool {
        grid.dt.iter().all(|&h| h <= self.dt_max && h >= self.dt_min)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RefineMode {
    Grow,
    Shrink,
    Both,
}

#[derive(Clone, Debug)]
pub struct Refinement {
    pub grid: TimeGrid,
    pub iterate: Iterate,
    /// Zero-based phases whose count changed.
    pub changed: Vec<usize>,
    /// Zero-based phases that could not reach `dt_min` without dropping below
    /// their minimum count.
    pub flagged: Vec<usize>,
}

fn min_count(grid: &TimeGrid, p: usize) -> usize {
    if grid.condition_stages.get(p).is_some_and(Option::is_some) {
        2
    } else {
        1
    }
}

/// Grows phases with steps above `dt_max` and shrinks phases with steps below
/// `dt_min`, then transfers the iterate onto the new grid.
pub fn refine(ocp: &SwitchedOcp, grid: &TimeGrid, it: &Iterate, opts: &MeshOptions) -> Result<Refinement, GridError> {
    refine_with(ocp, grid, it, opts, RefineMode::Both)
}

pub fn refine_with(
    ocp: &SwitchedOcp,
    grid: &TimeGrid,
    it: &Iterate,
    opts: &MeshOptions,
    mode: RefineMode,
) -> Result<Refinement, GridError> {
    opts.check()?;
    let num_phases = grid.num_phases();
    let mut counts = grid.counts.clone();
    let mut flagged = Vec::new();
    let mut grown = vec![false; num_phases];
    let mut shrunk = vec![false; num_phases];
    for p in 0..num_phases {
        let (a, b) = grid.phase_interval(p);
        let len = b - a;
        let h = grid.dt[p];
        if h > opts.dt_max && mode != RefineMode::Shrink {
            counts[p] = (len / opts.dt_max).ceil() as usize;
            grown[p] = true;
        } else if h < opts.dt_min && mode != RefineMode::Grow {
            let floor = min_count(grid, p);
            let target = (len / opts.dt_min).floor() as usize;
            if target < floor {
                flagged.push(p);
            }
            counts[p] = target.max(floor);
            shrunk[p] = counts[p] < grid.counts[p];
        }
    }

    if opts.policy == MeshPolicy::FixedN {
        rebalance(grid, &mut counts, &grown, &shrunk);
    }

    let changed: Vec<usize> = (0..num_phases).filter(|&p| counts[p] != grid.counts[p]).collect();
    if changed.is_empty() {
        return Ok(Refinement {
            grid: grid.clone(),
            iterate: it.clone(),
            changed,
            flagged,
        });
    }
    let new_grid = build_grid(ocp, &counts, &grid.switching_times)?;
    let iterate = transfer(grid, &new_grid, it);
    Ok(Refinement {
        grid: new_grid,
        iterate,
        changed,
        flagged,
    })
}

/// Restores the original total count by taking points from (or giving points
/// to) the phases that were not refined, smallest steps first.
fn rebalance(grid: &TimeGrid, counts: &mut [usize], grown: &[bool], shrunk: &[bool]) {
    let target: usize = grid.counts.iter().sum();
    let len = |p: usize| {
        let (a, b) = grid.phase_interval(p);
        b - a
    };
    loop {
        let total: usize = counts.iter().sum();
        if total == target {
            break;
        }
        let pick = if total > target {
            (0..counts.len())
                .filter(|&p| !grown[p] && counts[p] > min_count(grid, p))
                .min_by(|&a, &b| (len(a) / counts[a] as f64).total_cmp(&(len(b) / counts[b] as f64)))
        } else {
            (0..counts.len())
                .filter(|&p| !shrunk[p])
                .max_by(|&a, &b| (len(a) / counts[a] as f64).total_cmp(&(len(b) / counts[b] as f64)))
        };
        match pick {
            Some(p) if total > target => counts[p] -= 1,
            Some(p) => counts[p] += 1,
            None => break,
        }
    }
}

/// Moves an iterate between two grids with identical switching times:
/// piecewise-linear in time for the state, zero-order hold for controls,
/// costates and inequality slacks/duals; per-switch and per-phase variables
/// are carried over.
pub fn transfer(old: &TimeGrid, new: &TimeGrid, it: &Iterate) -> Iterate {
    let n_new = new.num_stages();
    let mut x = Vec::with_capacity(n_new + 1);
    let mut u = Vec::with_capacity(n_new);
    let mut lam = Vec::with_capacity(n_new + 1);
    let mut z = Vec::with_capacity(n_new);
    let mut nu = Vec::with_capacity(n_new);
    for p in 0..new.num_phases() {
        let old_range = old.stage_range(p);
        let n_old = old.counts[p];
        // node at the end of phase p on the old grid
        let end_state = if p + 1 < old.num_phases() {
            match &it.x_pre[p] {
                Some(pre) => pre,
                None => &it.x[old_range.end],
            }
        } else {
            &it.x[old_range.end]
        };
        let old_node = |k: usize| if k < n_old { &it.x[old_range.start + k] } else { end_state };
        for k in 0..new.counts[p] {
            let s = k as f64 * n_old as f64 / new.counts[p] as f64;
            let lo = (s.floor() as usize).min(n_old - 1);
            let frac = s - lo as f64;
            x.push(old_node(lo) * (1.0 - frac) + old_node(lo + 1) * frac);
            let i = old_range.start + lo;
            u.push(it.u[i].clone());
            lam.push(it.lam[i].clone());
            z.push(it.z[i].clone());
            nu.push(it.nu[i].clone());
        }
    }
    x.push(it.x[old.num_stages()].clone());
    lam.push(it.lam[old.num_stages()].clone());
    Iterate {
        x,
        x_pre: it.x_pre.clone(),
        u,
        t: it.t.clone(),
        lam,
        lam_pre: it.lam_pre.clone(),
        zeta: it.zeta.clone(),
        z,
        nu,
        w: it.w.clone(),
        upsilon: it.upsilon.clone(),
        eps: it.eps,
    }
}
