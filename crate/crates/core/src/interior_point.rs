//! Slack and bound-dual handling of the primal-dual interior-point method.

use serde::{Deserialize, Serialize};

use crate::grid::TimeGrid;
use crate::iterate::{Iterate, NewtonStep};
use crate::kkt::KktSystem;
use crate::model::SwitchedOcp;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IpOptions {
    /// Fraction-to-boundary margin.
    pub tau: f64,
    pub eps0: f64,
    pub eps_decay: f64,
    /// Perturbed-KKT l2 norm below which the barrier is decreased.
    pub decay_trigger: f64,
    pub eps_min: f64,
    pub slack_floor: f64,
    /// Keep the barrier parameter at `eps0`.
    pub fixed_barrier: bool,
}

impl Default for IpOptions {
    fn default() -> Self {
        Self {
            tau: 0.995,
            eps0: 0.1,
            eps_decay: 0.1,
            decay_trigger: 0.1,
            eps_min: 1e-9,
            slack_floor: 1e-4,
            fixed_barrier: false,
        }
    }
}

impl IpOptions {
    pub fn is_valid(&self) -> bool {
        self.tau > 0.0
            && self.tau < 1.0
            && self.eps_decay > 0.0
            && self.eps_decay < 1.0
            && self.eps_min > 0.0
            && self.eps0 >= self.eps_min
            && self.slack_floor > 0.0
    }
}

/// Sets slacks to `max(-g, floor)` and duals to `eps / slack`, for both the
/// path constraints and the dwell constraints.
pub fn initialize_slacks(ocp: &SwitchedOcp, grid: &TimeGrid, it: &mut Iterate, opts: &IpOptions) {
    let eps = it.eps;
    for i in 0..grid.num_stages() {
        let p = grid.phase_of(i);
        if let Some(g) = &ocp.phases[p].constraint {
            let gv = g.eval(&it.x[i], &it.u[i]);
            it.z[i] = gv.map(|v| (-v).max(opts.slack_floor));
            it.nu[i] = it.z[i].map(|z| eps / z);
        }
    }
    for p in 0..it.w.len() {
        let (a, b) = grid.phase_interval(p);
        it.w[p] = (b - a - ocp.phases[p].min_dwell).max(opts.slack_floor);
        it.upsilon[p] = eps / it.w[p];
    }
}

/// Raises slacks and bound duals below `floor` back to `floor`.
pub fn clip_slacks(it: &mut Iterate, floor: f64) {
    for v in it.z.iter_mut().chain(it.nu.iter_mut()) {
        v.apply(|e| *e = e.max(floor));
    }
    for v in it.w.iter_mut().chain(it.upsilon.iter_mut()) {
        *v = v.max(floor);
    }
}

/// Fills the slack and bound-dual directions from the primal directions
/// using the linearized slack and complementarity rows.
pub fn recover_bound_steps(sys: &KktSystem, step: &mut NewtonStep) {
    for (i, st) in sys.stages.iter().enumerate() {
        if let Some(g) = &st.constraint {
            let dz = -(&g.r_g + &g.gx * &step.dx[i] + &g.gu * &step.du[i]);
            let dnu = -(g.nu.component_mul(&dz) + &g.r_z).component_div(&g.z);
            step.dz[i] = dz;
            step.dnu[i] = dnu;
        }
    }
    let dwell: Vec<_> = sys.phases.iter().enumerate().filter_map(|(p, ph)| ph.dwell.as_ref().map(|d| (p, d))).collect();
    step.dw.resize(dwell.len(), 0.0);
    step.dupsilon.resize(dwell.len(), 0.0);
    for (p, d) in dwell {
        let dw = sys.delta(p, &step.dt) - d.r_delta;
        step.dw[p] = dw;
        step.dupsilon[p] = -(d.upsilon * dw + d.r_w) / d.w;
    }
}

fn max_step(values: impl Iterator<Item = (f64, f64)>, tau: f64) -> f64 {
    values
        .filter(|&(_, d)| d < 0.0)
        .map(|(v, d)| tau * v / -d)
        .fold(1.0, f64::min)
}

/// Largest step sizes in `(0, 1]` keeping every slack (primal) and bound dual
/// (dual) at least a fraction `1 - tau` of its current value.
pub fn fraction_to_boundary(it: &Iterate, step: &NewtonStep, tau: f64) -> (f64, f64) {
    let primal = it
        .z
        .iter()
        .zip(&step.dz)
        .flat_map(|(z, dz)| z.iter().copied().zip(dz.iter().copied()))
        .chain(it.w.iter().copied().zip(step.dw.iter().copied()));
    let dual = it
        .nu
        .iter()
        .zip(&step.dnu)
        .flat_map(|(v, dv)| v.iter().copied().zip(dv.iter().copied()))
        .chain(it.upsilon.iter().copied().zip(step.dupsilon.iter().copied()));
    (max_step(primal, tau), max_step(dual, tau))
}

/// Monotone barrier schedule: decrease by `eps_decay` (down to `eps_min`)
/// once the perturbed residual is below the trigger.
pub fn update_barrier(eps: f64, perturbed_l2: f64, opts: &IpOptions) -> f64 {
    if opts.fixed_barrier || perturbed_l2 >= opts.decay_trigger {
        eps
    } else {
        (eps * opts.eps_decay).max(opts.eps_min)
    }
}
