//! Perturbed KKT residuals of the transcribed NLP and the per-stage condensed
//! data of its Newton system.
//!
//! Sign conventions: the state equation of stage `i` is
//! `x_i + f(x_i, u_i) dt - x_next = 0` with multiplier `lam_next`, the initial
//! condition is `x0 - x_0 = 0` with multiplier `lam_0`, and a jump is
//! `f_j(x_pre) - x_{i_k} = 0` with multiplier `lam_{i_k}`. Every phase `p`
//! depends on the switching-time directions through
//! `delta_p = dt_p - dt_{p-1}` (with `dt_{-1} = dt_K = 0`), and the stage data
//! below is the derivative with respect to `delta_p`, which is why the
//! Hamiltonian sensitivities carry the factor `1 / N_p`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::TimeGrid;
use crate::iterate::{Iterate, NewtonStep};
use crate::model::{Dynamics, Matrix, SecondOrder, SwitchedOcp, SwitchingCondition, Vector};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HessianMode {
    Exact,
    GaussNewton,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KktError {
    #[error("iterate does not match the grid: {0}")]
    Dimension(String),
    #[error("{what} at index {index} is not strictly positive")]
    NonPositive { what: &'static str, index: usize },
}

// ---------------------------------------------------------------------------
// Condensed Newton-system data
// ---------------------------------------------------------------------------

/// Inequality data kept for recovering the slack and dual directions.
#[derive(Clone, Debug, PartialEq)]
pub struct ConstraintKkt {
    pub gx: Matrix,
    pub gu: Matrix,
    pub z: Vector,
    pub nu: Vector,
    pub r_g: Vector,
    pub r_z: Vector,
}

/// Linearized transformed switching condition `C dx + D du + E delta + e = 0`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionKkt {
    pub c: Matrix,
    pub d: Matrix,
    pub e: Vector,
    pub e_bar: Vector,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageKkt {
    pub phase: usize,
    pub qxx: Matrix,
    pub qxu: Matrix,
    pub quu: Matrix,
    pub a: Matrix,
    pub b: Matrix,
    pub f: Vector,
    pub hx: Vector,
    pub hu: Vector,
    pub h_bar: f64,
    /// Curvature in `delta` (nonzero only at switching-condition stages with
    /// exact Hessians).
    pub q_tt: f64,
    pub lx: Vector,
    pub lu: Vector,
    pub x_bar: Vector,
    pub constraint: Option<ConstraintKkt>,
    pub condition: Option<ConditionKkt>,
}

/// Auxiliary pre-jump point of a switch.
#[derive(Clone, Debug, PartialEq)]
pub struct JumpKkt {
    pub qxx: Matrix,
    pub a: Matrix,
    pub x_bar: Vector,
    pub lx: Vector,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DwellKkt {
    pub w: f64,
    pub upsilon: f64,
    pub r_delta: f64,
    pub r_w: f64,
}

/// Phase-level terms in `delta_p` from the condensed dwell constraint.
#[derive(Clone, Debug, PartialEq)]
pub struct PhaseKkt {
    pub q_tt: f64,
    pub q_lin: f64,
    pub dwell: Option<DwellKkt>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TerminalKkt {
    pub qxx: Matrix,
    pub lx: Vector,
}

/// The complete condensed Newton system in stage-wise form.
#[derive(Clone, Debug, PartialEq)]
pub struct KktSystem {
    pub nx: usize,
    pub nu: usize,
    pub phase_start: Vec<usize>,
    pub stages: Vec<StageKkt>,
    pub jumps: Vec<Option<JumpKkt>>,
    pub phases: Vec<PhaseKkt>,
    pub terminal: TerminalKkt,
    /// `x0 - x_0`: the initial-state residual.
    pub init_residual: Vector,
}

impl KktSystem {
    pub fn num_stages(&self) -> usize {
        self.stages.len()
    }

    pub fn num_phases(&self) -> usize {
        self.phases.len()
    }

    pub fn num_switches(&self) -> usize {
        self.phases.len() - 1
    }

    pub fn stage_range(&self, p: usize) -> std::ops::Range<usize> {
        self.phase_start[p]..self.phase_start[p + 1]
    }

    pub fn pre_jump_after(&self, i: usize) -> Option<usize> {
        let p = self.stages[i].phase;
        (p + 1 < self.phases.len() && i + 1 == self.phase_start[p + 1] && self.jumps[p].is_some()).then_some(p)
    }

    /// Derivative of `delta_p` with respect to `dt_j`.
    pub fn delta_coeff(&self, p: usize, j: usize) -> f64 {
        if j == p {
            1.0
        } else if j + 1 == p {
            -1.0
        } else {
            0.0
        }
    }

    /// `delta_p = dt_p - dt_{p-1}` for a step.
    pub fn delta(&self, p: usize, dt: &[f64]) -> f64 {
        let cur = dt.get(p).copied().unwrap_or(0.0);
        let prev = if p == 0 { 0.0 } else { dt[p - 1] };
        cur - prev
    }

    /// Largest magnitude over all system data, used to scale residual checks.
    pub fn data_scale(&self) -> f64 {
        let mut s = self.init_residual.amax().max(self.terminal.qxx.amax()).max(self.terminal.lx.amax());
        for st in &self.stages {
            for m in [&st.qxx, &st.qxu, &st.quu, &st.a, &st.b] {
                s = s.max(m.amax());
            }
            for v in [&st.f, &st.hx, &st.hu, &st.lx, &st.lu, &st.x_bar] {
                s = s.max(v.amax());
            }
            s = s.max(st.h_bar.abs()).max(st.q_tt.abs());
            if let Some(c) = &st.condition {
                s = s.max(c.c.amax()).max(c.d.amax()).max(c.e.amax()).max(c.e_bar.amax());
            }
        }
        for jp in self.jumps.iter().flatten() {
            s = s.max(jp.qxx.amax()).max(jp.a.amax()).max(jp.x_bar.amax()).max(jp.lx.amax());
        }
        for ph in &self.phases {
            s = s.max(ph.q_tt.abs()).max(ph.q_lin.abs());
        }
        s
    }
}

// ---------------------------------------------------------------------------
// Residuals
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct StageResidual {
    pub rx: Vector,
    pub ru: Vector,
    pub x_bar: Vector,
    pub r_g: Vector,
    pub r_z: Vector,
    pub e_bar: Option<Vector>,
    /// Contribution of the stage to the switching-time stationarity of its
    /// phase: `H / N_p` plus the switching-condition term.
    pub h_bar: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct JumpResidual {
    pub rx: Vector,
    pub x_bar: Vector,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ResidualNorms {
    pub perturbed_l2: f64,
    pub perturbed_max: f64,
    pub unperturbed_l2: f64,
    pub unperturbed_max: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct KktResidual {
    pub stages: Vec<StageResidual>,
    pub jumps: Vec<Option<JumpResidual>>,
    pub terminal: Vector,
    pub init: Vector,
    /// Stationarity with respect to each switching time.
    pub switches: Vec<f64>,
    pub r_delta: Vec<f64>,
    pub r_w: Vec<f64>,
    pub eps: f64,
    pub norms: ResidualNorms,
}

#[derive(Default)]
struct NormAcc {
    l2: f64,
    max: f64,
}

impl NormAcc {
    fn add(&mut self, v: f64) {
        self.l2 += v * v;
        self.max = self.max.max(v.abs());
    }

    fn add_all<'a>(&mut self, v: impl IntoIterator<Item = &'a f64>) {
        for x in v {
            self.add(*x);
        }
    }
}

impl KktResidual {
    fn compute_norms(&mut self) {
        let mut pert = NormAcc::default();
        let mut unpert = NormAcc::default();
        let mut both = |v: f64| {
            pert.add(v);
            unpert.add(v);
        };
        for s in &self.stages {
            s.rx.iter().chain(s.ru.iter()).chain(s.x_bar.iter()).chain(s.r_g.iter()).for_each(|&v| both(v));
            if let Some(e) = &s.e_bar {
                e.iter().for_each(|&v| both(v));
            }
        }
        for j in self.jumps.iter().flatten() {
            j.rx.iter().chain(j.x_bar.iter()).for_each(|&v| both(v));
        }
        self.terminal.iter().chain(self.init.iter()).for_each(|&v| both(v));
        self.switches.iter().chain(&self.r_delta).for_each(|&v| both(v));
        for s in &self.stages {
            pert.add_all(s.r_z.iter());
            for v in s.r_z.iter() {
                unpert.add(v + self.eps);
            }
        }
        pert.add_all(&self.r_w);
        for v in &self.r_w {
            unpert.add(v + self.eps);
        }
        self.norms = ResidualNorms {
            perturbed_l2: pert.l2.sqrt(),
            perturbed_max: pert.max,
            unperturbed_l2: unpert.l2.sqrt(),
            unperturbed_max: unpert.max,
        };
    }
}

/// Checks dimensions against the grid and strict positivity of slacks and
/// bound duals.
pub fn check_iterate(ocp: &SwitchedOcp, grid: &TimeGrid, it: &Iterate) -> Result<(), KktError> {
    let n = grid.num_stages();
    let k = grid.num_switches();
    let dim = |ok: bool, what: &str| {
        if ok {
            Ok(())
        } else {
            Err(KktError::Dimension(what.to_string()))
        }
    };
    dim(it.x.len() == n + 1 && it.lam.len() == n + 1, "states/costates need N + 1 entries")?;
    dim(it.u.len() == n && it.z.len() == n && it.nu.len() == n, "controls/slacks need N entries")?;
    dim(it.t.len() == k, "one switching time per switch")?;
    dim(
        it.x_pre.len() == k && it.lam_pre.len() == k && it.zeta.len() == k,
        "per-switch entries need K entries",
    )?;
    let num_dwell = if k > 0 { k + 1 } else { 0 };
    dim(it.w.len() == num_dwell && it.upsilon.len() == num_dwell, "dwell slacks need K + 1 entries")?;
    dim(it.x.iter().chain(&it.lam).all(|v| v.len() == ocp.nx), "state dimension")?;
    dim(it.u.iter().all(|v| v.len() == ocp.nu), "control dimension")?;
    for j in 0..k {
        let jump = ocp.has_jump(j);
        dim(it.x_pre[j].is_some() == jump && it.lam_pre[j].is_some() == jump, "pre-jump entries")?;
        dim(it.zeta[j].as_ref().map_or(0, |z| z.len()) == ocp.condition_dim(j), "condition multiplier")?;
    }
    for i in 0..n {
        let ng = ocp.phases[grid.phase_of(i)].num_constraints();
        dim(it.z[i].len() == ng && it.nu[i].len() == ng, "constraint slack dimension")?;
        if it.z[i].iter().any(|&v| !(v > 0.0)) {
            return Err(KktError::NonPositive { what: "inequality slack", index: i });
        }
        if it.nu[i].iter().any(|&v| !(v > 0.0)) {
            return Err(KktError::NonPositive { what: "inequality dual", index: i });
        }
    }
    for p in 0..num_dwell {
        if !(it.w[p] > 0.0) {
            return Err(KktError::NonPositive { what: "dwell slack", index: p });
        }
        if !(it.upsilon[p] > 0.0) {
            return Err(KktError::NonPositive { what: "dwell dual", index: p });
        }
    }
    if !(it.eps >= 0.0) {
        return Err(KktError::NonPositive { what: "barrier parameter", index: 0 });
    }
    Ok(())
}

/// Transformed switching condition: `e` evaluated at two nested Euler
/// predictions of the state from stage `i`.
pub struct ConditionEval {
    pub e: Vector,
    /// `(de/dx, de/du, de/d dt)` of the composed map.
    pub c: Matrix,
    pub d: Matrix,
    pub e_dt: Vector,
}

struct EulerChain {
    f0: Vector,
    f0x: Matrix,
    f0u: Matrix,
    y1: Vector,
    f1y: Matrix,
    f1u: Matrix,
    y2: Vector,
    j2x: Matrix,
    j2u: Matrix,
    j2t: Vector,
}

fn euler_chain(dyn_: &dyn Dynamics, x: &Vector, u: &Vector, dt: f64) -> EulerChain {
    let nx = x.len();
    let f0 = dyn_.eval(x, u);
    let (f0x, f0u) = dyn_.jacobians(x, u);
    let y1 = x + &f0 * dt;
    let f1 = dyn_.eval(&y1, u);
    let (f1y, f1u) = dyn_.jacobians(&y1, u);
    let y2 = &y1 + &f1 * dt;
    let m1 = Matrix::identity(nx, nx) + &f1y * dt;
    let j2x = &m1 * (Matrix::identity(nx, nx) + &f0x * dt);
    let j2u = &m1 * &f0u * dt + &f1u * dt;
    let j2t = &m1 * &f0 + &f1;
    EulerChain {
        f0,
        f0x,
        f0u,
        y1,
        f1y,
        f1u,
        y2,
        j2x,
        j2u,
        j2t,
    }
}

pub fn eval_condition(
    dyn_: &dyn Dynamics,
    cond: &dyn SwitchingCondition,
    x: &Vector,
    u: &Vector,
    dt: f64,
) -> ConditionEval {
    let ch = euler_chain(dyn_, x, u, dt);
    let je = cond.jacobian(&ch.y2);
    ConditionEval {
        e: cond.eval(&ch.y2),
        c: &je * &ch.j2x,
        d: &je * &ch.j2u,
        e_dt: &je * &ch.j2t,
    }
}

/// Hessian of `zeta^T e(y2(x, u, dt))` in the variables `(x, u, dt)`.
pub fn condition_hessian(
    dyn_: &dyn Dynamics,
    cond: &dyn SwitchingCondition,
    x: &Vector,
    u: &Vector,
    dt: f64,
    zeta: &Vector,
) -> Matrix {
    let (nx, nu) = (x.len(), u.len());
    let nz = nx + nu + 1;
    let ch = euler_chain(dyn_, x, u, dt);
    let je = cond.jacobian(&ch.y2);
    let w2 = je.tr_mul(zeta);

    let mut j1 = Matrix::zeros(nx, nz);
    j1.view_mut((0, 0), (nx, nx)).copy_from(&(Matrix::identity(nx, nx) + &ch.f0x * dt));
    j1.view_mut((0, nx), (nx, nu)).copy_from(&(&ch.f0u * dt));
    j1.set_column(nx + nu, &ch.f0);
    let mut j2 = Matrix::zeros(nx, nz);
    j2.view_mut((0, 0), (nx, nx)).copy_from(&ch.j2x);
    j2.view_mut((0, nx), (nx, nu)).copy_from(&ch.j2u);
    j2.set_column(nx + nu, &ch.j2t);

    // outer curvature of e
    let he = cond.weighted_hessian(&ch.y2, zeta);
    let mut hess = j2.tr_mul(&(he * &j2));

    // curvature of y1 weighted by d(w2^T y2)/d y1
    let omega = &w2 + ch.f1y.tr_mul(&w2) * dt;
    let h0 = dyn_.weighted_hessian(x, u, &omega);
    let mut y1_hess = Matrix::zeros(nz, nz);
    y1_hess.view_mut((0, 0), (nx, nx)).copy_from(&(&h0.xx * dt));
    y1_hess.view_mut((0, nx), (nx, nu)).copy_from(&(&h0.xu * dt));
    y1_hess.view_mut((nx, 0), (nu, nx)).copy_from(&(h0.xu.transpose() * dt));
    y1_hess.view_mut((nx, nx), (nu, nu)).copy_from(&(&h0.uu * dt));
    let cx = ch.f0x.tr_mul(&omega);
    let cu = ch.f0u.tr_mul(&omega);
    for r in 0..nx {
        y1_hess[(r, nx + nu)] = cx[r];
        y1_hess[(nx + nu, r)] = cx[r];
    }
    for r in 0..nu {
        y1_hess[(nx + r, nx + nu)] = cu[r];
        y1_hess[(nx + nu, nx + r)] = cu[r];
    }
    hess += y1_hess;

    // dt * d^2 [w2^T f(y1(z), u)] plus the product-rule terms in dt
    let h1 = dyn_.weighted_hessian(&ch.y1, u, &w2);
    let mut eu = Matrix::zeros(nu, nz);
    eu.view_mut((0, nx), (nu, nu)).fill_with_identity();
    let inner = j1.tr_mul(&(&h1.xx * &j1)) + j1.tr_mul(&(&h1.xu * &eu)) + eu.tr_mul(&(h1.xu.tr_mul(&j1))) + eu.tr_mul(&(&h1.uu * &eu));
    hess += inner * dt;
    let grad = j1.tr_mul(&ch.f1y.tr_mul(&w2)) + eu.tr_mul(&ch.f1u.tr_mul(&w2));
    for r in 0..nz {
        hess[(r, nx + nu)] += grad[r];
        hess[(nx + nu, r)] += grad[r];
    }
    hess
}

/// Residual blocks of stage `i`; depends only on stage `i`, the entries
/// following it and phase scalars.
pub fn stage_residual(ocp: &SwitchedOcp, grid: &TimeGrid, it: &Iterate, i: usize) -> StageResidual {
    let p = grid.phase_of(i);
    let phase = &ocp.phases[p];
    let dt = grid.dt[p];
    let np = grid.counts[p] as f64;
    let (x, u) = (&it.x[i], &it.u[i]);
    let lam_next = it.next_costate(grid, i);
    let f = phase.dynamics.eval(x, u);
    let (fx, fu) = phase.dynamics.jacobians(x, u);
    let (lx, lu) = phase.cost.gradient(x, u);
    let hamiltonian = phase.cost.eval(x, u) + lam_next.dot(&f);
    let mut rx = (lx + fx.tr_mul(lam_next)) * dt + lam_next - &it.lam[i];
    let mut ru = (lu + fu.tr_mul(lam_next)) * dt;
    let x_bar = x + &f * dt - it.next_state(grid, i);
    let (mut r_g, mut r_z) = (Vector::zeros(0), Vector::zeros(0));
    if let Some(g) = &phase.constraint {
        let (gx, gu) = g.jacobians(x, u);
        rx += gx.tr_mul(&it.nu[i]);
        ru += gu.tr_mul(&it.nu[i]);
        r_g = g.eval(x, u) + &it.z[i];
        r_z = it.z[i].component_mul(&it.nu[i]).add_scalar(-it.eps);
    }
    let mut h_bar = hamiltonian / np;
    let mut e_bar = None;
    if let Some(j) = grid.condition_at(i) {
        let cond = ocp.event(j).and_then(|e| e.switching_condition.as_ref()).expect("condition");
        let zeta = it.zeta[j].as_ref().expect("condition multiplier");
        let ev = eval_condition(phase.dynamics.as_ref(), cond.as_ref(), x, u, dt);
        rx += ev.c.tr_mul(zeta);
        ru += ev.d.tr_mul(zeta);
        h_bar += ev.e_dt.dot(zeta) / np;
        e_bar = Some(ev.e);
    }
    StageResidual {
        rx,
        ru,
        x_bar,
        r_g,
        r_z,
        e_bar,
        h_bar,
    }
}

fn jump_parts(ocp: &SwitchedOcp, grid: &TimeGrid, it: &Iterate, j: usize) -> (Vector, Matrix, Vector) {
    let event = ocp.event(j).expect("event");
    let x_pre = it.x_pre[j].as_ref().expect("pre-jump state");
    let (post, a) = match &event.jump_map {
        Some(m) => (m.eval(x_pre), m.jacobian(x_pre)),
        None => (x_pre.clone(), Matrix::identity(ocp.nx, ocp.nx)),
    };
    let start = grid.phase_start[j + 1];
    let x_bar = post - &it.x[start];
    let mut rx = a.tr_mul(&it.lam[start]) - it.lam_pre[j].as_ref().expect("pre-jump costate");
    if let Some(c) = &event.jump_cost {
        rx += c.gradient(x_pre);
    }
    (rx, a, x_bar)
}

/// Evaluates every block of the perturbed KKT conditions.
pub fn eval_residual(ocp: &SwitchedOcp, grid: &TimeGrid, it: &Iterate) -> Result<KktResidual, KktError> {
    check_iterate(ocp, grid, it)?;
    let stages: Vec<StageResidual> = (0..grid.num_stages()).map(|i| stage_residual(ocp, grid, it, i)).collect();
    Ok(finish_residual(ocp, grid, it, stages))
}

fn finish_residual(ocp: &SwitchedOcp, grid: &TimeGrid, it: &Iterate, stages: Vec<StageResidual>) -> KktResidual {
    let k = grid.num_switches();
    let jumps = (0..k)
        .map(|j| {
            ocp.has_jump(j).then(|| {
                let (rx, _, x_bar) = jump_parts(ocp, grid, it, j);
                JumpResidual { rx, x_bar }
            })
        })
        .collect();
    let n = grid.num_stages();
    let terminal = ocp.terminal_cost.gradient(&it.x[n]) - &it.lam[n];
    let init = &ocp.initial_state - &it.x[0];
    let (r_delta, r_w) = dwell_residuals(ocp, grid, it);
    let mut phase_sum = vec![0.0; grid.num_phases()];
    for (i, s) in stages.iter().enumerate() {
        phase_sum[grid.phase_of(i)] += s.h_bar;
    }
    for (p, v) in it.upsilon.iter().enumerate() {
        phase_sum[p] -= v;
    }
    let switches = (0..k).map(|j| phase_sum[j] - phase_sum[j + 1]).collect();
    let mut res = KktResidual {
        stages,
        jumps,
        terminal,
        init,
        switches,
        r_delta,
        r_w,
        eps: it.eps,
        norms: ResidualNorms::default(),
    };
    res.compute_norms();
    res
}

fn dwell_residuals(ocp: &SwitchedOcp, grid: &TimeGrid, it: &Iterate) -> (Vec<f64>, Vec<f64>) {
    let mut r_delta = Vec::with_capacity(it.w.len());
    let mut r_w = Vec::with_capacity(it.w.len());
    for p in 0..it.w.len() {
        let (a, b) = grid.phase_interval(p);
        r_delta.push(a + ocp.phases[p].min_dwell - b + it.w[p]);
        r_w.push(it.w[p] * it.upsilon[p] - it.eps);
    }
    (r_delta, r_w)
}

// ---------------------------------------------------------------------------
// Assembly
// ---------------------------------------------------------------------------

fn add_second_order(qxx: &mut Matrix, qxu: &mut Matrix, quu: &mut Matrix, h: &SecondOrder, scale: f64) {
    *qxx += &h.xx * scale;
    *qxu += &h.xu * scale;
    *quu += &h.uu * scale;
}

/// Condensed Newton-system data of stage `i`.
pub fn assemble_stage(ocp: &SwitchedOcp, grid: &TimeGrid, it: &Iterate, i: usize, mode: HessianMode) -> StageKkt {
    let p = grid.phase_of(i);
    let phase = &ocp.phases[p];
    let dt = grid.dt[p];
    let np = grid.counts[p] as f64;
    let (x, u) = (&it.x[i], &it.u[i]);
    let (nx, nu) = (ocp.nx, ocp.nu);
    let lam_next = it.next_costate(grid, i);
    let res = stage_residual(ocp, grid, it, i);

    let f = phase.dynamics.eval(x, u);
    let (fx, fu) = phase.dynamics.jacobians(x, u);
    let (glx, glu) = phase.cost.gradient(x, u);
    let lh = phase.cost.hessian(x, u);
    let (mut qxx, mut qxu, mut quu) = (&lh.xx * dt, &lh.xu * dt, &lh.uu * dt);
    let mut hx = (glx + fx.tr_mul(lam_next)) / np;
    let mut hu = (glu + fu.tr_mul(lam_next)) / np;
    let mut q_tt = 0.0;
    if mode == HessianMode::Exact {
        let fh = phase.dynamics.weighted_hessian(x, u, lam_next);
        add_second_order(&mut qxx, &mut qxu, &mut quu, &fh, dt);
    }

    let (mut lx, mut lu) = (res.rx.clone(), res.ru.clone());
    let mut constraint = None;
    if let Some(g) = &phase.constraint {
        let (gx, gu) = g.jacobians(x, u);
        let (z, nu_) = (&it.z[i], &it.nu[i]);
        if mode == HessianMode::Exact {
            let gh = g.weighted_hessian(x, u, nu_);
            add_second_order(&mut qxx, &mut qxu, &mut quu, &gh, 1.0);
        }
        let sigma = nu_.component_div(z);
        let sgx = Matrix::from_diagonal(&sigma) * &gx;
        let sgu = Matrix::from_diagonal(&sigma) * &gu;
        qxx += gx.tr_mul(&sgx);
        qxu += gx.tr_mul(&sgu);
        quu += gu.tr_mul(&sgu);
        let shift = (nu_.component_mul(&res.r_g) - &res.r_z).component_div(z);
        lx += gx.tr_mul(&shift);
        lu += gu.tr_mul(&shift);
        constraint = Some(ConstraintKkt {
            gx,
            gu,
            z: z.clone(),
            nu: nu_.clone(),
            r_g: res.r_g.clone(),
            r_z: res.r_z.clone(),
        });
    }

    let mut condition = None;
    if let Some(j) = grid.condition_at(i) {
        let cond = ocp.event(j).and_then(|e| e.switching_condition.as_ref()).expect("condition");
        let zeta = it.zeta[j].as_ref().expect("condition multiplier");
        let ev = eval_condition(phase.dynamics.as_ref(), cond.as_ref(), x, u, dt);
        if mode == HessianMode::Exact {
            let h = condition_hessian(phase.dynamics.as_ref(), cond.as_ref(), x, u, dt, zeta);
            qxx += h.view((0, 0), (nx, nx));
            qxu += h.view((0, nx), (nx, nu));
            quu += h.view((nx, nx), (nu, nu));
            hx += h.view((0, nx + nu), (nx, 1)) / np;
            hu += h.view((nx, nx + nu), (nu, 1)) / np;
            q_tt += h[(nx + nu, nx + nu)] / (np * np);
        }
        condition = Some(ConditionKkt {
            c: ev.c,
            d: ev.d,
            e: ev.e_dt / np,
            e_bar: ev.e,
        });
    }

    StageKkt {
        phase: p,
        qxx,
        qxu,
        quu,
        a: Matrix::identity(nx, nx) + fx * dt,
        b: fu * dt,
        f: f / np,
        hx,
        hu,
        h_bar: res.h_bar,
        q_tt,
        lx,
        lu,
        x_bar: res.x_bar,
        constraint,
        condition,
    }
}

fn assemble_jump(ocp: &SwitchedOcp, grid: &TimeGrid, it: &Iterate, j: usize, mode: HessianMode) -> JumpKkt {
    let event = ocp.event(j).expect("event");
    let x_pre = it.x_pre[j].as_ref().expect("pre-jump state");
    let (lx, a, x_bar) = jump_parts(ocp, grid, it, j);
    let mut qxx = match &event.jump_cost {
        Some(c) => c.hessian(x_pre),
        None => Matrix::zeros(ocp.nx, ocp.nx),
    };
    if mode == HessianMode::Exact {
        if let Some(m) = &event.jump_map {
            qxx += m.weighted_hessian(x_pre, &it.lam[grid.phase_start[j + 1]]);
        }
    }
    JumpKkt { qxx, a, x_bar, lx }
}

fn assemble_phases(ocp: &SwitchedOcp, grid: &TimeGrid, it: &Iterate) -> Vec<PhaseKkt> {
    let (r_delta, r_w) = dwell_residuals(ocp, grid, it);
    (0..grid.num_phases())
        .map(|p| match it.w.get(p) {
            Some(&w) => {
                let ups = it.upsilon[p];
                let q_bar = (ups * r_delta[p] - r_w[p]) / w;
                PhaseKkt {
                    q_tt: ups / w,
                    q_lin: -ups - q_bar,
                    dwell: Some(DwellKkt {
                        w,
                        upsilon: ups,
                        r_delta: r_delta[p],
                        r_w: r_w[p],
                    }),
                }
            }
            None => PhaseKkt {
                q_tt: 0.0,
                q_lin: 0.0,
                dwell: None,
            },
        })
        .collect()
}

/// Assembles the condensed Newton system at `it`. With `parallel` the stages
/// are assembled concurrently, each into its own slot.
pub fn assemble(
    ocp: &SwitchedOcp,
    grid: &TimeGrid,
    it: &Iterate,
    mode: HessianMode,
    parallel: bool,
) -> Result<KktSystem, KktError> {
    check_iterate(ocp, grid, it)?;
    let n = grid.num_stages();
    let stages: Vec<StageKkt> = if parallel {
        (0..n).into_par_iter().map(|i| assemble_stage(ocp, grid, it, i, mode)).collect()
    } else {
        (0..n).map(|i| assemble_stage(ocp, grid, it, i, mode)).collect()
    };
    let jumps = (0..grid.num_switches())
        .map(|j| ocp.has_jump(j).then(|| assemble_jump(ocp, grid, it, j, mode)))
        .collect();
    let terminal = TerminalKkt {
        qxx: ocp.terminal_cost.hessian(&it.x[n]),
        lx: ocp.terminal_cost.gradient(&it.x[n]) - &it.lam[n],
    };
    Ok(KktSystem {
        nx: ocp.nx,
        nu: ocp.nu,
        phase_start: grid.phase_start.clone(),
        stages,
        jumps,
        phases: assemble_phases(ocp, grid, it),
        terminal,
        init_residual: &ocp.initial_state - &it.x[0],
    })
}

// ---------------------------------------------------------------------------
// Linearized-system residual
// ---------------------------------------------------------------------------

/// Max-norm of the Newton system evaluated at `step`.
///
/// With `include_bounds` the uncondensed system is used: inequality and dwell
/// rows appear explicitly together with the slack and bound-dual directions.
/// Otherwise the condensed rows are evaluated and those directions are ignored.
pub fn linear_residual(sys: &KktSystem, step: &NewtonStep, include_bounds: bool) -> f64 {
    let mut acc = NormAcc::default();
    let n = sys.num_stages();
    let dt = &step.dt;
    let next = |i: usize| match sys.pre_jump_after(i) {
        Some(j) => (step.dx_pre[j].as_ref().unwrap(), step.dlam_pre[j].as_ref().unwrap()),
        None => (&step.dx[i + 1], &step.dlam[i + 1]),
    };

    acc.add_all((&sys.init_residual - &step.dx[0]).iter());
    let mut delta_rows = vec![0.0; sys.num_phases()];
    for (i, st) in sys.stages.iter().enumerate() {
        let p = st.phase;
        let delta = sys.delta(p, dt);
        let (dx, du) = (&step.dx[i], &step.du[i]);
        let (dx_next, dlam_next) = next(i);
        let dyn_row = &st.a * dx + &st.b * du + &st.f * delta + &st.x_bar - dx_next;
        acc.add_all(dyn_row.iter());

        let mut x_row = &st.qxx * dx + &st.qxu * du + &st.hx * delta + st.a.tr_mul(dlam_next) - &step.dlam[i] + &st.lx;
        let mut u_row = st.qxu.tr_mul(dx) + &st.quu * du + &st.hu * delta + st.b.tr_mul(dlam_next) + &st.lu;
        let mut d_row = st.hx.dot(dx) + st.hu.dot(du) + st.q_tt * delta + st.f.dot(dlam_next) + st.h_bar;
        if let Some(c) = &st.condition {
            let j = p;
            let dz = step.dzeta[j].as_ref().unwrap();
            x_row += c.c.tr_mul(dz);
            u_row += c.d.tr_mul(dz);
            d_row += c.e.dot(dz);
            let c_row = &c.c * dx + &c.d * du + &c.e * delta + &c.e_bar;
            acc.add_all(c_row.iter());
        }
        if let (true, Some(g)) = (include_bounds, &st.constraint) {
            // undo the condensation and add the explicit rows
            let sigma = g.nu.component_div(&g.z);
            let sig = Matrix::from_diagonal(&sigma);
            let gdx = &g.gx * dx + &g.gu * du;
            let shift = (g.nu.component_mul(&g.r_g) - &g.r_z).component_div(&g.z);
            x_row -= g.gx.tr_mul(&(&sig * &gdx)) + g.gx.tr_mul(&shift);
            u_row -= g.gu.tr_mul(&(&sig * &gdx)) + g.gu.tr_mul(&shift);
            x_row += g.gx.tr_mul(&step.dnu[i]);
            u_row += g.gu.tr_mul(&step.dnu[i]);
            let g_row = &gdx + &step.dz[i] + &g.r_g;
            let z_row = g.nu.component_mul(&step.dz[i]) + g.z.component_mul(&step.dnu[i]) + &g.r_z;
            acc.add_all(g_row.iter());
            acc.add_all(z_row.iter());
        }
        acc.add_all(x_row.iter());
        acc.add_all(u_row.iter());
        delta_rows[p] += d_row;
    }
    for (j, jp) in sys.jumps.iter().enumerate() {
        let Some(jp) = jp else { continue };
        let start = sys.phase_start[j + 1];
        let dx_pre = step.dx_pre[j].as_ref().unwrap();
        let dlam_pre = step.dlam_pre[j].as_ref().unwrap();
        acc.add_all((&jp.a * dx_pre + &jp.x_bar - &step.dx[start]).iter());
        acc.add_all((&jp.qxx * dx_pre + jp.a.tr_mul(&step.dlam[start]) - dlam_pre + &jp.lx).iter());
    }
    acc.add_all((&sys.terminal.qxx * &step.dx[n] - &step.dlam[n] + &sys.terminal.lx).iter());

    for (p, ph) in sys.phases.iter().enumerate() {
        let delta = sys.delta(p, dt);
        match (include_bounds, &ph.dwell) {
            (true, Some(d)) => {
                delta_rows[p] += -d.upsilon - step.dupsilon[p];
                acc.add(-delta + step.dw[p] + d.r_delta);
                acc.add(d.upsilon * step.dw[p] + d.w * step.dupsilon[p] + d.r_w);
            }
            _ => delta_rows[p] += ph.q_tt * delta + ph.q_lin,
        }
    }
    for j in 0..sys.num_switches() {
        acc.add(delta_rows[j] - delta_rows[j + 1]);
    }
    acc.max
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::build_grid;
    use crate::problems::{bouncing_mass, BouncingMassConfig, Subsystem};
    use nalgebra::dvector;

    fn fd_hessian(f: impl Fn(&Vector) -> f64, z: &Vector, h: f64) -> Matrix {
        let n = z.len();
        let mut m = Matrix::zeros(n, n);
        for a in 0..n {
            for b in 0..n {
                let e = |k: usize, s: f64| {
                    let mut v = z.clone();
                    v[k] += s;
                    v
                };
                let pp = f(&e(b, h).map_with_location(|r, _, v| if r == a { v + h } else { v }));
                let pm = f(&e(b, -h).map_with_location(|r, _, v| if r == a { v + h } else { v }));
                let mp = f(&e(b, h).map_with_location(|r, _, v| if r == a { v - h } else { v }));
                let mm = f(&e(b, -h).map_with_location(|r, _, v| if r == a { v - h } else { v }));
                m[(a, b)] = (pp - pm - mp + mm) / (4.0 * h * h);
            }
        }
        m
    }

    #[test]
    fn condition_hessian_matches_finite_differences() {
        struct Curved;
        impl SwitchingCondition for Curved {
            fn dim(&self) -> usize {
                2
            }
            fn eval(&self, x: &Vector) -> Vector {
                dvector![x[0] * x[0] + x[1].sin(), x[0] * x[1]]
            }
            fn jacobian(&self, x: &Vector) -> Matrix {
                Matrix::from_row_slice(2, 2, &[2.0 * x[0], x[1].cos(), x[1], x[0]])
            }
            fn weighted_hessian(&self, x: &Vector, w: &Vector) -> Matrix {
                Matrix::from_row_slice(2, 2, &[2.0 * w[0], w[1], w[1], -w[0] * x[1].sin()])
            }
        }
        let dynamics = Subsystem::Second;
        let zeta = dvector![0.7, -1.3];
        let z0 = dvector![0.4, -0.8, 0.9, 0.3];
        let phi = |z: &Vector| {
            let x = z.rows(0, 2).into_owned();
            let u = z.rows(2, 1).into_owned();
            eval_condition(&dynamics, &Curved, &x, &u, z[3]).e.dot(&zeta)
        };
        let x = z0.rows(0, 2).into_owned();
        let u = z0.rows(2, 1).into_owned();
        let analytic = condition_hessian(&dynamics, &Curved, &x, &u, z0[3], &zeta);
        let numeric = fd_hessian(phi, &z0, 1e-4);
        assert!((&analytic - &numeric).amax() < 1e-5, "{analytic}\n{numeric}");

        // first derivatives
        let ev = eval_condition(&dynamics, &Curved, &x, &u, z0[3]);
        let h = 1e-6;
        for k in 0..4 {
            let mut zp = z0.clone();
            zp[k] += h;
            let mut zm = z0.clone();
            zm[k] -= h;
            let eval = |z: &Vector| {
                eval_condition(&dynamics, &Curved, &z.rows(0, 2).into_owned(), &z.rows(2, 1).into_owned(), z[3]).e
            };
            let num = (eval(&zp) - eval(&zm)) / (2.0 * h);
            let ana = match k {
                0 | 1 => ev.c.column(k).into_owned(),
                2 => ev.d.column(0).into_owned(),
                _ => ev.e_dt.clone(),
            };
            assert!((num - ana).amax() < 1e-7);
        }
    }

    #[test]
    fn complementarity_residual_vanishes_on_central_path() {
        let cfg = BouncingMassConfig::default();
        let ocp = bouncing_mass(&cfg);
        let grid = build_grid(&ocp, &cfg.split, &[cfg.initial_switch]).unwrap();
        let eps: f64 = 0.04;
        let mut it = Iterate::constant(&ocp, &grid, &ocp.initial_state, &Vector::zeros(1), eps);
        for (z, nu) in it.z.iter_mut().zip(it.nu.iter_mut()) {
            z.fill(eps.sqrt());
            nu.fill(eps.sqrt());
        }
        let res = eval_residual(&ocp, &grid, &it).unwrap();
        assert!(res.stages.iter().all(|s| s.r_z.amax() < 1e-16));
    }

    #[test]
    fn rejects_nonpositive_slack() {
        let cfg = BouncingMassConfig::default();
        let ocp = bouncing_mass(&cfg);
        let grid = build_grid(&ocp, &cfg.split, &[cfg.initial_switch]).unwrap();
        let mut it = Iterate::constant(&ocp, &grid, &ocp.initial_state, &Vector::zeros(1), 0.1);
        it.z[3][1] = 0.0;
        assert_eq!(
            eval_residual(&ocp, &grid, &it).unwrap_err(),
            KktError::NonPositive { what: "inequality slack", index: 3 }
        );
    }
}
