//! Primal-dual iterates of the interior-point NLP and Newton directions.

use serde::{Deserialize, Serialize};

use crate::grid::TimeGrid;
use crate::model::{SwitchedOcp, Vector};

/// All primal and dual variables at one Newton iterate.
///
/// Per-switch quantities (`x_pre`, `lam_pre`, `zeta`) are indexed by the
/// switch `j` between phase `j` and `j + 1` and are `None` where the event
/// has no jump or no switching condition. `w` and `upsilon` hold one entry per
/// phase (the dwell constraint of that phase) and are empty when the problem
/// has no switches.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Iterate {
    pub x: Vec<Vector>,
    pub x_pre: Vec<Option<Vector>>,
    pub u: Vec<Vector>,
    pub t: Vec<f64>,
    pub lam: Vec<Vector>,
    pub lam_pre: Vec<Option<Vector>>,
    pub zeta: Vec<Option<Vector>>,
    pub z: Vec<Vector>,
    pub nu: Vec<Vector>,
    pub w: Vec<f64>,
    pub upsilon: Vec<f64>,
    pub eps: f64,
}

impl Iterate {
    /// Constant primal guess with zero multipliers. Slacks and bound duals are
    /// set to one; `interior_point::initialize_slacks` gives them meaningful
    /// values.
    pub fn constant(ocp: &SwitchedOcp, grid: &TimeGrid, x: &Vector, u: &Vector, eps: f64) -> Self {
        let n = grid.num_stages();
        let k = grid.num_switches();
        let nx = ocp.nx;
        let x_pre = (0..k).map(|j| ocp.has_jump(j).then(|| x.clone())).collect();
        let lam_pre = (0..k).map(|j| ocp.has_jump(j).then(|| Vector::zeros(nx))).collect();
        let zeta = (0..k)
            .map(|j| {
                let ne = ocp.condition_dim(j);
                (ne > 0).then(|| Vector::zeros(ne))
            })
            .collect();
        let slack = |i: usize| Vector::from_element(ocp.phases[grid.phase_of(i)].num_constraints(), 1.0);
        let num_dwell = if k > 0 { k + 1 } else { 0 };
        Self {
            x: vec![x.clone(); n + 1],
            x_pre,
            u: vec![u.clone(); n],
            t: grid.switching_times.clone(),
            lam: vec![Vector::zeros(nx); n + 1],
            lam_pre,
            zeta,
            z: (0..n).map(slack).collect(),
            nu: (0..n).map(slack).collect(),
            w: vec![1.0; num_dwell],
            upsilon: vec![1.0; num_dwell],
            eps,
        }
    }

    pub fn num_stages(&self) -> usize {
        self.u.len()
    }

    /// State at the end of stage `i`'s dynamics: the pre-jump state when the
    /// stage closes a phase with a jump, otherwise `x[i + 1]`.
    pub fn next_state(&self, grid: &TimeGrid, i: usize) -> &Vector {
        match grid.pre_jump_after(i) {
            Some(j) => self.x_pre[j].as_ref().expect("pre-jump state"),
            None => &self.x[i + 1],
        }
    }

    pub fn next_costate(&self, grid: &TimeGrid, i: usize) -> &Vector {
        match grid.pre_jump_after(i) {
            Some(j) => self.lam_pre[j].as_ref().expect("pre-jump costate"),
            None => &self.lam[i + 1],
        }
    }
}

/// Newton direction for every variable of an [`Iterate`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NewtonStep {
    pub dx: Vec<Vector>,
    pub dx_pre: Vec<Option<Vector>>,
    pub du: Vec<Vector>,
    pub dt: Vec<f64>,
    pub dlam: Vec<Vector>,
    pub dlam_pre: Vec<Option<Vector>>,
    pub dzeta: Vec<Option<Vector>>,
    pub dz: Vec<Vector>,
    pub dnu: Vec<Vector>,
    pub dw: Vec<f64>,
    pub dupsilon: Vec<f64>,
}

fn zeros_like(v: &[Vector]) -> Vec<Vector> {
    v.iter().map(|e| Vector::zeros(e.len())).collect()
}

fn zeros_like_opt(v: &[Option<Vector>]) -> Vec<Option<Vector>> {
    v.iter().map(|e| e.as_ref().map(|e| Vector::zeros(e.len()))).collect()
}

impl NewtonStep {
    pub fn zeros_like(it: &Iterate) -> Self {
        Self {
            dx: zeros_like(&it.x),
            dx_pre: zeros_like_opt(&it.x_pre),
            du: zeros_like(&it.u),
            dt: vec![0.0; it.t.len()],
            dlam: zeros_like(&it.lam),
            dlam_pre: zeros_like_opt(&it.lam_pre),
            dzeta: zeros_like_opt(&it.zeta),
            dz: zeros_like(&it.z),
            dnu: zeros_like(&it.nu),
            dw: vec![0.0; it.w.len()],
            dupsilon: vec![0.0; it.upsilon.len()],
        }
    }

    /// Max-norm over the primal and equality-dual directions.
    pub fn max_abs(&self) -> f64 {
        let vecs = self.dx.iter().chain(&self.du).chain(&self.dlam);
        let opts = self.dx_pre.iter().chain(&self.dlam_pre).chain(&self.dzeta).flatten();
        vecs.chain(opts)
            .map(|v| v.amax())
            .chain(self.dt.iter().map(|v| v.abs()))
            .fold(0.0, f64::max)
    }
}

fn axpy(v: &mut [Vector], alpha: f64, d: &[Vector]) {
    for (a, b) in v.iter_mut().zip(d) {
        a.axpy(alpha, b, 1.0);
    }
}

fn axpy_opt(v: &mut [Option<Vector>], alpha: f64, d: &[Option<Vector>]) {
    for (a, b) in v.iter_mut().zip(d) {
        if let (Some(a), Some(b)) = (a.as_mut(), b.as_ref()) {
            a.axpy(alpha, b, 1.0);
        }
    }
}

fn axpy_scalar(v: &mut [f64], alpha: f64, d: &[f64]) {
    for (a, b) in v.iter_mut().zip(d) {
        *a += alpha * b;
    }
}

impl Iterate {
    /// `v <- v + alpha * dv`, with `alpha_dual` for the bound duals `nu` and
    /// `upsilon` and `alpha_primal` for everything else.
    pub fn apply(&mut self, step: &NewtonStep, alpha_primal: f64, alpha_dual: f64) {
        axpy(&mut self.x, alpha_primal, &step.dx);
        axpy_opt(&mut self.x_pre, alpha_primal, &step.dx_pre);
        axpy(&mut self.u, alpha_primal, &step.du);
        axpy_scalar(&mut self.t, alpha_primal, &step.dt);
        axpy(&mut self.lam, alpha_primal, &step.dlam);
        axpy_opt(&mut self.lam_pre, alpha_primal, &step.dlam_pre);
        axpy_opt(&mut self.zeta, alpha_primal, &step.dzeta);
        axpy(&mut self.z, alpha_primal, &step.dz);
        axpy_scalar(&mut self.w, alpha_primal, &step.dw);
        axpy(&mut self.nu, alpha_dual, &step.dnu);
        axpy_scalar(&mut self.upsilon, alpha_dual, &step.dupsilon);
    }
}
