//! Riccati recursion for the condensed Newton system with switching times.
//!
//! Within phase `p` the cost-to-go of stage `i` is a quadratic in
//! `(dx, delta_p, tau_p)` where `delta_p = dt_p - dt_{p-1}` and
//! `tau_p = -dt_p`:
//!
//! ```text
//! V = 1/2 dx'P dx - s'dx + dx'Psi delta + dx'Phi tau
//!   + 1/2 xi delta^2 + chi delta tau + 1/2 rho tau^2 + eta delta + iota tau
//! ```
//!
//! At the first stage of each phase `dt_p` is eliminated, which leaves a
//! quadratic in `-dt_{p-1}`: the `tau` channel of the previous phase.

use nalgebra::linalg::{Cholesky, FullPivLU};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::iterate::NewtonStep;
use crate::kkt::{KktSystem, StageKkt};
use crate::model::{Matrix, Vector};

/// Lower bound on the shifted `sigma` when `|eta - iota|` vanishes.
pub const SIGMA_FLOOR: f64 = 1e-8;

/// How the reduced Hessian is treated at phase transitions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModificationPolicy {
    /// Exact elimination; `sigma <= 0` is an error.
    Off,
    /// `P~ = P` at every transition and `sigma` shifted when below `sigma_min`.
    Always,
    /// Exact elimination unless `sigma <= sigma_min`, in which case the
    /// transition is modified as in `Always`.
    Adaptive,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RiccatiOptions {
    pub modification: ModificationPolicy,
    /// Bound on the switching-time step that sets `sigma_min`.
    pub dt_max: f64,
}

impl Default for RiccatiOptions {
    fn default() -> Self {
        Self {
            modification: ModificationPolicy::Off,
            dt_max: 0.5,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RiccatiError {
    #[error("stage {stage}: G is not positive definite (second-order sufficient condition violated)")]
    NotPositiveDefinite { stage: usize },
    #[error("stage {stage}: bordered switching-condition system is singular (reduced Hessian not positive definite)")]
    SingularBordered { stage: usize },
    #[error("stage {stage}: switching-condition Jacobian D is rank deficient")]
    ConditionRankDeficient { stage: usize },
    #[error("switch {switch}: sigma = {sigma} is not positive and modifications are disabled")]
    SigmaNonPositive { switch: usize, sigma: f64 },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
}

/// Gains of a switching-condition stage for the multiplier direction.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionGains {
    pub m_gain: Matrix,
    pub m: Vector,
    pub l: Vector,
    pub n_vec: Matrix,
}

/// Cost-to-go of stage `i` (before any elimination at that stage) and the
/// feedback law `du = K dx + T delta + W tau + k`.
#[derive(Clone, Debug, PartialEq)]
pub struct RiccatiStage {
    pub p: Matrix,
    pub s: Vector,
    pub psi: Vector,
    pub phi: Vector,
    pub xi: f64,
    pub chi: f64,
    pub rho: f64,
    pub eta: f64,
    pub iota: f64,
    pub k_gain: Matrix,
    pub k: Vector,
    pub t_gain: Vector,
    pub w_gain: Vector,
    pub cond: Option<ConditionGains>,
    /// Smallest diagonal entry of the Cholesky factor of `G` (not computed at
    /// switching-condition stages).
    pub min_chol_diag: Option<f64>,
}

/// Elimination of `dt_p` at the first stage of phase `p`.
#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub sigma_raw: f64,
    pub sigma: f64,
    pub modified: bool,
    pub psi_minus_phi: Vector,
    pub xi_minus_chi: f64,
    pub eta_minus_iota: f64,
    pub p_tilde: Matrix,
    pub s_tilde: Vector,
    pub phi_tilde: Vector,
    pub rho_tilde: f64,
    pub iota_tilde: f64,
}

/// Cost-to-go at a pre-jump point, a quadratic in `(dx_pre, tau)`.
#[derive(Clone, Debug, PartialEq)]
pub struct JumpFactor {
    pub p: Matrix,
    pub s: Vector,
    pub phi: Vector,
    pub rho: f64,
    pub iota: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RiccatiFactorization {
    pub stages: Vec<RiccatiStage>,
    /// Indexed by switch `j`; eliminates `dt_j` at the first stage of phase `j`.
    pub transitions: Vec<Transition>,
    pub jumps: Vec<Option<JumpFactor>>,
    pub terminal_p: Matrix,
    pub terminal_s: Vector,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RiccatiReport {
    pub min_chol_diag: Vec<Option<f64>>,
    pub sigma_raw: Vec<f64>,
    pub sigma: Vec<f64>,
    pub modified: Vec<bool>,
}

impl RiccatiReport {
    pub fn any_modified(&self) -> bool {
        self.modified.iter().any(|&m| m)
    }

    pub fn all_sigma_positive(&self) -> bool {
        self.sigma_raw.iter().all(|&s| s > 0.0)
    }

    pub fn all_g_positive_definite(&self) -> bool {
        self.min_chol_diag.iter().flatten().all(|&d| d > 0.0)
    }
}

impl RiccatiFactorization {
    pub fn report(&self) -> RiccatiReport {
        RiccatiReport {
            min_chol_diag: self.stages.iter().map(|s| s.min_chol_diag).collect(),
            sigma_raw: self.transitions.iter().map(|t| t.sigma_raw).collect(),
            sigma: self.transitions.iter().map(|t| t.sigma).collect(),
            modified: self.transitions.iter().map(|t| t.modified).collect(),
        }
    }
}

/// Cost-to-go carried backward between stages.
#[derive(Clone, Debug)]
struct Carry {
    p: Matrix,
    s: Vector,
    psi: Vector,
    phi: Vector,
    xi: f64,
    chi: f64,
    rho: f64,
    eta: f64,
    iota: f64,
}

impl Carry {
    /// Entering a phase from its successor: only the `tau` channel survives.
    fn from_tau_channel(p: Matrix, s: Vector, phi: Vector, rho: f64, iota: f64) -> Self {
        let nx = s.len();
        Self {
            p,
            s,
            psi: Vector::zeros(nx),
            phi,
            xi: 0.0,
            chi: 0.0,
            rho,
            eta: 0.0,
            iota,
        }
    }
}

fn symmetrize(m: &mut Matrix) {
    let t = m.transpose();
    *m += t;
    *m *= 0.5;
}

fn backward_stage(i: usize, st: &StageKkt, c: &Carry) -> Result<(RiccatiStage, Carry), RiccatiError> {
    let nu = st.b.ncols();
    let nx = st.a.nrows();
    let pa = &c.p * &st.a;
    let pb = &c.p * &st.b;
    let pf_psi = &c.p * &st.f + &c.psi;
    let v = &c.p * &st.x_bar - &c.s;

    let f_mat = &st.qxx + st.a.tr_mul(&pa);
    let h_mat = &st.qxu + st.a.tr_mul(&pb);
    let g_mat = &st.quu + st.b.tr_mul(&pb);
    let psi_x = &st.hx + st.a.tr_mul(&pf_psi);
    let psi_u = &st.hu + st.b.tr_mul(&pf_psi);
    let phi_x = st.a.tr_mul(&c.phi);
    let phi_u = st.b.tr_mul(&c.phi);
    let x_lin = &st.lx + st.a.tr_mul(&v);
    let u_lin = &st.lu + st.b.tr_mul(&v);

    let xi_base = c.xi + st.q_tt + st.f.dot(&(&c.p * &st.f)) + 2.0 * st.f.dot(&c.psi);
    let chi_base = c.chi + c.phi.dot(&st.f);
    let eta_base = c.eta + st.h_bar + st.f.dot(&v) + c.psi.dot(&st.x_bar);
    let iota_base = c.iota + c.phi.dot(&st.x_bar);

    let (k_gain, k, t_gain, w_gain, cond, min_chol_diag, mut p, s, psi, phi, xi, chi, eta);
    match &st.condition {
        None => {
            let chol = Cholesky::new(g_mat).ok_or(RiccatiError::NotPositiveDefinite { stage: i })?;
            let diag = chol.l_dirty().diagonal().iter().copied().fold(f64::INFINITY, f64::min);
            k_gain = -chol.solve(&h_mat.transpose());
            k = -chol.solve(&u_lin);
            t_gain = -chol.solve(&psi_u);
            w_gain = -chol.solve(&phi_u);
            p = &f_mat + &h_mat * &k_gain;
            s = -(&x_lin + &h_mat * &k);
            psi = &psi_x + &h_mat * &t_gain;
            phi = &phi_x + &h_mat * &w_gain;
            xi = xi_base + psi_u.dot(&t_gain);
            chi = chi_base + psi_u.dot(&w_gain);
            eta = eta_base + psi_u.dot(&k);
            cond = None;
            min_chol_diag = Some(diag);
        }
        Some(cd) => {
            let ne = cd.d.nrows();
            if ne > nu || cd.d.clone().svd(false, false).rank(1e-12 * cd.d.amax().max(1.0)) < ne {
                return Err(RiccatiError::ConditionRankDeficient { stage: i });
            }
            let mut bordered = Matrix::zeros(nu + ne, nu + ne);
            bordered.view_mut((0, 0), (nu, nu)).copy_from(&g_mat);
            bordered.view_mut((0, nu), (nu, ne)).copy_from(&cd.d.transpose());
            bordered.view_mut((nu, 0), (ne, nu)).copy_from(&cd.d);
            let ncol = nx + 3;
            let mut rhs = Matrix::zeros(nu + ne, ncol);
            rhs.view_mut((0, 0), (nu, nx)).copy_from(&h_mat.transpose());
            rhs.view_mut((nu, 0), (ne, nx)).copy_from(&cd.c);
            rhs.view_mut((0, nx), (nu, 1)).copy_from(&psi_u);
            rhs.view_mut((nu, nx), (ne, 1)).copy_from(&cd.e);
            rhs.view_mut((0, nx + 1), (nu, 1)).copy_from(&phi_u);
            rhs.view_mut((0, nx + 2), (nu, 1)).copy_from(&u_lin);
            rhs.view_mut((nu, nx + 2), (ne, 1)).copy_from(&cd.e_bar);
            let lu = FullPivLU::new(bordered);
            let sol = -lu.solve(&rhs).ok_or(RiccatiError::SingularBordered { stage: i })?;
            if sol.iter().any(|v| !v.is_finite()) {
                return Err(RiccatiError::SingularBordered { stage: i });
            }
            k_gain = sol.view((0, 0), (nu, nx)).into_owned();
            t_gain = sol.view((0, nx), (nu, 1)).column(0).into_owned();
            w_gain = sol.view((0, nx + 1), (nu, 1)).column(0).into_owned();
            k = sol.view((0, nx + 2), (nu, 1)).column(0).into_owned();
            let m_gain = sol.view((nu, 0), (ne, nx)).into_owned();
            let l = sol.view((nu, nx), (ne, 1)).column(0).into_owned();
            let n_vec = sol.view((nu, nx + 1), (ne, 1)).into_owned();
            let m = sol.view((nu, nx + 2), (ne, 1)).column(0).into_owned();
            p = &f_mat + &h_mat * &k_gain + cd.c.tr_mul(&m_gain);
            s = -(&x_lin + &h_mat * &k + cd.c.tr_mul(&m));
            psi = &psi_x + &h_mat * &t_gain + cd.c.tr_mul(&l);
            phi = &phi_x + &h_mat * &w_gain + cd.c.tr_mul(&n_vec.column(0));
            xi = xi_base + psi_u.dot(&t_gain) + cd.e.dot(&l);
            chi = chi_base + psi_u.dot(&w_gain) + cd.e.dot(&n_vec.column(0));
            eta = eta_base + psi_u.dot(&k) + cd.e.dot(&m);
            cond = Some(ConditionGains { m_gain, m, l, n_vec });
            min_chol_diag = None;
        }
    }
    symmetrize(&mut p);
    let rho = c.rho + phi_u.dot(&w_gain);
    let iota = iota_base + phi_u.dot(&k);
    let carry = Carry {
        p: p.clone(),
        s: s.clone(),
        psi: psi.clone(),
        phi: phi.clone(),
        xi,
        chi,
        rho,
        eta,
        iota,
    };
    let stage = RiccatiStage {
        p,
        s,
        psi,
        phi,
        xi,
        chi,
        rho,
        eta,
        iota,
        k_gain,
        k,
        t_gain,
        w_gain,
        cond,
        min_chol_diag,
    };
    Ok((stage, carry))
}

/// `sigma_min` (equal to the shift `sigma_bar`) for a transition.
pub fn sigma_min(eta_minus_iota: f64, dt_max: f64) -> f64 {
    (eta_minus_iota.abs() / dt_max).max(SIGMA_FLOOR)
}

/// Shifted `sigma`: unchanged above `sigma_min`, else `|sigma| + sigma_bar`.
/// Returns the value and whether the shift applied.
pub fn modify_sigma(sigma: f64, eta_minus_iota: f64, dt_max: f64) -> (f64, bool) {
    let smin = sigma_min(eta_minus_iota, dt_max);
    if sigma > smin {
        (sigma, false)
    } else {
        (sigma.abs() + smin, true)
    }
}

fn transition(switch: usize, c: &Carry, opts: &RiccatiOptions) -> Result<Transition, RiccatiError> {
    let sigma_raw = c.xi - 2.0 * c.chi + c.rho;
    let d = &c.psi - &c.phi;
    let a = c.xi - c.chi;
    let b = c.eta - c.iota;
    let (sigma, modified, keep_p) = match opts.modification {
        ModificationPolicy::Off => {
            if !(sigma_raw > 0.0) {
                return Err(RiccatiError::SigmaNonPositive { switch, sigma: sigma_raw });
            }
            (sigma_raw, false, false)
        }
        ModificationPolicy::Always => {
            let (s, m) = modify_sigma(sigma_raw, b, opts.dt_max);
            (s, m, true)
        }
        ModificationPolicy::Adaptive => {
            let (s, m) = modify_sigma(sigma_raw, b, opts.dt_max);
            (s, m, m)
        }
    };
    let mut p_tilde = if keep_p {
        c.p.clone()
    } else {
        &c.p - &d * d.transpose() / sigma
    };
    symmetrize(&mut p_tilde);
    Ok(Transition {
        sigma_raw,
        sigma,
        modified,
        s_tilde: &c.s + &d * (b / sigma),
        phi_tilde: &c.psi - &d * (a / sigma),
        rho_tilde: c.xi - a * a / sigma,
        iota_tilde: c.eta - a * b / sigma,
        psi_minus_phi: d,
        xi_minus_chi: a,
        eta_minus_iota: b,
        p_tilde,
    })
}

fn check_dims(sys: &KktSystem) -> Result<(), RiccatiError> {
    let (nx, nu) = (sys.nx, sys.nu);
    for (i, st) in sys.stages.iter().enumerate() {
        let ok = st.qxx.shape() == (nx, nx)
            && st.qxu.shape() == (nx, nu)
            && st.quu.shape() == (nu, nu)
            && st.a.shape() == (nx, nx)
            && st.b.shape() == (nx, nu)
            && st.f.len() == nx
            && st.hx.len() == nx
            && st.hu.len() == nu
            && st.lx.len() == nx
            && st.lu.len() == nu
            && st.x_bar.len() == nx;
        if !ok {
            return Err(RiccatiError::Dimension(format!("stage {i} blocks do not match (nx, nu) = ({nx}, {nu})")));
        }
    }
    if sys.phase_start.len() != sys.phases.len() + 1 || sys.jumps.len() + 1 != sys.phases.len() {
        return Err(RiccatiError::Dimension("phase layout".to_string()));
    }
    Ok(())
}

/// Backward pass over the whole horizon.
pub fn backward(sys: &KktSystem, opts: &RiccatiOptions) -> Result<RiccatiFactorization, RiccatiError> {
    check_dims(sys)?;
    let nx = sys.nx;
    let k_sw = sys.num_switches();
    let mut stages: Vec<Option<RiccatiStage>> = vec![None; sys.num_stages()];
    let mut transitions: Vec<Option<Transition>> = vec![None; k_sw];
    let mut jumps: Vec<Option<JumpFactor>> = vec![None; k_sw];
    let terminal_p = sys.terminal.qxx.clone();
    let terminal_s = -&sys.terminal.lx;
    let mut carry = Carry::from_tau_channel(terminal_p.clone(), terminal_s.clone(), Vector::zeros(nx), 0.0, 0.0);

    for p in (0..sys.num_phases()).rev() {
        carry.xi += sys.phases[p].q_tt;
        carry.eta += sys.phases[p].q_lin;
        for i in sys.stage_range(p).rev() {
            let (stage, next) = backward_stage(i, &sys.stages[i], &carry)?;
            stages[i] = Some(stage);
            carry = next;
        }
        if p == 0 {
            if k_sw > 0 {
                transitions[0] = Some(transition(0, &carry, opts)?);
            }
            break;
        }
        // quadratic in tau of phase p - 1 (that is, -dt_{p-1})
        let (pt, st, phit, rhot, iotat) = if p == k_sw {
            (carry.p, carry.s, carry.psi, carry.xi, carry.eta)
        } else {
            let tr = transition(p, &carry, opts)?;
            let out = (tr.p_tilde.clone(), tr.s_tilde.clone(), tr.phi_tilde.clone(), tr.rho_tilde, tr.iota_tilde);
            transitions[p] = Some(tr);
            out
        };
        carry = match &sys.jumps[p - 1] {
            Some(jp) => {
                let mut pj = &jp.qxx + jp.a.tr_mul(&(&pt * &jp.a));
                symmetrize(&mut pj);
                let f = JumpFactor {
                    s: jp.a.tr_mul(&(&st - &pt * &jp.x_bar)) - &jp.lx,
                    phi: jp.a.tr_mul(&phit),
                    rho: rhot,
                    iota: iotat + phit.dot(&jp.x_bar),
                    p: pj,
                };
                let c = Carry::from_tau_channel(f.p.clone(), f.s.clone(), f.phi.clone(), f.rho, f.iota);
                jumps[p - 1] = Some(f);
                c
            }
            None => Carry::from_tau_channel(pt, st, phit, rhot, iotat),
        };
    }
    Ok(RiccatiFactorization {
        stages: stages.into_iter().map(|s| s.expect("every stage visited")).collect(),
        transitions: transitions.into_iter().map(|t| t.expect("every switch eliminated")).collect(),
        jumps,
        terminal_p,
        terminal_s,
    })
}

/// Forward sweep recovering every primal and equality-dual direction. The
/// slack and bound-dual directions are left at zero.
pub fn forward(fact: &RiccatiFactorization, sys: &KktSystem) -> NewtonStep {
    let n = sys.num_stages();
    let k_sw = sys.num_switches();
    let nx = sys.nx;
    let mut dx = vec![Vector::zeros(nx); n + 1];
    let mut du = Vec::with_capacity(n);
    let mut dlam = vec![Vector::zeros(nx); n + 1];
    let mut dx_pre = vec![None; k_sw];
    let mut dlam_pre = vec![None; k_sw];
    let mut dzeta = vec![None; k_sw];
    let mut dt = vec![0.0; k_sw];
    dx[0] = sys.init_residual.clone();

    for p in 0..sys.num_phases() {
        let prev = if p == 0 { 0.0 } else { dt[p - 1] };
        if p < k_sw {
            let tr = &fact.transitions[p];
            let start = sys.phase_start[p];
            dt[p] = -(tr.psi_minus_phi.dot(&dx[start]) - tr.xi_minus_chi * prev + tr.eta_minus_iota) / tr.sigma;
        }
        let delta = sys.delta(p, &dt);
        let tau = -dt.get(p).copied().unwrap_or(0.0);
        for i in sys.stage_range(p) {
            let rs = &fact.stages[i];
            let st = &sys.stages[i];
            let u = &rs.k_gain * &dx[i] + &rs.t_gain * delta + &rs.w_gain * tau + &rs.k;
            if let Some(cg) = &rs.cond {
                dzeta[p] = Some(&cg.m_gain * &dx[i] + &cg.l * delta + cg.n_vec.column(0) * tau + &cg.m);
            }
            dlam[i] = &rs.p * &dx[i] + &rs.psi * delta + &rs.phi * tau - &rs.s;
            let next = &st.a * &dx[i] + &st.b * &u + &st.f * delta + &st.x_bar;
            du.push(u);
            match sys.pre_jump_after(i) {
                Some(j) => {
                    let jf = fact.jumps[j].as_ref().expect("jump factor");
                    let jp = sys.jumps[j].as_ref().expect("jump data");
                    dlam_pre[j] = Some(&jf.p * &next + &jf.phi * tau - &jf.s);
                    dx[i + 1] = &jp.a * &next + &jp.x_bar;
                    dx_pre[j] = Some(next);
                }
                None => dx[i + 1] = next,
            }
        }
    }
    dlam[n] = &fact.terminal_p * &dx[n] - &fact.terminal_s;

    NewtonStep {
        dz: sys
            .stages
            .iter()
            .map(|s| Vector::zeros(s.constraint.as_ref().map_or(0, |c| c.z.len())))
            .collect(),
        dnu: sys
            .stages
            .iter()
            .map(|s| Vector::zeros(s.constraint.as_ref().map_or(0, |c| c.z.len())))
            .collect(),
        dw: vec![0.0; sys.phases.iter().filter(|p| p.dwell.is_some()).count()],
        dupsilon: vec![0.0; sys.phases.iter().filter(|p| p.dwell.is_some()).count()],
        dx,
        dx_pre,
        du,
        dt,
        dlam,
        dlam_pre,
        dzeta,
    }
}

/// Backward then forward pass.
pub fn solve_step(sys: &KktSystem, opts: &RiccatiOptions) -> Result<(NewtonStep, RiccatiReport), RiccatiError> {
    let fact = backward(sys, opts)?;
    let step = forward(&fact, sys);
    Ok((step, fact.report()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kkt::{PhaseKkt, TerminalKkt};

    fn scalar_stage(x_bar: f64) -> StageKkt {
        let one = Matrix::from_element(1, 1, 1.0);
        let zero = Vector::zeros(1);
        StageKkt {
            phase: 0,
            qxx: one.clone(),
            qxu: Matrix::zeros(1, 1),
            quu: one.clone(),
            a: one.clone(),
            b: one,
            f: zero.clone(),
            hx: zero.clone(),
            hu: zero.clone(),
            h_bar: 0.0,
            q_tt: 0.0,
            lx: zero.clone(),
            lu: zero,
            x_bar: Vector::from_element(1, x_bar),
            constraint: None,
            condition: None,
        }
    }

    fn scalar_system(x_bar: f64) -> KktSystem {
        KktSystem {
            nx: 1,
            nu: 1,
            phase_start: vec![0, 1],
            stages: vec![scalar_stage(x_bar)],
            jumps: vec![],
            phases: vec![PhaseKkt {
                q_tt: 0.0,
                q_lin: 0.0,
                dwell: None,
            }],
            terminal: TerminalKkt {
                qxx: Matrix::from_element(1, 1, 1.0),
                lx: Vector::zeros(1),
            },
            init_residual: Vector::zeros(1),
        }
    }

    #[test]
    fn scalar_lqr_step() {
        let fact = backward(&scalar_system(0.0), &RiccatiOptions::default()).unwrap();
        let st = &fact.stages[0];
        assert!((st.k_gain[(0, 0)] + 0.5).abs() < 1e-15);
        assert!((st.p[(0, 0)] - 1.5).abs() < 1e-15);
        assert!((st.min_chol_diag.unwrap() - 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn initial_residual_sets_first_state_step() {
        let mut sys = scalar_system(0.0);
        sys.init_residual[0] = -1.0;
        let (step, _) = solve_step(&sys, &RiccatiOptions::default()).unwrap();
        assert_eq!(step.dx[0][0], -1.0);
    }

    #[test]
    fn zero_residual_gives_zero_step() {
        let (step, _) = solve_step(&scalar_system(0.0), &RiccatiOptions::default()).unwrap();
        assert_eq!(step.max_abs(), 0.0);
    }

    #[test]
    fn sigma_arithmetic() {
        let c = Carry {
            p: Matrix::zeros(1, 1),
            s: Vector::zeros(1),
            psi: Vector::zeros(1),
            phi: Vector::zeros(1),
            xi: 3.0,
            chi: 1.0,
            rho: 1.0,
            eta: 0.0,
            iota: 0.0,
        };
        let tr = transition(0, &c, &RiccatiOptions::default()).unwrap();
        assert_eq!(tr.sigma_raw, 2.0);
        assert!(!tr.modified);
    }

    #[test]
    fn sigma_modification() {
        assert_eq!(sigma_min(0.2, 0.1), 2.0);
        let (s, m) = modify_sigma(-0.5, 0.2, 0.1);
        assert!((s - 2.5).abs() < 1e-15);
        assert!(m);
        assert_eq!(modify_sigma(3.0, 0.2, 0.1), (3.0, false));
    }

    #[test]
    fn nonpositive_sigma_is_an_error_without_modification() {
        let c = Carry {
            p: Matrix::zeros(1, 1),
            s: Vector::zeros(1),
            psi: Vector::zeros(1),
            phi: Vector::zeros(1),
            xi: 1.0,
            chi: 1.0,
            rho: 0.5,
            eta: 0.0,
            iota: 0.0,
        };
        let err = transition(2, &c, &RiccatiOptions::default()).unwrap_err();
        assert_eq!(err, RiccatiError::SigmaNonPositive { switch: 2, sigma: -0.5 });
        let opts = RiccatiOptions {
            modification: ModificationPolicy::Always,
            dt_max: 0.1,
        };
        let tr = transition(2, &c, &opts).unwrap();
        assert!(tr.sigma > 0.0 && tr.modified);
    }

    #[test]
    fn indefinite_g_names_stage() {
        let mut sys = scalar_system(0.0);
        sys.stages[0].quu[(0, 0)] = -5.0;
        assert_eq!(
            backward(&sys, &RiccatiOptions::default()).unwrap_err(),
            RiccatiError::NotPositiveDefinite { stage: 0 }
        );
    }
}
