//! Dense reference solver for the Newton system.
//!
//! Materializes the full symmetric indefinite KKT matrix of the condensed
//! system (states, controls, switching times, costates and
//! switching-condition multipliers) and solves it with a fully pivoted LU
//! factorization. Used only as ground truth for the Riccati recursion.

use std::io::{self, Write};

use nalgebra::linalg::FullPivLU;
use rand::Rng;
use thiserror::Error;

use crate::iterate::NewtonStep;
use crate::kkt::{ConditionKkt, DwellKkt, JumpKkt, KktSystem, PhaseKkt, StageKkt, TerminalKkt};
use crate::model::{Matrix, Vector};

/// Largest system the oracle will factorize.
pub const MAX_DIM: usize = 2000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OracleError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("dense system of dimension {0} exceeds the oracle limit")]
    TooLarge(usize),
    #[error("KKT matrix is singular (estimated rank deficiency {deficiency})")]
    Singular { deficiency: usize },
    #[error("steps differ in shape: {0}")]
    Shape(String),
}

/// Offsets of every unknown block in the dense vector.
#[derive(Clone, Debug, PartialEq)]
pub struct Layout {
    pub lam: Vec<usize>,
    pub x: Vec<usize>,
    pub u: Vec<usize>,
    pub zeta: Vec<Option<(usize, usize)>>,
    pub lam_pre: Vec<Option<usize>>,
    pub x_pre: Vec<Option<usize>>,
    pub dt: usize,
    pub dim: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseKkt {
    pub matrix: Matrix,
    pub rhs: Vector,
    pub layout: Layout,
    nx: usize,
    nu: usize,
    num_switches: usize,
}

fn layout(sys: &KktSystem) -> Layout {
    let (nx, nu) = (sys.nx, sys.nu);
    let n = sys.num_stages();
    let k = sys.num_switches();
    let mut off = 0;
    let mut take = |len: usize| {
        let o = off;
        off += len;
        o
    };
    let mut lam = Vec::with_capacity(n + 1);
    let mut x = Vec::with_capacity(n + 1);
    let mut u = Vec::with_capacity(n);
    let mut zeta = vec![None; k];
    let mut lam_pre = vec![None; k];
    let mut x_pre = vec![None; k];
    for (i, st) in sys.stages.iter().enumerate() {
        lam.push(take(nx));
        x.push(take(nx));
        u.push(take(nu));
        if let Some(c) = &st.condition {
            let ne = c.e_bar.len();
            zeta[st.phase] = Some((take(ne), ne));
        }
        if let Some(j) = sys.pre_jump_after(i) {
            lam_pre[j] = Some(take(nx));
            x_pre[j] = Some(take(nx));
        }
    }
    lam.push(take(nx));
    x.push(take(nx));
    let dt = take(k);
    Layout {
        lam,
        x,
        u,
        zeta,
        lam_pre,
        x_pre,
        dt,
        dim: off,
    }
}

fn put(m: &mut Matrix, r: usize, c: usize, block: &Matrix) {
    let mut v = m.view_mut((r, c), block.shape());
    v += block;
}

fn put_col(m: &mut Matrix, r: usize, c: usize, col: &Vector, scale: f64) {
    for (k, v) in col.iter().enumerate() {
        m[(r + k, c)] += scale * v;
    }
}

fn put_row(m: &mut Matrix, r: usize, c: usize, row: &Vector, scale: f64) {
    for (k, v) in row.iter().enumerate() {
        m[(r, c + k)] += scale * v;
    }
}

fn put_vec(v: &mut Vector, r: usize, val: &Vector) {
    let mut view = v.rows_mut(r, val.len());
    view += val;
}

/// Materializes the full Newton system `M v + r = 0`.
pub fn assemble_dense(sys: &KktSystem) -> Result<DenseKkt, OracleError> {
    let (nx, nu) = (sys.nx, sys.nu);
    let n = sys.num_stages();
    let k = sys.num_switches();
    if sys.phase_start.len() != k + 2 || sys.jumps.len() != k || *sys.phase_start.last().unwrap() != n {
        return Err(OracleError::Dimension("phase layout".to_string()));
    }
    for (i, st) in sys.stages.iter().enumerate() {
        if st.a.shape() != (nx, nx) || st.b.shape() != (nx, nu) || st.qxu.shape() != (nx, nu) || st.lu.len() != nu {
            return Err(OracleError::Dimension(format!("stage {i}")));
        }
    }
    let lay = layout(sys);
    if lay.dim > MAX_DIM {
        return Err(OracleError::TooLarge(lay.dim));
    }
    let mut m = Matrix::zeros(lay.dim, lay.dim);
    let mut r = Vector::zeros(lay.dim);
    let eye = Matrix::identity(nx, nx);
    let neg_eye = -&eye;

    // initial condition
    put(&mut m, lay.lam[0], lay.x[0], &neg_eye);
    put_vec(&mut r, lay.lam[0], &sys.init_residual);

    let mut phase_quad = vec![0.0; sys.num_phases()];
    let mut phase_lin = vec![0.0; sys.num_phases()];
    for (i, st) in sys.stages.iter().enumerate() {
        let p = st.phase;
        let (xi, ui, li) = (lay.x[i], lay.u[i], lay.lam[i]);
        let (xn, ln) = match sys.pre_jump_after(i) {
            Some(j) => (lay.x_pre[j].unwrap(), lay.lam_pre[j].unwrap()),
            None => (lay.x[i + 1], lay.lam[i + 1]),
        };
        // state equation
        put(&mut m, ln, xi, &st.a);
        put(&mut m, ln, ui, &st.b);
        put(&mut m, ln, xn, &neg_eye);
        put_vec(&mut r, ln, &st.x_bar);
        // stationarity in x and u
        put(&mut m, xi, xi, &st.qxx);
        put(&mut m, xi, ui, &st.qxu);
        put(&mut m, xi, ln, &st.a.transpose());
        put(&mut m, xi, li, &neg_eye);
        put_vec(&mut r, xi, &st.lx);
        put(&mut m, ui, xi, &st.qxu.transpose());
        put(&mut m, ui, ui, &st.quu);
        put(&mut m, ui, ln, &st.b.transpose());
        put_vec(&mut r, ui, &st.lu);
        if let Some(c) = &st.condition {
            let (zi, _) = lay.zeta[p].unwrap();
            put(&mut m, zi, xi, &c.c);
            put(&mut m, zi, ui, &c.d);
            put(&mut m, xi, zi, &c.c.transpose());
            put(&mut m, ui, zi, &c.d.transpose());
            put_vec(&mut r, zi, &c.e_bar);
        }
        // coupling with the switching times through delta_p
        for j in 0..k {
            let coeff = sys.delta_coeff(p, j);
            if coeff == 0.0 {
                continue;
            }
            let tj = lay.dt + j;
            put_col(&mut m, ln, tj, &st.f, coeff);
            put_row(&mut m, tj, ln, &st.f, coeff);
            put_col(&mut m, xi, tj, &st.hx, coeff);
            put_row(&mut m, tj, xi, &st.hx, coeff);
            put_col(&mut m, ui, tj, &st.hu, coeff);
            put_row(&mut m, tj, ui, &st.hu, coeff);
            if let Some(c) = &st.condition {
                let (zi, _) = lay.zeta[p].unwrap();
                put_col(&mut m, zi, tj, &c.e, coeff);
                put_row(&mut m, tj, zi, &c.e, coeff);
            }
        }
        phase_quad[p] += st.q_tt;
        phase_lin[p] += st.h_bar;
    }
    for (j, jp) in sys.jumps.iter().enumerate() {
        let Some(jp) = jp else { continue };
        let start = sys.phase_start[j + 1];
        let (xp, lp) = (lay.x_pre[j].unwrap(), lay.lam_pre[j].unwrap());
        put(&mut m, lay.lam[start], xp, &jp.a);
        put(&mut m, lay.lam[start], lay.x[start], &neg_eye);
        put_vec(&mut r, lay.lam[start], &jp.x_bar);
        put(&mut m, xp, xp, &jp.qxx);
        put(&mut m, xp, lay.lam[start], &jp.a.transpose());
        put(&mut m, xp, lp, &neg_eye);
        put_vec(&mut r, xp, &jp.lx);
    }
    put(&mut m, lay.x[n], lay.x[n], &sys.terminal.qxx);
    put(&mut m, lay.x[n], lay.lam[n], &neg_eye);
    put_vec(&mut r, lay.x[n], &sys.terminal.lx);

    for (p, ph) in sys.phases.iter().enumerate() {
        let quad = phase_quad[p] + ph.q_tt;
        let lin = phase_lin[p] + ph.q_lin;
        for a in 0..k {
            let ca = sys.delta_coeff(p, a);
            if ca == 0.0 {
                continue;
            }
            r[lay.dt + a] += ca * lin;
            for b in 0..k {
                m[(lay.dt + a, lay.dt + b)] += ca * sys.delta_coeff(p, b) * quad;
            }
        }
    }

    Ok(DenseKkt {
        matrix: m,
        rhs: r,
        layout: lay,
        nx,
        nu,
        num_switches: k,
    })
}

impl DenseKkt {
    /// Writes the matrix and right-hand side in coordinate format.
    pub fn write_matrix_market(&self, out: &mut impl Write) -> io::Result<()> {
        let n = self.matrix.nrows();
        let nnz = self.matrix.iter().filter(|v| **v != 0.0).count();
        writeln!(out, "%%MatrixMarket matrix coordinate real general")?;
        writeln!(out, "{n} {n} {nnz}")?;
        for c in 0..n {
            for r in 0..n {
                let v = self.matrix[(r, c)];
                if v != 0.0 {
                    writeln!(out, "{} {} {:.17e}", r + 1, c + 1, v)?;
                }
            }
        }
        writeln!(out, "% rhs")?;
        for v in self.rhs.iter() {
            writeln!(out, "% {v:.17e}")?;
        }
        Ok(())
    }

    pub fn asymmetry(&self) -> f64 {
        (&self.matrix - self.matrix.transpose()).amax()
    }

    /// Unpacks a dense solution vector into a step.
    /// Inverse of [`DenseKkt::unpack`] on the primal and equality-dual
    /// directions.
    pub fn pack(&self, step: &NewtonStep) -> Vector {
        let lay = &self.layout;
        let mut v = Vector::zeros(lay.dim);
        for (i, &o) in lay.x.iter().enumerate() {
            v.rows_mut(o, self.nx).copy_from(&step.dx[i]);
            v.rows_mut(lay.lam[i], self.nx).copy_from(&step.dlam[i]);
        }
        for (i, &o) in lay.u.iter().enumerate() {
            v.rows_mut(o, self.nu).copy_from(&step.du[i]);
        }
        for j in 0..self.num_switches {
            if let Some(o) = lay.x_pre[j] {
                v.rows_mut(o, self.nx).copy_from(step.dx_pre[j].as_ref().expect("pre-jump state"));
                v.rows_mut(lay.lam_pre[j].expect("pre-jump costate"), self.nx)
                    .copy_from(step.dlam_pre[j].as_ref().expect("pre-jump costate"));
            }
            if let Some((o, ne)) = lay.zeta[j] {
                v.rows_mut(o, ne).copy_from(step.dzeta[j].as_ref().expect("condition multiplier"));
            }
            v[lay.dt + j] = step.dt[j];
        }
        v
    }

    pub fn unpack(&self, v: &Vector) -> NewtonStep {
        let (nx, nu) = (self.nx, self.nu);
        let lay = &self.layout;
        let seg = |o: usize, len: usize| v.rows(o, len).into_owned();
        let n = lay.u.len();
        NewtonStep {
            dx: lay.x.iter().map(|&o| seg(o, nx)).collect(),
            dx_pre: lay.x_pre.iter().map(|o| o.map(|o| seg(o, nx))).collect(),
            du: lay.u.iter().map(|&o| seg(o, nu)).collect(),
            dt: (0..self.num_switches).map(|j| v[lay.dt + j]).collect(),
            dlam: lay.lam.iter().map(|&o| seg(o, nx)).collect(),
            dlam_pre: lay.lam_pre.iter().map(|o| o.map(|o| seg(o, nx))).collect(),
            dzeta: lay.zeta.iter().map(|z| z.map(|(o, ne)| seg(o, ne))).collect(),
            dz: vec![Vector::zeros(0); n],
            dnu: vec![Vector::zeros(0); n],
            dw: vec![],
            dupsilon: vec![],
        }
    }
}

/// Relative threshold on LU pivots below which the matrix is treated as
/// rank deficient.
const PIVOT_TOL: f64 = 1e-12;

/// Solves `M v = -r` by fully pivoted LU with one step of iterative refinement.
pub fn solve_dense(sys: &DenseKkt) -> Result<NewtonStep, OracleError> {
    let v = solve_dense_vector(sys)?;
    Ok(sys.unpack(&v))
}

pub fn solve_dense_vector(sys: &DenseKkt) -> Result<Vector, OracleError> {
    let n = sys.matrix.nrows();
    if n == 0 {
        return Ok(Vector::zeros(0));
    }
    let lu = FullPivLU::new(sys.matrix.clone());
    let u = lu.u();
    let pivots: Vec<f64> = (0..n).map(|i| u[(i, i)].abs()).collect();
    let largest = pivots.iter().copied().fold(0.0, f64::max);
    let deficiency = pivots.iter().filter(|&&p| !(p > PIVOT_TOL * largest.max(f64::MIN_POSITIVE))).count();
    if deficiency > 0 {
        return Err(OracleError::Singular { deficiency });
    }
    let mut v = lu.solve(&(-&sys.rhs)).ok_or(OracleError::Singular { deficiency: 1 })?;
    let resid = &sys.matrix * &v + &sys.rhs;
    if let Some(corr) = lu.solve(&(-resid)) {
        v += corr;
    }
    Ok(v)
}

/// `|M v + r|_inf` for a step.
pub fn dense_residual(sys: &DenseKkt, step: &NewtonStep) -> f64 {
    (&sys.matrix * sys.pack(step) + &sys.rhs).amax()
}

// ---------------------------------------------------------------------------
// Comparison
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct GroupDeviation {
    pub group: &'static str,
    /// `max |a - b| / (1 + max |b|)` over the group.
    pub deviation: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComparisonReport {
    pub groups: Vec<GroupDeviation>,
    pub tol: f64,
}

impl ComparisonReport {
    pub fn passes(&self) -> bool {
        self.groups.iter().all(|g| g.deviation <= self.tol)
    }

    pub fn max_deviation(&self) -> f64 {
        self.groups.iter().map(|g| g.deviation).fold(0.0, f64::max)
    }

    pub fn failing(&self) -> Vec<&'static str> {
        self.groups.iter().filter(|g| !(g.deviation <= self.tol)).map(|g| g.group).collect()
    }
}

fn flatten<'a>(vs: impl Iterator<Item = &'a Vector>) -> Vec<f64> {
    vs.flat_map(|v| v.iter().copied()).collect()
}

fn group_deviation(group: &'static str, a: &[f64], b: &[f64]) -> Result<GroupDeviation, OracleError> {
    if a.len() != b.len() {
        return Err(OracleError::Shape(format!("{group}: {} vs {} entries", a.len(), b.len())));
    }
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let scale = b.iter().map(|v| v.abs()).fold(0.0, f64::max);
    Ok(GroupDeviation {
        group,
        deviation: diff / (1.0 + scale),
    })
}

/// Group-wise relative deviation of `a` from the reference `b`.
pub fn compare(a: &NewtonStep, b: &NewtonStep, tol: f64) -> Result<ComparisonReport, OracleError> {
    let pre_shape = |x: &[Option<Vector>]| x.iter().map(Option::is_some).collect::<Vec<_>>();
    if pre_shape(&a.dx_pre) != pre_shape(&b.dx_pre) || pre_shape(&a.dzeta) != pre_shape(&b.dzeta) {
        return Err(OracleError::Shape("per-switch entries differ".to_string()));
    }
    let dx = |s: &NewtonStep| flatten(s.dx.iter().chain(s.dx_pre.iter().flatten()));
    let dl = |s: &NewtonStep| flatten(s.dlam.iter().chain(s.dlam_pre.iter().flatten()));
    let groups = vec![
        group_deviation("dx", &dx(a), &dx(b))?,
        group_deviation("du", &flatten(a.du.iter()), &flatten(b.du.iter()))?,
        group_deviation("dt", &a.dt, &b.dt)?,
        group_deviation("dlam", &dl(a), &dl(b))?,
        group_deviation("dzeta", &flatten(a.dzeta.iter().flatten()), &flatten(b.dzeta.iter().flatten()))?,
    ];
    Ok(ComparisonReport { groups, tol })
}

// ---------------------------------------------------------------------------
// Random instances
// ---------------------------------------------------------------------------

/// Shape of a random Newton system.
#[derive(Clone, Debug, PartialEq)]
pub struct InstanceSpec {
    pub nx: usize,
    pub nu: usize,
    pub counts: Vec<usize>,
    pub jumps: Vec<bool>,
    /// Switching-condition dimension per switch (0 for none).
    pub conditions: Vec<usize>,
    /// Magnitude of the Hamiltonian sensitivities `h_x`, `h_u` relative to
    /// the Hessian blocks.
    pub coupling: f64,
    /// Draw `[q_tt h_x' h_u'; h_x Qxx Qxu; h_u Qxu' Quu]` jointly positive
    /// semidefinite. Otherwise `h_x`, `h_u` are independent of the other
    /// blocks and `q_tt = 0`, which makes the reduced Hessian indefinite in
    /// general.
    pub joint_convex: bool,
}

impl InstanceSpec {
    /// A random shape within the given bounds, with at most `max_total`
    /// stages overall. Phases ending in a switching condition get at least two
    /// stages.
    pub fn random(rng: &mut impl Rng, max_nx: usize, max_nu: usize, max_switches: usize, max_total: usize) -> Self {
        let nx = rng.gen_range(1..=max_nx);
        let nu = rng.gen_range(1..=max_nu);
        let k = rng.gen_range(0..=max_switches);
        let jumps: Vec<bool> = (0..k).map(|_| rng.gen_bool(0.5)).collect();
        let conditions: Vec<usize> = (0..k)
            .map(|_| if rng.gen_bool(0.4) { rng.gen_range(1..=nu) } else { 0 })
            .collect();
        let mut counts: Vec<usize> = (0..=k).map(|p| if p < k && conditions[p] > 0 { 2 } else { 1 }).collect();
        let base: usize = counts.iter().sum();
        assert!(base <= max_total, "max_total too small for {} phases", k + 1);
        for _ in 0..rng.gen_range(0..=max_total - base) {
            let p = rng.gen_range(0..=k);
            counts[p] += 1;
        }
        Self {
            nx,
            nu,
            counts,
            jumps,
            conditions,
            coupling: 1.0,
            joint_convex: true,
        }
    }
}

fn uniform_matrix(rng: &mut impl Rng, r: usize, c: usize, scale: f64) -> Matrix {
    Matrix::from_fn(r, c, |_, _| scale * rng.gen_range(-1.0..1.0))
}

fn uniform_vector(rng: &mut impl Rng, n: usize, scale: f64) -> Vector {
    Vector::from_fn(n, |_, _| scale * rng.gen_range(-1.0..1.0))
}

/// Random positive semidefinite matrix `L L^T / n`.
fn psd(rng: &mut impl Rng, n: usize) -> Matrix {
    let l = uniform_matrix(rng, n, n, 1.0);
    &l * l.transpose() / n as f64
}

/// A random Newton system whose Hessian blocks satisfy
/// `[Qxx Qxu; Qxu' Quu] >= 0`, `Quu > 0` and nonnegative switching-time
/// curvature.
pub fn random_instance(rng: &mut impl Rng, spec: &InstanceSpec) -> KktSystem {
    let (nx, nu) = (spec.nx, spec.nu);
    let k = spec.counts.len() - 1;
    assert_eq!(spec.jumps.len(), k);
    assert_eq!(spec.conditions.len(), k);
    let mut phase_start = vec![0];
    for c in &spec.counts {
        phase_start.push(phase_start.last().unwrap() + c);
    }
    let n = *phase_start.last().unwrap();
    let mut stages = Vec::with_capacity(n);
    for (p, &count) in spec.counts.iter().enumerate() {
        for s in 0..count {
            let i = phase_start[p] + s;
            let nz = nx + nu + 1;
            let mut h = psd(rng, nz);
            for d in 1 + nx..nz {
                h[(d, d)] += 0.1;
            }
            let (hx, hu, q_tt) = if spec.joint_convex {
                let c = spec.coupling;
                (
                    h.view((1, 0), (nx, 1)).column(0) * c,
                    h.view((1 + nx, 0), (nu, 1)).column(0) * c,
                    h[(0, 0)] * c * c,
                )
            } else {
                (uniform_vector(rng, nx, spec.coupling), uniform_vector(rng, nu, spec.coupling), 0.0)
            };
            let condition = (p < k && spec.conditions[p] > 0 && i + 2 == phase_start[p + 1]).then(|| {
                let ne = spec.conditions[p];
                ConditionKkt {
                    c: uniform_matrix(rng, ne, nx, 1.0),
                    d: uniform_matrix(rng, ne, nu, 1.0),
                    e: uniform_vector(rng, ne, 1.0),
                    e_bar: uniform_vector(rng, ne, 1.0),
                }
            });
            stages.push(StageKkt {
                phase: p,
                qxx: h.view((1, 1), (nx, nx)).into_owned(),
                qxu: h.view((1, 1 + nx), (nx, nu)).into_owned(),
                quu: h.view((1 + nx, 1 + nx), (nu, nu)).into_owned(),
                a: Matrix::identity(nx, nx) + uniform_matrix(rng, nx, nx, 0.3),
                b: uniform_matrix(rng, nx, nu, 1.0),
                f: uniform_vector(rng, nx, 1.0),
                hx,
                hu,
                h_bar: rng.gen_range(-1.0..1.0),
                q_tt,
                lx: uniform_vector(rng, nx, 1.0),
                lu: uniform_vector(rng, nu, 1.0),
                x_bar: uniform_vector(rng, nx, 1.0),
                constraint: None,
                condition,
            });
        }
    }
    let jumps = spec
        .jumps
        .iter()
        .map(|&has| {
            has.then(|| JumpKkt {
                qxx: psd(rng, nx),
                a: Matrix::identity(nx, nx) + uniform_matrix(rng, nx, nx, 0.5),
                x_bar: uniform_vector(rng, nx, 1.0),
                lx: uniform_vector(rng, nx, 1.0),
            })
        })
        .collect();
    let phases = (0..=k)
        .map(|_| {
            if k == 0 {
                return PhaseKkt {
                    q_tt: 0.0,
                    q_lin: 0.0,
                    dwell: None,
                };
            }
            let w = rng.gen_range(0.5..2.0);
            let upsilon = rng.gen_range(0.01..1.0);
            let r_delta = rng.gen_range(-0.1..0.1);
            let r_w = rng.gen_range(-0.1..0.1);
            PhaseKkt {
                q_tt: upsilon / w,
                q_lin: -upsilon - (upsilon * r_delta - r_w) / w,
                dwell: Some(DwellKkt {
                    w,
                    upsilon,
                    r_delta,
                    r_w,
                }),
            }
        })
        .collect();
    KktSystem {
        nx,
        nu,
        phase_start,
        stages,
        jumps,
        phases,
        terminal: TerminalKkt {
            qxx: psd(rng, nx),
            lx: uniform_vector(rng, nx, 1.0),
        },
        init_residual: uniform_vector(rng, nx, 1.0),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kkt::{PhaseKkt, TerminalKkt};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scalar_system() -> KktSystem {
        let m = |v: f64| Matrix::from_element(1, 1, v);
        let v = |x: f64| Vector::from_element(1, x);
        KktSystem {
            nx: 1,
            nu: 1,
            phase_start: vec![0, 1],
            stages: vec![StageKkt {
                phase: 0,
                qxx: m(1.0),
                qxu: m(0.0),
                quu: m(1.0),
                a: m(1.0),
                b: m(1.0),
                f: v(0.0),
                hx: v(0.0),
                hu: v(0.0),
                h_bar: 0.0,
                q_tt: 0.0,
                lx: v(1.0),
                lu: v(0.0),
                x_bar: v(0.0),
                constraint: None,
                condition: None,
            }],
            jumps: vec![],
            phases: vec![PhaseKkt {
                q_tt: 0.0,
                q_lin: 0.0,
                dwell: None,
            }],
            terminal: TerminalKkt { qxx: m(1.0), lx: v(1.0) },
            init_residual: v(0.0),
        }
    }

    #[test]
    fn scalar_system_by_hand() {
        let dense = assemble_dense(&scalar_system()).unwrap();
        // unknowns: lam0, x0, u0, lam1, x1
        #[rustfmt::skip]
        let expected = Matrix::from_row_slice(5, 5, &[
             0.0, -1.0, 0.0,  0.0,  0.0,
            -1.0,  1.0, 0.0,  1.0,  0.0,
             0.0,  0.0, 1.0,  1.0,  0.0,
             0.0,  1.0, 1.0,  0.0, -1.0,
             0.0,  0.0, 0.0, -1.0,  1.0,
        ]);
        assert_eq!(dense.matrix, expected);
        assert_eq!(dense.rhs.as_slice(), &[0.0, 1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn symmetric_and_zero_rhs() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let spec = InstanceSpec {
            nx: 3,
            nu: 2,
            counts: vec![3, 3, 3],
            jumps: vec![true, false],
            conditions: vec![1, 0],
            coupling: 1.0,
            joint_convex: true,
        };
        let sys = random_instance(&mut rng, &spec);
        let dense = assemble_dense(&sys).unwrap();
        assert!(dense.asymmetry() <= 1e-12);
        let bijective = {
            let lay = &dense.layout;
            let mut seen = vec![false; lay.dim];
            let mut mark = |o: usize, len: usize| (o..o + len).for_each(|i| seen[i] = true);
            lay.x.iter().chain(&lay.lam).for_each(|&o| mark(o, 3));
            lay.u.iter().for_each(|&o| mark(o, 2));
            lay.x_pre.iter().chain(&lay.lam_pre).flatten().for_each(|&o| mark(o, 3));
            lay.zeta.iter().flatten().for_each(|&(o, ne)| mark(o, ne));
            mark(lay.dt, 2);
            seen.iter().all(|&s| s)
        };
        assert!(bijective);
    }

    #[test]
    fn identity_system() {
        let dense = DenseKkt {
            matrix: Matrix::identity(3, 3),
            rhs: Vector::from_column_slice(&[1.0, -2.0, 3.0]),
            layout: Layout {
                lam: vec![],
                x: vec![],
                u: vec![],
                zeta: vec![],
                lam_pre: vec![],
                x_pre: vec![],
                dt: 0,
                dim: 3,
            },
            nx: 1,
            nu: 1,
            num_switches: 0,
        };
        let v = solve_dense_vector(&dense).unwrap();
        assert_eq!(v.as_slice(), &[-1.0, 2.0, -3.0]);
    }

    #[test]
    fn duplicated_row_is_singular() {
        let mut m = Matrix::identity(4, 4);
        m[(1, 2)] = 2.0;
        let row = m.row(1).into_owned();
        m.set_row(3, &row);
        let dense = DenseKkt {
            matrix: m,
            rhs: Vector::zeros(4),
            layout: Layout {
                lam: vec![],
                x: vec![],
                u: vec![],
                zeta: vec![],
                lam_pre: vec![],
                x_pre: vec![],
                dt: 0,
                dim: 4,
            },
            nx: 1,
            nu: 1,
            num_switches: 0,
        };
        assert_eq!(solve_dense_vector(&dense), Err(OracleError::Singular { deficiency: 1 }));
    }

    #[test]
    fn comparison_names_group() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let spec = InstanceSpec {
            nx: 2,
            nu: 1,
            counts: vec![2, 2],
            jumps: vec![false],
            conditions: vec![0],
            coupling: 1.0,
            joint_convex: true,
        };
        let sys = random_instance(&mut rng, &spec);
        let step = solve_dense(&assemble_dense(&sys).unwrap()).unwrap();
        let same = compare(&step, &step, 1e-8).unwrap();
        assert!(same.passes());
        assert_eq!(same.max_deviation(), 0.0);
        let mut other = step.clone();
        other.dt[0] += 1e-6;
        let report = compare(&other, &step, 1e-8).unwrap();
        assert_eq!(report.failing(), vec!["dt"]);
    }

    #[test]
    fn dense_residual_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..10 {
            let spec = InstanceSpec::random(&mut rng, 4, 2, 3, 12);
            let sys = random_instance(&mut rng, &spec);
            let dense = assemble_dense(&sys).unwrap();
            let step = solve_dense(&dense).unwrap();
            assert!(dense_residual(&dense, &step) <= 1e-10 * (1.0 + dense.rhs.amax()));
        }
    }
}
