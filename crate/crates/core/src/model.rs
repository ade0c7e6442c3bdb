//! Switched optimal control problems and the evaluation contract for the
//! user-supplied functions.
//!
//! A problem is an ordered list of phases. Phase `k` is governed by its own
//! dynamics, stage cost and (optional) path constraints, and ends with an
//! optional event describing the switch into phase `k + 1`: a state jump, a
//! cost on the pre-jump state, and a switching condition `e(x(t_k-)) = 0`.
//!
//! All derivatives are supplied analytically. Second derivatives of vector
//! valued functions are requested contracted with a weight vector (the
//! relevant Lagrange multiplier), which is all the Newton iteration needs.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

pub type Vector = DVector<f64>;
pub type Matrix = DMatrix<f64>;

/// Second-order blocks of a scalar function of `(x, u)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SecondOrder {
    pub xx: Matrix,
    pub xu: Matrix,
    pub uu: Matrix,
}

impl SecondOrder {
    pub fn zeros(nx: usize, nu: usize) -> Self {
        Self {
            xx: Matrix::zeros(nx, nx),
            xu: Matrix::zeros(nx, nu),
            uu: Matrix::zeros(nu, nu),
        }
    }
}

/// Continuous-time dynamics `x' = f(x, u)` of one phase.
pub trait Dynamics: Send + Sync {
    fn eval(&self, x: &Vector, u: &Vector) -> Vector;

    /// Returns `(df/dx, df/du)`.
    fn jacobians(&self, x: &Vector, u: &Vector) -> (Matrix, Matrix);

    /// Second derivatives of `weight^T f(x, u)`. Only needed for exact
    /// Hessians; the default treats the dynamics as linear.
    fn weighted_hessian(&self, x: &Vector, u: &Vector, weight: &Vector) -> SecondOrder {
        let _ = weight;
        SecondOrder::zeros(x.len(), u.len())
    }
}

/// Running cost `l(x, u)` of one phase.
pub trait StageCost: Send + Sync {
    fn eval(&self, x: &Vector, u: &Vector) -> f64;
    /// Returns `(dl/dx, dl/du)`.
    fn gradient(&self, x: &Vector, u: &Vector) -> (Vector, Vector);
    fn hessian(&self, x: &Vector, u: &Vector) -> SecondOrder;
}

/// Path constraints `g(x, u) <= 0` of one phase.
pub trait PathConstraint: Send + Sync {
    fn dim(&self) -> usize;
    fn eval(&self, x: &Vector, u: &Vector) -> Vector;
    fn jacobians(&self, x: &Vector, u: &Vector) -> (Matrix, Matrix);
    fn weighted_hessian(&self, x: &Vector, u: &Vector, weight: &Vector) -> SecondOrder {
        let _ = weight;
        SecondOrder::zeros(x.len(), u.len())
    }
}

/// A scalar function of the state: terminal cost or cost on a pre-jump state.
pub trait StateCost: Send + Sync {
    fn eval(&self, x: &Vector) -> f64;
    fn gradient(&self, x: &Vector) -> Vector;
    fn hessian(&self, x: &Vector) -> Matrix;
}

/// Instantaneous state reset `x+ = f_j(x-)` applied at a switch.
pub trait JumpMap: Send + Sync {
    fn eval(&self, x: &Vector) -> Vector;
    fn jacobian(&self, x: &Vector) -> Matrix;
    fn weighted_hessian(&self, x: &Vector, weight: &Vector) -> Matrix {
        let _ = weight;
        Matrix::zeros(x.len(), x.len())
    }
}

/// State equality `e(x(t_k-)) = 0` that must hold at a switch.
///
/// The state must be partitioned as `x = (q, v)` with equally sized halves and
/// `e` may depend on `q` only (relative degree two).
pub trait SwitchingCondition: Send + Sync {
    fn dim(&self) -> usize;
    fn eval(&self, x: &Vector) -> Vector;
    fn jacobian(&self, x: &Vector) -> Matrix;
    fn weighted_hessian(&self, x: &Vector, weight: &Vector) -> Matrix {
        let _ = weight;
        Matrix::zeros(x.len(), x.len())
    }
}

/// What happens at the switch terminating a phase.
#[derive(Clone, Default)]
pub struct EventSpec {
    pub jump_map: Option<Arc<dyn JumpMap>>,
    pub jump_cost: Option<Arc<dyn StateCost>>,
    pub switching_condition: Option<Arc<dyn SwitchingCondition>>,
}

impl EventSpec {
    /// A jump map or jump cost introduces an auxiliary pre-jump grid point.
    pub fn has_jump(&self) -> bool {
        self.jump_map.is_some() || self.jump_cost.is_some()
    }

    pub fn condition_dim(&self) -> usize {
        self.switching_condition.as_ref().map_or(0, |c| c.dim())
    }
}

impl fmt::Debug for EventSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("EventSpec")
            .field("jump_map", &self.jump_map.is_some())
            .field("jump_cost", &self.jump_cost.is_some())
            .field("switching_condition", &self.switching_condition.is_some())
            .finish()
    }
}

#[derive(Clone)]
pub struct PhaseSpec {
    pub dynamics: Arc<dyn Dynamics>,
    pub cost: Arc<dyn StageCost>,
    pub constraint: Option<Arc<dyn PathConstraint>>,
    /// Minimum dwell time of the phase, seconds.
    pub min_dwell: f64,
    pub exit_event: Option<EventSpec>,
}

impl PhaseSpec {
    pub fn new(dynamics: Arc<dyn Dynamics>, cost: Arc<dyn StageCost>) -> Self {
        Self {
            dynamics,
            cost,
            constraint: None,
            min_dwell: 0.0,
            exit_event: None,
        }
    }

    pub fn with_constraint(mut self, constraint: Arc<dyn PathConstraint>) -> Self {
        self.constraint = Some(constraint);
        self
    }

    pub fn with_min_dwell(mut self, min_dwell: f64) -> Self {
        self.min_dwell = min_dwell;
        self
    }

    pub fn with_exit_event(mut self, event: EventSpec) -> Self {
        self.exit_event = Some(event);
        self
    }

    pub fn num_constraints(&self) -> usize {
        self.constraint.as_ref().map_or(0, |g| g.dim())
    }
}

impl fmt::Debug for PhaseSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PhaseSpec")
            .field("num_constraints", &self.num_constraints())
            .field("min_dwell", &self.min_dwell)
            .field("exit_event", &self.exit_event)
            .finish()
    }
}

/// Continuous-time optimal control problem of a switched system with a fixed
/// mode sequence. Immutable once built; safe to share across threads.
#[derive(Clone)]
pub struct SwitchedOcp {
    pub phases: Vec<PhaseSpec>,
    pub terminal_cost: Arc<dyn StateCost>,
    pub initial_state: Vector,
    pub t0: f64,
    pub tf: f64,
    pub nx: usize,
    pub nu: usize,
}

impl SwitchedOcp {
    pub fn num_phases(&self) -> usize {
        self.phases.len()
    }

    pub fn num_switches(&self) -> usize {
        self.phases.len().saturating_sub(1)
    }

    /// Event at switch `j` (between phase `j` and `j + 1`, zero based).
    pub fn event(&self, switch: usize) -> Option<&EventSpec> {
        self.phases.get(switch).and_then(|p| p.exit_event.as_ref())
    }

    pub fn has_jump(&self, switch: usize) -> bool {
        self.event(switch).is_some_and(EventSpec::has_jump)
    }

    pub fn condition_dim(&self, switch: usize) -> usize {
        self.event(switch).map_or(0, EventSpec::condition_dim)
    }
}

impl fmt::Debug for SwitchedOcp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SwitchedOcp")
            .field("phases", &self.phases)
            .field("t0", &self.t0)
            .field("tf", &self.tf)
            .field("nx", &self.nx)
            .field("nu", &self.nu)
            .finish()
    }
}

// ---------------------------------------------------------------------------
// Validation
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ViolationKind {
    Horizon,
    NegativeDwell,
    DwellExceedsHorizon,
    EmptyProblem,
    Dimension,
    FinalPhaseEvent,
    ConditionNotPartitioned,
    ConditionVelocityDependence,
    DynamicsNotPartitioned,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Violation {
    /// One-based phase number, when the violation belongs to a phase.
    pub phase: Option<usize>,
    pub kind: ViolationKind,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.phase {
            Some(p) => write!(f, "phase {p}: {}", self.message),
            None => write!(f, "{}", self.message),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.violations.is_empty()
    }

    fn push(&mut self, phase: Option<usize>, kind: ViolationKind, message: impl Into<String>) {
        self.violations.push(Violation {
            phase,
            kind,
            message: message.into(),
        });
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.violations.is_empty() {
            return write!(f, "no violations");
        }
        for (n, v) in self.violations.iter().enumerate() {
            if n > 0 {
                writeln!(f)?;
            }
            write!(f, "{v}")?;
        }
        Ok(())
    }
}

const STRUCTURE_TOL: f64 = 1e-12;

fn probe_state(nx: usize) -> Vector {
    Vector::from_fn(nx, |i, _| 0.3 + 0.1 * i as f64)
}

fn probe_control(nu: usize) -> Vector {
    Vector::from_fn(nu, |i, _| 0.2 + 0.1 * i as f64)
}

/// Checks every structural invariant of `ocp`. Function shapes and the
/// switching-condition structure are checked at a fixed probe point, so the
/// report is a pure function of the problem.
pub fn validate(ocp: &SwitchedOcp) -> ValidationReport {
    let mut report = ValidationReport::default();
    if !(ocp.t0 < ocp.tf) || !ocp.t0.is_finite() || !ocp.tf.is_finite() {
        report.push(
            None,
            ViolationKind::Horizon,
            format!("horizon requires t0 < tf, got t0 = {}, tf = {}", ocp.t0, ocp.tf),
        );
    }
    if ocp.phases.is_empty() {
        report.push(None, ViolationKind::EmptyProblem, "problem has no phases");
        return report;
    }
    if ocp.nx == 0 || ocp.nu == 0 {
        report.push(None, ViolationKind::Dimension, "state and control dimensions must be positive");
        return report;
    }
    if ocp.initial_state.len() != ocp.nx {
        report.push(
            None,
            ViolationKind::Dimension,
            format!("initial state has length {}, expected {}", ocp.initial_state.len(), ocp.nx),
        );
    }

    let mut dwell_sum = 0.0;
    for (k, phase) in ocp.phases.iter().enumerate() {
        let p = Some(k + 1);
        if !(phase.min_dwell >= 0.0) {
            report.push(
                p,
                ViolationKind::NegativeDwell,
                format!("minimum dwell time {} is negative", phase.min_dwell),
            );
        } else {
            dwell_sum += phase.min_dwell;
        }
        check_phase_shapes(ocp, k, phase, &mut report);
        if let Some(event) = &phase.exit_event {
            if k + 1 == ocp.phases.len() {
                report.push(p, ViolationKind::FinalPhaseEvent, "the final phase cannot have an exit event");
            }
            check_event(ocp, k, event, &mut report);
        }
    }
    if dwell_sum > ocp.tf - ocp.t0 {
        report.push(
            None,
            ViolationKind::DwellExceedsHorizon,
            format!(
                "sum of minimum dwell times {dwell_sum} exceeds the horizon length {}",
                ocp.tf - ocp.t0
            ),
        );
    }

    let x = probe_state(ocp.nx);
    let grad = ocp.terminal_cost.gradient(&x);
    let hess = ocp.terminal_cost.hessian(&x);
    if grad.len() != ocp.nx || hess.shape() != (ocp.nx, ocp.nx) {
        report.push(None, ViolationKind::Dimension, "terminal cost derivative shapes do not match nx");
    }
    report
}

fn check_phase_shapes(ocp: &SwitchedOcp, k: usize, phase: &PhaseSpec, report: &mut ValidationReport) {
    let (nx, nu) = (ocp.nx, ocp.nu);
    let p = Some(k + 1);
    let x = probe_state(nx);
    let u = probe_control(nu);
    let fx = phase.dynamics.eval(&x, &u);
    let (ax, bu) = phase.dynamics.jacobians(&x, &u);
    if fx.len() != nx || ax.shape() != (nx, nx) || bu.shape() != (nx, nu) {
        report.push(p, ViolationKind::Dimension, "dynamics output or Jacobian shapes do not match (nx, nu)");
    }
    let (lx, lu) = phase.cost.gradient(&x, &u);
    let lh = phase.cost.hessian(&x, &u);
    if lx.len() != nx || lu.len() != nu || lh.xx.shape() != (nx, nx) || lh.xu.shape() != (nx, nu) || lh.uu.shape() != (nu, nu)
    {
        report.push(p, ViolationKind::Dimension, "stage cost derivative shapes do not match (nx, nu)");
    }
    if let Some(g) = &phase.constraint {
        let ng = g.dim();
        let gv = g.eval(&x, &u);
        let (gx, gu) = g.jacobians(&x, &u);
        if gv.len() != ng || gx.shape() != (ng, nx) || gu.shape() != (ng, nu) {
            report.push(p, ViolationKind::Dimension, "path constraint output or Jacobian shapes do not match");
        }
    }
}

fn check_event(ocp: &SwitchedOcp, k: usize, event: &EventSpec, report: &mut ValidationReport) {
    let nx = ocp.nx;
    let p = Some(k + 1);
    let x = probe_state(nx);
    if let Some(jump) = &event.jump_map {
        if jump.eval(&x).len() != nx || jump.jacobian(&x).shape() != (nx, nx) {
            report.push(p, ViolationKind::Dimension, "jump map output or Jacobian shapes do not match nx");
        }
    }
    if let Some(cost) = &event.jump_cost {
        if cost.gradient(&x).len() != nx || cost.hessian(&x).shape() != (nx, nx) {
            report.push(p, ViolationKind::Dimension, "jump cost derivative shapes do not match nx");
        }
    }
    let Some(cond) = &event.switching_condition else {
        return;
    };
    if nx % 2 != 0 {
        report.push(
            p,
            ViolationKind::ConditionNotPartitioned,
            "switching condition requires a state partitioned into equally sized (q, v)",
        );
        return;
    }
    let n = nx / 2;
    let ne = cond.dim();
    let jac = cond.jacobian(&x);
    if cond.eval(&x).len() != ne || jac.shape() != (ne, nx) {
        report.push(p, ViolationKind::Dimension, "switching condition output or Jacobian shapes do not match");
        return;
    }
    if jac.columns(n, n).iter().any(|v| v.abs() > STRUCTURE_TOL) {
        report.push(
            p,
            ViolationKind::ConditionVelocityDependence,
            "switching condition Jacobian must have the structure [de/dq, 0] (nonzero velocity block)",
        );
    }
    let u = probe_control(ocp.nu);
    let (_, bu) = ocp.phases[k].dynamics.jacobians(&x, &u);
    if bu.shape() == (nx, ocp.nu) && bu.rows(0, n).iter().any(|v| v.abs() > STRUCTURE_TOL) {
        report.push(
            p,
            ViolationKind::DynamicsNotPartitioned,
            "switching condition requires position dynamics independent of the control",
        );
    }
}

// ---------------------------------------------------------------------------
// Derivative checks
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct DerivativeCheck {
    pub function: String,
    /// Max absolute deviation from central differences, or the reason the
    /// probe could not be evaluated.
    pub deviation: Result<f64, String>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DerivativeReport {
    pub checks: Vec<DerivativeCheck>,
}

impl DerivativeReport {
    pub fn max_deviation(&self) -> f64 {
        self.checks
            .iter()
            .map(|c| c.deviation.as_ref().copied().unwrap_or(f64::INFINITY))
            .fold(0.0, f64::max)
    }

    /// Checks whose deviation exceeds `tol` or that failed to evaluate.
    pub fn flagged(&self, tol: f64) -> Vec<&DerivativeCheck> {
        self.checks
            .iter()
            .filter(|c| c.deviation.as_ref().map_or(true, |d| !(*d <= tol)))
            .collect()
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.flagged(tol).is_empty()
    }

    pub fn get(&self, function: &str) -> Option<&DerivativeCheck> {
        self.checks.iter().find(|c| c.function == function)
    }
}

fn fd_jacobian(f: impl Fn(&Vector) -> Vector, x: &Vector, h: f64) -> Matrix {
    let f0 = f(x);
    let mut jac = Matrix::zeros(f0.len(), x.len());
    let mut xp = x.clone();
    for j in 0..x.len() {
        xp[j] = x[j] + h;
        let fp = f(&xp);
        xp[j] = x[j] - h;
        let fm = f(&xp);
        xp[j] = x[j];
        jac.set_column(j, &((fp - fm) / (2.0 * h)));
    }
    jac
}

fn fd_gradient(f: impl Fn(&Vector) -> f64, x: &Vector, h: f64) -> Vector {
    let mut g = Vector::zeros(x.len());
    let mut xp = x.clone();
    for j in 0..x.len() {
        xp[j] = x[j] + h;
        let fp = f(&xp);
        xp[j] = x[j] - h;
        let fm = f(&xp);
        xp[j] = x[j];
        g[j] = (fp - fm) / (2.0 * h);
    }
    g
}

fn deviation(analytic: &Matrix, numeric: &Matrix) -> Result<f64, String> {
    if analytic.shape() != numeric.shape() {
        return Err(format!(
            "shape mismatch: analytic {:?}, expected {:?}",
            analytic.shape(),
            numeric.shape()
        ));
    }
    if analytic.iter().chain(numeric.iter()).any(|v| !v.is_finite()) {
        return Err("non-finite value at probe point".to_string());
    }
    Ok(analytic
        .iter()
        .zip(numeric.iter())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max))
}

fn split(xu: &Vector, nx: usize) -> (Vector, Vector) {
    (xu.rows(0, nx).into_owned(), xu.rows(nx, xu.len() - nx).into_owned())
}

fn join(x: &Vector, u: &Vector) -> Vector {
    Vector::from_iterator(x.len() + u.len(), x.iter().chain(u.iter()).copied())
}

fn stack_second_order(h: &SecondOrder) -> Matrix {
    let (nx, nu) = (h.xx.nrows(), h.uu.nrows());
    let mut m = Matrix::zeros(nx + nu, nx + nu);
    m.view_mut((0, 0), (nx, nx)).copy_from(&h.xx);
    m.view_mut((0, nx), (nx, nu)).copy_from(&h.xu);
    m.view_mut((nx, 0), (nu, nx)).copy_from(&h.xu.transpose());
    m.view_mut((nx, nx), (nu, nu)).copy_from(&h.uu);
    m
}

fn hstack(a: &Matrix, b: &Matrix) -> Matrix {
    let mut m = Matrix::zeros(a.nrows(), a.ncols() + b.ncols());
    m.view_mut((0, 0), a.shape()).copy_from(a);
    m.view_mut((0, a.ncols()), b.shape()).copy_from(b);
    m
}

fn weight_vector(n: usize) -> Vector {
    Vector::from_fn(n, |i, _| 1.0 - 0.25 * i as f64)
}

/// Compares every user-supplied derivative at `(x, u)` against central finite
/// differences with step `h`. Second derivatives of vector-valued functions
/// are checked contracted with a fixed weight vector.
pub fn check_derivatives(ocp: &SwitchedOcp, x: &Vector, u: &Vector, h: f64) -> DerivativeReport {
    assert!(h > 0.0, "finite-difference step must be positive");
    let nx = x.len();
    let xu = join(x, u);
    let mut checks = Vec::new();
    let mut push = |function: String, deviation: Result<f64, String>| {
        checks.push(DerivativeCheck { function, deviation });
    };

    for (k, phase) in ocp.phases.iter().enumerate() {
        let name = |what: &str| format!("phase {} {what}", k + 1);
        let dyn_ = &phase.dynamics;
        let (ax, bu) = dyn_.jacobians(x, u);
        let num = fd_jacobian(|v| { let (x, u) = split(v, nx); dyn_.eval(&x, &u) }, &xu, h);
        push(name("dynamics jacobian"), deviation(&hstack(&ax, &bu), &num));

        let w = weight_vector(nx);
        let hw = stack_second_order(&dyn_.weighted_hessian(x, u, &w));
        let num = fd_jacobian(
            |v| {
                let (x, u) = split(v, nx);
                let (a, b) = dyn_.jacobians(&x, &u);
                join(&(a.transpose() * &w), &(b.transpose() * &w))
            },
            &xu,
            h,
        );
        push(name("dynamics hessian"), deviation(&hw, &num));

        let cost = &phase.cost;
        let (lx, lu) = cost.gradient(x, u);
        let num = fd_gradient(|v| { let (x, u) = split(v, nx); cost.eval(&x, &u) }, &xu, h);
        push(name("cost gradient"), deviation(&Matrix::from_column_slice(nx + u.len(), 1, join(&lx, &lu).as_slice()), &Matrix::from_column_slice(nx + u.len(), 1, num.as_slice())));
        let hl = stack_second_order(&cost.hessian(x, u));
        let num = fd_jacobian(|v| { let (x, u) = split(v, nx); let (gx, gu) = cost.gradient(&x, &u); join(&gx, &gu) }, &xu, h);
        push(name("cost hessian"), deviation(&hl, &num));

        if let Some(g) = &phase.constraint {
            let (gx, gu) = g.jacobians(x, u);
            let num = fd_jacobian(|v| { let (x, u) = split(v, nx); g.eval(&x, &u) }, &xu, h);
            push(name("constraint jacobian"), deviation(&hstack(&gx, &gu), &num));
            let w = weight_vector(g.dim());
            let hg = stack_second_order(&g.weighted_hessian(x, u, &w));
            let num = fd_jacobian(
                |v| {
                    let (x, u) = split(v, nx);
                    let (a, b) = g.jacobians(&x, &u);
                    join(&(a.transpose() * &w), &(b.transpose() * &w))
                },
                &xu,
                h,
            );
            push(name("constraint hessian"), deviation(&hg, &num));
        }

        if let Some(event) = &phase.exit_event {
            if let Some(jump) = &event.jump_map {
                let num = fd_jacobian(|v| jump.eval(v), x, h);
                push(name("jump map jacobian"), deviation(&jump.jacobian(x), &num));
                let w = weight_vector(nx);
                let num = fd_jacobian(|v| jump.jacobian(v).transpose() * &w, x, h);
                push(name("jump map hessian"), deviation(&jump.weighted_hessian(x, &w), &num));
            }
            if let Some(cost) = &event.jump_cost {
                push_state_cost(&mut push, name("jump cost"), cost.as_ref(), x, h);
            }
            if let Some(cond) = &event.switching_condition {
                let num = fd_jacobian(|v| cond.eval(v), x, h);
                push(name("switching condition jacobian"), deviation(&cond.jacobian(x), &num));
                let w = weight_vector(cond.dim());
                let num = fd_jacobian(|v| cond.jacobian(v).transpose() * &w, x, h);
                push(name("switching condition hessian"), deviation(&cond.weighted_hessian(x, &w), &num));
            }
        }
    }
    push_state_cost(&mut push, "terminal cost".to_string(), ocp.terminal_cost.as_ref(), x, h);
    DerivativeReport { checks }
}

fn push_state_cost(
    push: &mut impl FnMut(String, Result<f64, String>),
    name: String,
    cost: &dyn StateCost,
    x: &Vector,
    h: f64,
) {
    let n = x.len();
    let num = fd_gradient(|v| cost.eval(v), x, h);
    let grad = cost.gradient(x);
    push(
        format!("{name} gradient"),
        deviation(&Matrix::from_column_slice(grad.len(), 1, grad.as_slice()), &Matrix::from_column_slice(n, 1, num.as_slice())),
    );
    let num = fd_jacobian(|v| cost.gradient(v), x, h);
    push(format!("{name} hessian"), deviation(&cost.hessian(x), &num));
}

// ---------------------------------------------------------------------------
// Common building blocks
// ---------------------------------------------------------------------------

/// `f(x, u) = A x + B u + c`.
#[derive(Clone, Debug)]
pub struct LinearDynamics {
    pub a: Matrix,
    pub b: Matrix,
    pub c: Vector,
}

impl Dynamics for LinearDynamics {
    fn eval(&self, x: &Vector, u: &Vector) -> Vector {
        &self.a * x + &self.b * u + &self.c
    }

    fn jacobians(&self, _x: &Vector, _u: &Vector) -> (Matrix, Matrix) {
        (self.a.clone(), self.b.clone())
    }
}

/// `l(x, u) = 1/2 (x - x_ref)^T Q (x - x_ref) + (x - x_ref)^T S (u - u_ref)
///            + 1/2 (u - u_ref)^T R (u - u_ref)`.
#[derive(Clone, Debug)]
pub struct QuadraticStageCost {
    pub q: Matrix,
    pub s: Matrix,
    pub r: Matrix,
    pub x_ref: Vector,
    pub u_ref: Vector,
}

impl QuadraticStageCost {
    pub fn diagonal(q: &[f64], r: &[f64], x_ref: Vector, u_ref: Vector) -> Self {
        Self {
            q: Matrix::from_diagonal(&Vector::from_column_slice(q)),
            s: Matrix::zeros(q.len(), r.len()),
            r: Matrix::from_diagonal(&Vector::from_column_slice(r)),
            x_ref,
            u_ref,
        }
    }
}

impl StageCost for QuadraticStageCost {
    fn eval(&self, x: &Vector, u: &Vector) -> f64 {
        let dx = x - &self.x_ref;
        let du = u - &self.u_ref;
        0.5 * dx.dot(&(&self.q * &dx)) + dx.dot(&(&self.s * &du)) + 0.5 * du.dot(&(&self.r * &du))
    }

    fn gradient(&self, x: &Vector, u: &Vector) -> (Vector, Vector) {
        let dx = x - &self.x_ref;
        let du = u - &self.u_ref;
        (&self.q * &dx + &self.s * &du, &self.r * &du + self.s.tr_mul(&dx))
    }

    fn hessian(&self, _x: &Vector, _u: &Vector) -> SecondOrder {
        SecondOrder {
            xx: self.q.clone(),
            xu: self.s.clone(),
            uu: self.r.clone(),
        }
    }
}

/// `V(x) = 1/2 (x - x_ref)^T Q (x - x_ref)`.
#[derive(Clone, Debug)]
pub struct QuadraticStateCost {
    pub q: Matrix,
    pub x_ref: Vector,
}

impl QuadraticStateCost {
    pub fn diagonal(q: &[f64], x_ref: Vector) -> Self {
        Self {
            q: Matrix::from_diagonal(&Vector::from_column_slice(q)),
            x_ref,
        }
    }
}

impl StateCost for QuadraticStateCost {
    fn eval(&self, x: &Vector) -> f64 {
        let dx = x - &self.x_ref;
        0.5 * dx.dot(&(&self.q * &dx))
    }

    fn gradient(&self, x: &Vector) -> Vector {
        &self.q * (x - &self.x_ref)
    }

    fn hessian(&self, _x: &Vector) -> Matrix {
        self.q.clone()
    }
}

/// Affine path constraints `G_x x + G_u u + c <= 0`.
#[derive(Clone, Debug)]
pub struct AffineConstraint {
    pub gx: Matrix,
    pub gu: Matrix,
    pub c: Vector,
}

impl AffineConstraint {
    /// Box bounds `lower <= u <= upper` on the control.
    pub fn control_bounds(nx: usize, lower: &[f64], upper: &[f64]) -> Self {
        let nu = lower.len();
        assert_eq!(nu, upper.len());
        let mut gu = Matrix::zeros(2 * nu, nu);
        let mut c = Vector::zeros(2 * nu);
        for j in 0..nu {
            gu[(j, j)] = 1.0;
            c[j] = -upper[j];
            gu[(nu + j, j)] = -1.0;
            c[nu + j] = lower[j];
        }
        Self {
            gx: Matrix::zeros(2 * nu, nx),
            gu,
            c,
        }
    }
}

impl PathConstraint for AffineConstraint {
    fn dim(&self) -> usize {
        self.c.len()
    }

    fn eval(&self, x: &Vector, u: &Vector) -> Vector {
        &self.gx * x + &self.gu * u + &self.c
    }

    fn jacobians(&self, _x: &Vector, _u: &Vector) -> (Matrix, Matrix) {
        (self.gx.clone(), self.gu.clone())
    }
}
