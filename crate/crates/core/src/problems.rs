//! Built-in example problems.

use std::sync::Arc;

use crate::model::{
    AffineConstraint, Dynamics, EventSpec, JumpMap, LinearDynamics, Matrix, PhaseSpec, QuadraticStageCost,
    QuadraticStateCost, SecondOrder, SwitchedOcp, SwitchingCondition, Vector,
};

/// One of the three nonlinear subsystems of the analytic benchmark.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Subsystem {
    First,
    Second,
    Third,
}

impl Dynamics for Subsystem {
    fn eval(&self, x: &Vector, u: &Vector) -> Vector {
        let (x1, x2, u) = (x[0], x[1], u[0]);
        let v = match self {
            Subsystem::First => [x1 + u * x1.sin(), -x2 - u * x2.cos()],
            Subsystem::Second => [x2 + u * x2.sin(), -x1 - u * x1.cos()],
            Subsystem::Third => [-x1 - u * x1.sin(), x2 + u * x2.cos()],
        };
        Vector::from_column_slice(&v)
    }

    fn jacobians(&self, x: &Vector, u: &Vector) -> (Matrix, Matrix) {
        let (x1, x2, u) = (x[0], x[1], u[0]);
        let (a, b) = match self {
            Subsystem::First => (
                [1.0 + u * x1.cos(), 0.0, 0.0, -1.0 + u * x2.sin()],
                [x1.sin(), -x2.cos()],
            ),
            Subsystem::Second => (
                [0.0, 1.0 + u * x2.cos(), -1.0 + u * x1.sin(), 0.0],
                [x2.sin(), -x1.cos()],
            ),
            Subsystem::Third => (
                [-1.0 - u * x1.cos(), 0.0, 0.0, 1.0 - u * x2.sin()],
                [-x1.sin(), x2.cos()],
            ),
        };
        (Matrix::from_row_slice(2, 2, &a), Matrix::from_column_slice(2, 1, &b))
    }

    fn weighted_hessian(&self, x: &Vector, u: &Vector, w: &Vector) -> SecondOrder {
        let (x1, x2, u) = (x[0], x[1], u[0]);
        let (d11, d22, c1, c2) = match self {
            Subsystem::First => (-w[0] * u * x1.sin(), w[1] * u * x2.cos(), w[0] * x1.cos(), w[1] * x2.sin()),
            Subsystem::Second => (w[1] * u * x1.cos(), -w[0] * u * x2.sin(), w[1] * x1.sin(), w[0] * x2.cos()),
            Subsystem::Third => (w[0] * u * x1.sin(), -w[1] * u * x2.cos(), -w[0] * x1.cos(), -w[1] * x2.sin()),
        };
        SecondOrder {
            xx: Matrix::from_row_slice(2, 2, &[d11, 0.0, 0.0, d22]),
            xu: Matrix::from_column_slice(2, 1, &[c1, c2]),
            uu: Matrix::zeros(1, 1),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ThreeSubsystemConfig {
    pub x0: [f64; 2],
    pub x_ref: [f64; 2],
    pub t0: f64,
    pub tf: f64,
    pub min_dwell: f64,
    pub initial_switches: [f64; 2],
}

impl Default for ThreeSubsystemConfig {
    fn default() -> Self {
        Self {
            x0: [2.0, 3.0],
            x_ref: [1.0, -1.0],
            t0: 0.0,
            tf: 3.0,
            min_dwell: 0.01,
            initial_switches: [1.0, 2.0],
        }
    }
}

/// Three nonlinear subsystems switched twice over `[t0, tf]` with stage cost
/// `1/2 |x - x_ref|^2 + |u|^2` and terminal cost `1/2 |x - x_ref|^2`.
pub fn three_subsystem(cfg: &ThreeSubsystemConfig) -> SwitchedOcp {
    let x_ref = Vector::from_column_slice(&cfg.x_ref);
    let cost = Arc::new(QuadraticStageCost::diagonal(&[1.0, 1.0], &[2.0], x_ref.clone(), Vector::zeros(1)));
    let phases = [Subsystem::First, Subsystem::Second, Subsystem::Third]
        .into_iter()
        .map(|s| PhaseSpec::new(Arc::new(s), cost.clone()).with_min_dwell(cfg.min_dwell))
        .collect();
    SwitchedOcp {
        phases,
        terminal_cost: Arc::new(QuadraticStateCost::diagonal(&[1.0, 1.0], x_ref)),
        initial_state: Vector::from_column_slice(&cfg.x0),
        t0: cfg.t0,
        tf: cfg.tf,
        nx: 2,
        nu: 1,
    }
}

/// Splits `n` grid points over `phases` phases as evenly as possible, giving
/// the remainder to the leading phases (10 -> 4, 3, 3).
pub fn even_split(n: usize, phases: usize) -> Vec<usize> {
    (0..phases).map(|p| n / phases + usize::from(p < n % phases)).collect()
}

/// Ground contact condition `e(q) = q`.
#[derive(Clone, Copy, Debug, Default)]
pub struct GroundContact;

impl SwitchingCondition for GroundContact {
    fn dim(&self) -> usize {
        1
    }

    fn eval(&self, x: &Vector) -> Vector {
        Vector::from_element(1, x[0])
    }

    fn jacobian(&self, _x: &Vector) -> Matrix {
        Matrix::from_row_slice(1, 2, &[1.0, 0.0])
    }
}

/// Impact map `(q, v) -> (q, -gamma v)`.
#[derive(Clone, Copy, Debug)]
pub struct Restitution {
    pub gamma: f64,
}

impl JumpMap for Restitution {
    fn eval(&self, x: &Vector) -> Vector {
        Vector::from_column_slice(&[x[0], -self.gamma * x[1]])
    }

    fn jacobian(&self, _x: &Vector) -> Matrix {
        Matrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -self.gamma])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BouncingMassConfig {
    pub gravity: f64,
    pub restitution: f64,
    pub x0: [f64; 2],
    pub x_ref: [f64; 2],
    pub t0: f64,
    pub tf: f64,
    pub u_max: f64,
    pub min_dwell: f64,
    pub split: [usize; 2],
    pub initial_switch: f64,
}

impl Default for BouncingMassConfig {
    fn default() -> Self {
        Self {
            gravity: 9.81,
            restitution: 0.5,
            x0: [1.0, 0.0],
            x_ref: [0.5, 0.0],
            t0: 0.0,
            tf: 1.5,
            u_max: 20.0,
            min_dwell: 0.05,
            split: [10, 10],
            initial_switch: 0.45,
        }
    }
}

/// A point mass falling under gravity until it touches the ground (`q = 0`),
/// where its velocity is reflected with a restitution coefficient, followed
/// by a ground phase. Exercises state jumps and switching conditions.
pub fn bouncing_mass(cfg: &BouncingMassConfig) -> SwitchedOcp {
    let a = Matrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]);
    let b = Matrix::from_column_slice(2, 1, &[0.0, 1.0]);
    let flight = LinearDynamics {
        a: a.clone(),
        b: b.clone(),
        c: Vector::from_column_slice(&[0.0, -cfg.gravity]),
    };
    let ground = LinearDynamics { a, b, c: Vector::zeros(2) };
    let x_ref = Vector::from_column_slice(&cfg.x_ref);
    let cost = Arc::new(QuadraticStageCost::diagonal(&[1.0, 0.1], &[0.1], x_ref.clone(), Vector::zeros(1)));
    let bounds = Arc::new(AffineConstraint::control_bounds(2, &[-cfg.u_max], &[cfg.u_max]));
    let event = EventSpec {
        jump_map: Some(Arc::new(Restitution { gamma: cfg.restitution })),
        jump_cost: Some(Arc::new(QuadraticStateCost::diagonal(&[0.0, 0.1], Vector::zeros(2)))),
        switching_condition: Some(Arc::new(GroundContact)),
    };
    SwitchedOcp {
        phases: vec![
            PhaseSpec::new(Arc::new(flight), cost.clone())
                .with_constraint(bounds.clone())
                .with_min_dwell(cfg.min_dwell)
                .with_exit_event(event),
            PhaseSpec::new(Arc::new(ground), cost)
                .with_constraint(bounds)
                .with_min_dwell(cfg.min_dwell),
        ],
        terminal_cost: Arc::new(QuadraticStateCost::diagonal(&[10.0, 1.0], x_ref)),
        initial_state: Vector::from_column_slice(&cfg.x0),
        t0: cfg.t0,
        tf: cfg.tf,
        nx: 2,
        nu: 1,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::check_derivatives;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn benchmark_splits() {
        assert_eq!(even_split(10, 3), vec![4, 3, 3]);
        assert_eq!(even_split(50, 3), vec![17, 17, 16]);
        assert_eq!(even_split(100, 3), vec![34, 33, 33]);
        assert_eq!(even_split(500, 3), vec![167, 167, 166]);
    }

    #[test]
    fn derivatives_at_random_probes() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let problems = [three_subsystem(&Default::default()), bouncing_mass(&Default::default())];
        for ocp in &problems {
            for _ in 0..10 {
                let x = Vector::from_fn(2, |_, _| rng.gen_range(-3.0..3.0));
                let u = Vector::from_fn(1, |_, _| rng.gen_range(-3.0..3.0));
                let report = check_derivatives(ocp, &x, &u, 1e-6);
                assert!(report.passes(1e-5), "{report:?}");
            }
        }
    }
}
