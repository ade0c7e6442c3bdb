//! Optimal control of switched systems with a fixed mode sequence.
//!
//! The switching times are optimized together with the control inputs by a
//! primal-dual interior-point Newton method. Each Newton step is computed in
//! O(N) by a Riccati recursion that eliminates the switching times phase by
//! phase.

pub mod grid;
pub mod interior_point;
pub mod iterate;
pub mod kkt;
pub mod model;
pub mod oracle;
pub mod problems;
pub mod riccati;
pub mod solver;

pub use grid::{build_grid, MeshOptions, MeshPolicy, TimeGrid};
pub use iterate::{Iterate, NewtonStep};
pub use kkt::HessianMode;
pub use model::{SwitchedOcp, Vector, Matrix};
pub use riccati::ModificationPolicy;
pub use solver::{solve, solve_nlp, ConvergenceLog, Solution, SolverOptions, Status};
