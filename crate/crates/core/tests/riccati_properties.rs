use nalgebra::linalg::FullPivLU;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sto_core::grid::build_grid;
use sto_core::interior_point::initialize_slacks;
use sto_core::iterate::Iterate;
use sto_core::kkt::{assemble, linear_residual, HessianMode, KktSystem};
use sto_core::model::{Matrix, Vector};
use sto_core::oracle::{assemble_dense, random_instance, DenseKkt, InstanceSpec};
use sto_core::problems::{even_split, three_subsystem};
use sto_core::riccati::{backward, solve_step, ModificationPolicy, RiccatiOptions};
use sto_core::solver::{solve_nlp_observed, SolverOptions, Status};

fn exact() -> RiccatiOptions {
    RiccatiOptions {
        modification: ModificationPolicy::Off,
        dt_max: 0.5,
    }
}

fn rel(a: &Vector, b: &Vector) -> f64 {
    (a - b).amax() / (1.0 + b.amax())
}

/// Standard discrete-time LQR recursion with affine terms, written out
/// directly on the stage data. Returns `(dx, du, dlam)`.
fn textbook_lqr(sys: &KktSystem) -> (Vec<Vector>, Vec<Vector>, Vec<Vector>) {
    let n = sys.num_stages();
    let mut p_mat = sys.terminal.qxx.clone();
    let mut p_vec = sys.terminal.lx.clone();
    let mut costs = vec![(p_mat.clone(), p_vec.clone())];
    let mut gains = Vec::with_capacity(n);
    for st in sys.stages.iter().rev() {
        let qxx = &st.qxx + st.a.transpose() * &p_mat * &st.a;
        let quu = &st.quu + st.b.transpose() * &p_mat * &st.b;
        let qux = st.qxu.transpose() + st.b.transpose() * &p_mat * &st.a;
        let carried = &p_mat * &st.x_bar + &p_vec;
        let qx = &st.lx + st.a.transpose() * &carried;
        let qu = &st.lu + st.b.transpose() * &carried;
        let inv = quu.clone().try_inverse().expect("Quu invertible");
        let k_mat = -&inv * &qux;
        let k_vec = -&inv * &qu;
        p_mat = &qxx + k_mat.transpose() * &quu * &k_mat + k_mat.transpose() * &qux + qux.transpose() * &k_mat;
        p_vec = &qx + k_mat.transpose() * &quu * &k_vec + k_mat.transpose() * &qu + qux.transpose() * &k_vec;
        costs.push((p_mat.clone(), p_vec.clone()));
        gains.push((k_mat, k_vec));
    }
    costs.reverse();
    gains.reverse();
    let mut dx = vec![sys.init_residual.clone()];
    let mut du = Vec::with_capacity(n);
    for (st, (k_mat, k_vec)) in sys.stages.iter().zip(&gains) {
        let x = dx.last().unwrap();
        let u = k_mat * x + k_vec;
        dx.push(&st.a * x + &st.b * &u + &st.x_bar);
        du.push(u);
    }
    let dlam = dx.iter().zip(&costs).map(|(x, (p, s))| p * x + s).collect();
    (dx, du, dlam)
}

#[test]
fn single_phase_matches_textbook_lqr() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for _ in 0..30 {
        let spec = InstanceSpec {
            nx: rng.gen_range(1..=4),
            nu: rng.gen_range(1..=2),
            counts: vec![rng.gen_range(1..=15)],
            jumps: vec![],
            conditions: vec![],
            coupling: 1.0,
            joint_convex: true,
        };
        let sys = random_instance(&mut rng, &spec);
        let (step, _) = solve_step(&sys, &exact()).unwrap();
        let (dx, du, dlam) = textbook_lqr(&sys);
        for i in 0..dx.len() {
            assert!(rel(&step.dx[i], &dx[i]) <= 1e-10);
            assert!(rel(&step.dlam[i], &dlam[i]) <= 1e-10);
        }
        for i in 0..du.len() {
            assert!(rel(&step.du[i], &du[i]) <= 1e-10);
        }
    }
}

/// Minimizes the tail of the Newton QP with every unknown before `first_free`
/// and the listed switching-time directions held at the given values.
fn tail_argmin(dense: &DenseKkt, first_free: usize, fixed_dt: &[usize], fixed: &Vector) -> Vector {
    let lay = &dense.layout;
    let is_free = |r: usize| r >= first_free && !(r >= lay.dt && fixed_dt.contains(&(r - lay.dt)));
    let free: Vec<usize> = (0..lay.dim).filter(|&r| is_free(r)).collect();
    let held: Vec<usize> = (0..lay.dim).filter(|&r| !is_free(r)).collect();
    let m = Matrix::from_fn(free.len(), free.len(), |a, b| dense.matrix[(free[a], free[b])]);
    let rhs = Vector::from_fn(free.len(), |a, _| {
        -dense.rhs[free[a]] - held.iter().map(|&c| dense.matrix[(free[a], c)] * fixed[c]).sum::<f64>()
    });
    let sol = FullPivLU::new(m).solve(&rhs).expect("tail problem nonsingular");
    let mut out = fixed.clone();
    for (a, &r) in free.iter().enumerate() {
        out[r] = sol[a];
    }
    out
}

#[test]
fn feedback_laws_solve_the_tail_problems() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let mut checked = 0;
    while checked < 25 {
        let spec = InstanceSpec::random(&mut rng, 3, 2, 3, 9);
        let sys = random_instance(&mut rng, &spec);
        let Ok(fact) = backward(&sys, &exact()) else {
            continue;
        };
        let dense = assemble_dense(&sys).unwrap();
        let lay = &dense.layout;
        let (nx, nu, k_sw) = (sys.nx, sys.nu, sys.num_switches());
        for p in 0..sys.num_phases() {
            for i in sys.stage_range(p) {
                // arbitrary state and switching-time directions
                let fixed = Vector::from_fn(lay.dim, |_, _| rng.gen_range(-1.0..1.0));
                let held: Vec<usize> = (0..k_sw).filter(|&j| j <= p).collect();
                let v = tail_argmin(&dense, lay.x[i] + nx, &held, &fixed);
                let dt: Vec<f64> = (0..k_sw).map(|j| v[lay.dt + j]).collect();
                let tau = -dt.get(p).copied().unwrap_or(0.0);
                let rs = &fact.stages[i];
                let dx = v.rows(lay.x[i], nx).into_owned();
                let du = &rs.k_gain * &dx + &rs.t_gain * sys.delta(p, &dt) + &rs.w_gain * tau + &rs.k;
                let reference = v.rows(lay.u[i], nu).into_owned();
                assert!(rel(&du, &reference) <= 1e-8, "stage {i}: {du} vs {reference}");
            }
            if p < k_sw {
                let start = sys.phase_start[p];
                let fixed = Vector::from_fn(lay.dim, |_, _| rng.gen_range(-1.0..1.0));
                let held: Vec<usize> = (0..p).collect();
                let v = tail_argmin(&dense, lay.x[start] + nx, &held, &fixed);
                let tr = &fact.transitions[p];
                let prev = if p == 0 { 0.0 } else { v[lay.dt + p - 1] };
                let dx = v.rows(lay.x[start], nx).into_owned();
                let dt = -(tr.psi_minus_phi.dot(&dx) - tr.xi_minus_chi * prev + tr.eta_minus_iota) / tr.sigma;
                let reference = v[lay.dt + p];
                assert!((dt - reference).abs() <= 1e-8 * (1.0 + reference.abs()), "switch {p}: {dt} vs {reference}");
            }
        }
        checked += 1;
    }
}

#[test]
fn linear_residual_is_at_rounding_level() {
    let mut rng = ChaCha8Rng::seed_from_u64(53);
    let mut checked = 0;
    while checked < 100 {
        let spec = InstanceSpec::random(&mut rng, 4, 2, 3, 12);
        let sys = random_instance(&mut rng, &spec);
        let Ok((step, _)) = solve_step(&sys, &exact()) else {
            continue;
        };
        assert!(linear_residual(&sys, &step, false) <= 1e-10 * (1.0 + sys.data_scale()));
        checked += 1;
    }
}

#[test]
fn modified_step_at_initial_guess_is_bounded() {
    let ocp = three_subsystem(&Default::default());
    let opts = RiccatiOptions {
        modification: ModificationPolicy::Adaptive,
        dt_max: 0.5,
    };
    for n in [10, 50, 100, 500] {
        let grid = build_grid(&ocp, &even_split(n, 3), &[1.0, 2.0]).unwrap();
        let mut it = Iterate::constant(&ocp, &grid, &ocp.initial_state, &Vector::zeros(1), 0.1);
        initialize_slacks(&ocp, &grid, &mut it, &Default::default());
        let sys = assemble(&ocp, &grid, &it, HessianMode::Exact, false).unwrap();
        let (step, report) = solve_step(&sys, &opts).unwrap();
        assert!(report.sigma.iter().all(|&s| s > 0.0));
        assert!(step.dt.iter().all(|d| d.abs() <= 2.0 * opts.dt_max), "N = {n}: {:?}", step.dt);
    }
}

#[test]
fn exact_backward_succeeds_near_convergence() {
    let ocp = three_subsystem(&Default::default());
    for n in [10, 50, 100, 500] {
        let grid = build_grid(&ocp, &even_split(n, 3), &[1.0, 2.0]).unwrap();
        let opts = SolverOptions::exact_modified();
        let mut init = Iterate::constant(&ocp, &grid, &ocp.initial_state, &Vector::zeros(1), opts.ip.eps0);
        initialize_slacks(&ocp, &grid, &mut init, &opts.ip);
        let mut outcomes = Vec::new();
        let (res, _) = solve_nlp_observed(&ocp, &grid, init, &opts, &mut |s| {
            outcomes.push(backward(s.system, &exact()).map(|f| f.report()));
        })
        .unwrap();
        assert_eq!(res.status, Status::Converged);
        assert!(outcomes.len() >= 3);
        for outcome in &outcomes[outcomes.len() - 3..] {
            let report = outcome.as_ref().expect("exact backward pass");
            assert!(report.sigma_raw.iter().all(|&s| s > 0.0));
            assert!(report.min_chol_diag.iter().flatten().all(|&d| d > 0.0));
        }
    }
}
