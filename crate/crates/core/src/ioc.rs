//! Constrained inverse optimal control for cost-linear problems.
//!
//! With `c = θᵀφ(x, u)` and everything else known, the stationarity
//! conditions along an observed trajectory are linear in θ and in the value
//! gradient `V_{m+1}` at the end of the observation window:
//!
//! ```text
//! r = J₁ θ + J₂ V_{m+1} + J₃
//! ```
//!
//! Inequalities enter through the barrier multipliers `λ = −μ/g`, equalities
//! through `ν = h/μ`. The value gradients `V_1..V_{m+1}` satisfy a block
//! upper-bidiagonal system solved by back-substitution.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::benchmarks::parameter_residual;
use crate::ddp::{solve_ipddp, SolverConfig, SolverError};
use crate::gradient::{build_augmented, gradient_backward, GradientError};
use crate::demo::{DemoMode, Demonstration};
use crate::linalg::{lstsq, numerical_rank, Mat, Vector};
use crate::problem::{OcProblem, ProblemError, Var, Wrt};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum IocError {
    #[error("inequality {index} is not strictly satisfied at stage {stage}")]
    NotInterior { stage: usize, index: usize },
    #[error("observation length {length} needs {needed} states, demonstration has {have}")]
    TooShort { length: usize, needed: usize, have: usize },
    #[error("observation length must be at least 1")]
    EmptyWindow,
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("problem is not cost-linear with known dynamics and constraints: {0}")]
    NotCostLinear(String),
    #[error("barrier parameter must be positive, got {0}")]
    BadMu(f64),
    #[error("constant term J₃ is zero; only the homogeneous system remains and θ has no scale")]
    DegenerateConstant,
    #[error(transparent)]
    Problem(#[from] ProblemError),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Gradient(#[from] GradientError),
}

/// `J₁ θ + J₂ V_{m+1} + J₃` for an observation window of `m + 1` stages.
#[derive(Debug, Clone, PartialEq)]
pub struct RecoverySystem {
    pub j1: Mat,
    pub j2: Mat,
    pub j3: Vector,
    pub mu: f64,
    /// Observation length `m + 1`.
    pub length: usize,
}

impl RecoverySystem {
    pub fn j12(&self) -> Mat {
        let (r, a, b) = (self.j1.nrows(), self.j1.ncols(), self.j2.ncols());
        let mut out = Mat::zeros(r, a + b);
        out.columns_mut(0, a).copy_from(&self.j1);
        out.columns_mut(a, b).copy_from(&self.j2);
        out
    }

    pub fn residual(&self, theta: &Vector, v_tail: &Vector) -> Vector {
        &self.j1 * theta + &self.j2 * v_tail + &self.j3
    }
}

/// Per-stage quantities along the demonstration.
struct StageBlocks {
    /// `∂c_x/∂θ` (`n_x × n_θ`), `∂c_u/∂θ`.
    phi_x: Mat,
    phi_u: Mat,
    /// Known terms: `c_z(θ = 0) + g_zᵀλ + h_zᵀν`.
    k_x: Vector,
    k_u: Vector,
    f_x: Mat,
    f_u: Mat,
}

fn stage_blocks(p: &dyn OcProblem, demo: &Demonstration, k: usize, mu: f64) -> Result<StageBlocks, IocError> {
    let d = p.dims();
    // Structure is checked at a generic θ, where problems that are not
    // cost-linear are still finite.
    let probe = p.stage_derivatives(k, &demo.states[k], &demo.controls[k], &Vector::repeat(d.n_theta, 1.0), Wrt::All)?;
    let l = probe.layout;
    if probe.cost.hess1(&l, Var::Theta, Var::Theta).amax() > 0.0 {
        return Err(IocError::NotCostLinear(format!("cost is not linear in θ at stage {k}")));
    }
    for (name, f) in [("dynamics", &probe.dynamics), ("inequality", &probe.ineq), ("equality", &probe.eq)] {
        if f.d(&l, Var::Theta).amax() > 0.0 {
            return Err(IocError::NotCostLinear(format!("{name} depends on θ at stage {k}")));
        }
    }
    let s = p.stage_derivatives(k, &demo.states[k], &demo.controls[k], &Vector::zeros(d.n_theta), Wrt::All)?;
    if let Some(index) = s.ineq.value.iter().position(|g| !(*g < 0.0)) {
        return Err(IocError::NotInterior { stage: k, index });
    }
    let lam = s.ineq.value.map(|g| -mu / g);
    let nu = &s.eq.value / mu;
    let known = |v: Var| {
        s.cost.grad(&l, v) + s.ineq.d(&l, v).tr_mul(&lam) + s.eq.d(&l, v).tr_mul(&nu)
    };
    Ok(StageBlocks {
        phi_x: s.cost.hess1(&l, Var::X, Var::Theta),
        phi_u: s.cost.hess1(&l, Var::U, Var::Theta),
        k_x: known(Var::X),
        k_u: known(Var::U),
        f_x: s.dynamics.d(&l, Var::X),
        f_u: s.dynamics.d(&l, Var::U),
    })
}

/// Applies `A⁻¹` to a block column by back-substitution, where `A` has
/// identity diagonal blocks and `−f_{x,i+1}ᵀ` on the superdiagonal.
/// `f_x[i]` is `f_x` at stage `i + 1`; `rhs` has `f_x.len() + 1` blocks.
pub fn back_substitute(f_x: &[Mat], rhs: &Mat) -> Mat {
    let n = f_x.first().map(|m| m.nrows()).unwrap_or(rhs.nrows());
    let blocks = rhs.nrows() / n;
    assert_eq!(blocks, f_x.len() + 1, "back_substitute: block count");
    let mut out = rhs.clone();
    for i in (0..blocks - 1).rev() {
        let next = out.rows(n * (i + 1), n).into_owned();
        let add = f_x[i].tr_mul(&next);
        let mut cur = out.rows_mut(n * i, n);
        cur += add;
    }
    out
}

/// Dense `A` for testing the back-substitution.
pub fn bidiagonal_matrix(f_x: &[Mat]) -> Mat {
    let n = f_x.first().map(|m| m.nrows()).unwrap_or(0);
    let b = f_x.len() + 1;
    let mut a = Mat::identity(n * b, n * b);
    for (i, f) in f_x.iter().enumerate() {
        a.view_mut((n * i, n * (i + 1)), (n, n)).copy_from(&(-f.transpose()));
    }
    a
}

/// Assembles the recovery system from the first `length` stages of `demo`.
pub fn build_recovery_system(
    p: &dyn OcProblem,
    demo: &Demonstration,
    mu: f64,
    length: usize,
) -> Result<RecoverySystem, IocError> {
    if !(mu > 0.0) {
        return Err(IocError::BadMu(mu));
    }
    if length == 0 {
        return Err(IocError::EmptyWindow);
    }
    let d = p.dims();
    if demo.controls.len() < length || demo.states.len() < length + 1 {
        return Err(IocError::TooShort { length, needed: length + 1, have: demo.states.len() });
    }
    if demo.states.iter().any(|x| x.len() != d.n_x) || demo.controls.iter().any(|u| u.len() != d.n_u) {
        return Err(IocError::Dimension("state or control size".into()));
    }
    let (nx, nu, nt) = (d.n_x, d.n_u, d.n_theta);
    let st = (0..length).map(|k| stage_blocks(p, demo, k, mu)).collect::<Result<Vec<_>, _>>()?;
    // Rows of the value system: V_i − f_{x,i}ᵀ V_{i+1} = φ_{x,i}ᵀθ + κ_{x,i},
    // i = 1..m, closed by V_{m+1} = tail.
    let m = length - 1;
    let f_x: Vec<Mat> = st[1..].iter().map(|s| s.f_x.clone()).collect();
    let mut phi = Mat::zeros(nx * length, nt);
    let mut kap = Mat::zeros(nx * length, 1);
    let mut e = Mat::zeros(nx * length, nx);
    for i in 1..=m {
        phi.view_mut((nx * (i - 1), 0), (nx, nt)).copy_from(&st[i].phi_x);
        kap.view_mut((nx * (i - 1), 0), (nx, 1)).copy_from(&st[i].k_x);
    }
    e.view_mut((nx * m, 0), (nx, nx)).fill_with_identity();
    let a_phi = back_substitute(&f_x, &phi);
    let a_kap = back_substitute(&f_x, &kap);
    let a_e = back_substitute(&f_x, &e);
    let mut j1 = Mat::zeros(nu * length, nt);
    let mut j2 = Mat::zeros(nu * length, nx);
    let mut j3 = Vector::zeros(nu * length);
    for (k, s) in st.iter().enumerate() {
        // Residual k uses V_{k+1}, block k of the solution.
        let fut = s.f_u.transpose();
        let blk = |m: &Mat| &fut * m.rows(nx * k, nx);
        j1.view_mut((nu * k, 0), (nu, nt)).copy_from(&(&s.phi_u + blk(&a_phi)));
        j2.view_mut((nu * k, 0), (nu, nx)).copy_from(&blk(&a_e));
        j3.rows_mut(nu * k, nu).copy_from(&(&s.k_u + blk(&a_kap).column(0)));
    }
    Ok(RecoverySystem { j1, j2, j3, mu, length })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recovery {
    pub theta_hat: Vec<f64>,
    pub v_tail: Vec<f64>,
    pub rank: usize,
    pub full_rank: bool,
    /// `‖J₁θ̂ + J₂V̂ + J₃‖`
    pub residual_norm: f64,
    pub singular_values: Vec<f64>,
}

/// Relative singular-value threshold, scaled by `max(rows, cols)`.
pub const RANK_REL_TOL: f64 = 1e-12;

/// Least-squares `[θ; V_{m+1}] = argmin ‖J₁θ + J₂V + J₃‖` via SVD. When `J₁:₂`
/// is rank deficient the minimum-norm solution is returned with
/// `full_rank = false`.
pub fn recover_parameters(rs: &RecoverySystem) -> Result<Recovery, IocError> {
    if rs.j3.amax() == 0.0 {
        return Err(IocError::DegenerateConstant);
    }
    let a = rs.j12();
    let (rank, sv) = numerical_rank(&a, RANK_REL_TOL);
    let z = lstsq(&a, &(-&rs.j3), RANK_REL_TOL);
    let nt = rs.j1.ncols();
    let theta = z.rows(0, nt).into_owned();
    let tail = z.rows(nt, z.len() - nt).into_owned();
    Ok(Recovery {
        residual_norm: rs.residual(&theta, &tail).norm(),
        theta_hat: theta.iter().copied().collect(),
        v_tail: tail.iter().copied().collect(),
        rank,
        full_rank: rank == a.ncols(),
        singular_values: sv.iter().copied().collect(),
    })
}

/// A demonstration satisfying the perturbed stationarity conditions at
/// barrier parameter `mu`: the interior-point solver runs its usual schedule
/// with `mu` as the floor.
pub fn generate_ioc_demo(
    p: &dyn OcProblem,
    theta_star: &Vector,
    x0: &Vector,
    mu: f64,
    cfg: &SolverConfig,
) -> Result<Demonstration, IocError> {
    if !(mu > 0.0) {
        return Err(IocError::BadMu(mu));
    }
    let c = SolverConfig { mu_floor: mu, ..cfg.clone() };
    let r = solve_ipddp(p, theta_star, x0, &c)?;
    if r.mu != mu {
        return Err(IocError::Dimension(format!("solver stopped at μ = {} instead of {mu}", r.mu)));
    }
    Ok(Demonstration {
        samples: (0..=p.dims().horizon).collect(),
        states: r.traj.states.clone(),
        controls: r.traj.controls.clone(),
        mode: DemoMode::Nominal,
        theta_star: Some(theta_star.iter().copied().collect()),
        seed: None,
        noise: Default::default(),
        nominal_states: r.traj.states,
        nominal_controls: r.traj.controls,
        gains: Vec::new(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileRow {
    pub length: usize,
    pub mu: f64,
    pub rank: usize,
    /// `‖θ̂ − θ*‖²`
    pub residual: f64,
}

/// Rank of `J₁:₂` and parameter residual over observation lengths and
/// assumed barrier parameters, all on the same demonstration.
pub fn rank_profile(
    p: &dyn OcProblem,
    demo: &Demonstration,
    lengths: &[usize],
    mus: &[f64],
    theta_star: &Vector,
) -> Result<Vec<ProfileRow>, IocError> {
    let mut rows = Vec::new();
    for &mu in mus {
        for &length in lengths {
            let rs = build_recovery_system(p, demo, mu, length)?;
            let rec = recover_parameters(&rs)?;
            let th = Vector::from_vec(rec.theta_hat);
            let residual = parameter_residual(&th, theta_star)
                .map_err(|e| IocError::Dimension(e.to_string()))?;
            rows.push(ProfileRow { length, mu, rank: rec.rank, residual });
        }
    }
    Ok(rows)
}

/// The closed-loop residual on the first `length` stages with the trajectory
/// held at the demonstration, next to `J₁θ + J₂V_{m+1} + J₃` evaluated with
/// the value gradient `V_{m+1}` taken from the same backward pass.
pub fn residual_identity(
    p: &dyn OcProblem,
    demo: &Demonstration,
    theta: &Vector,
    mu: f64,
    length: usize,
) -> Result<(Vector, Vector), IocError> {
    let rs = build_recovery_system(p, demo, mu, length)?;
    let traj = crate::problem::Trajectory {
        states: demo.states.clone(),
        controls: demo.controls.clone(),
        duals_in: Vec::new(),
        duals_eq: Vec::new(),
    };
    let (aug, at) = build_augmented(p, &traj, theta);
    let bw = gradient_backward(&aug, &at, mu, false)?;
    let nu = p.dims().n_u;
    let mut closed = Vector::zeros(nu * length);
    for k in 0..length {
        closed.rows_mut(nu * k, nu).copy_from(&bw.stages[k].hq.q_u);
    }
    let nt = theta.len();
    let tail = bw.vy[length].rows(nt, p.dims().n_x).into_owned();
    Ok((closed, rs.residual(theta, &tail)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::benchmarks::{make_system, Overrides, System};
    use proptest::prelude::*;

    fn lqr(constrained: bool) -> System {
        make_system("lqr_ioc", &Overrides { constrained: Some(constrained), ..Default::default() }).unwrap()
    }

    fn demo_at(s: &System, x0: &Vector, mu: f64) -> Demonstration {
        generate_ioc_demo(s.problem.as_ref(), &s.spec.theta_star(), x0, mu, &SolverConfig::default()).unwrap()
    }

    fn vec2(a: f64, b: f64) -> Vector {
        Vector::from_vec(vec![a, b])
    }

    proptest! {
        #[test]
        fn back_substitution_matches_dense_inverse(
            vals in prop::collection::vec(-2.0f64..2.0, 4 * 4),
            cols in prop::collection::vec(-1.0f64..1.0, 5 * 2 * 3),
        ) {
            let f_x: Vec<Mat> = (0..4).map(|i| Mat::from_fn(2, 2, |r, c| vals[4 * i + 2 * r + c])).collect();
            let rhs = Mat::from_row_slice(10, 3, &cols);
            let a = bidiagonal_matrix(&f_x);
            let want = a.clone().try_inverse().unwrap() * &rhs;
            let got = back_substitute(&f_x, &rhs);
            prop_assert!((&got - &want).amax() < 1e-12 * (1.0 + want.amax()));
            prop_assert!((&a * &got - &rhs).amax() < 1e-12 * (1.0 + want.amax()));
        }
    }

    #[test]
    fn single_stage_by_hand() {
        let s = lqr(true);
        let (x, u, mu) = (vec2(0.5, -0.2), 0.1, 1e-2);
        let mut d = demo_at(&s, &s.spec.x0(), 1e-2);
        d.states[0] = x.clone();
        d.controls[0] = Vector::from_element(1, u);
        let rs = build_recovery_system(s.problem.as_ref(), &d, mu, 1).unwrap();
        let g = (x[0] * u).powi(2) - 0.01;
        let lam = -mu / g;
        assert_eq!(rs.j1.shape(), (1, 3));
        assert!((rs.j1[(0, 0)]).abs() < 1e-15 && rs.j1[(0, 1)].abs() < 1e-15);
        assert!((rs.j1[(0, 2)] - 2.0 * u).abs() < 1e-14);
        assert!((rs.j2[(0, 0)] - 1.0).abs() < 1e-15 && (rs.j2[(0, 1)] - 3.0).abs() < 1e-15);
        assert!((rs.j3[0] - lam * 2.0 * x[0] * x[0] * u).abs() < 1e-13);
    }

    #[test]
    fn unconstrained_constant_term_vanishes() {
        let s = lqr(false);
        let d = demo_at(&s, &s.spec.x0(), 1e-6);
        let rs = build_recovery_system(s.problem.as_ref(), &d, 1e-6, 8).unwrap();
        assert_eq!(rs.j3.amax(), 0.0);
        assert_eq!(recover_parameters(&rs), Err(IocError::DegenerateConstant));
    }

    #[test]
    fn synthetic_system_is_recovered_exactly() {
        let s = lqr(true);
        let d = demo_at(&s, &s.spec.x0(), 1e-4);
        let mut rs = build_recovery_system(s.problem.as_ref(), &d, 1e-4, 12).unwrap();
        let th = Vector::from_vec(vec![0.7, 0.2, 1.3]);
        let tail = vec2(-0.4, 0.9);
        rs.j3 = -(&rs.j1 * &th + &rs.j2 * &tail);
        let rec = recover_parameters(&rs).unwrap();
        assert!(rec.full_rank);
        assert!((Vector::from_vec(rec.theta_hat) - th).amax() < 1e-9);
        assert!((Vector::from_vec(rec.v_tail) - tail).amax() < 1e-9);
    }

    #[test]
    fn rank_grows_with_window_until_full() {
        let s = lqr(true);
        let p = s.problem.as_ref();
        for x0 in [s.spec.x0(), vec2(0.7, 1.1), vec2(-1.5, 0.4)] {
            let d = demo_at(&s, &x0, 1e-6);
            for length in 1..=8 {
                let rec = recover_parameters(&build_recovery_system(p, &d, 1e-6, length).unwrap()).unwrap();
                assert_eq!(rec.rank, length.min(5), "length {length}");
                assert_eq!(rec.full_rank, length >= 5);
            }
        }
    }

    #[test]
    fn recovery_at_the_demonstration_barrier() {
        let s = lqr(true);
        let ts = s.spec.theta_star();
        let d = demo_at(&s, &s.spec.x0(), 1e-6);
        let rec = recover_parameters(&build_recovery_system(s.problem.as_ref(), &d, 1e-6, 20).unwrap()).unwrap();
        assert!((Vector::from_vec(rec.theta_hat) - &ts).amax() < 1e-6);
        assert!(rec.residual_norm < 1e-8);
    }

    #[test]
    fn assumed_barrier_scales_the_estimate() {
        // Inequality-only: J₃ is proportional to μ while J₁, J₂ are not.
        let s = lqr(true);
        let p = s.problem.as_ref();
        let ts = s.spec.theta_star();
        let d = demo_at(&s, &vec2(0.7, 1.1), 1e-6);
        let base = recover_parameters(&build_recovery_system(p, &d, 1e-6, 10).unwrap()).unwrap();
        let base = Vector::from_vec(base.theta_hat);
        for mu in [1e-2, 1e-4] {
            let rec = recover_parameters(&build_recovery_system(p, &d, mu, 10).unwrap()).unwrap();
            let scaled = Vector::from_vec(rec.theta_hat) * (1e-6 / mu);
            assert!((&scaled - &base).amax() < 1e-8 * base.amax());
        }
        let rows = rank_profile(p, &d, &[10], &[1e-2, 1e-4, 1e-6], &ts).unwrap();
        assert!(rows.windows(2).all(|w| w[1].residual < w[0].residual));
        assert!(rows[2].residual < 1e-4);
    }

    #[test]
    fn matches_an_envelope_recursion_at_any_parameter() {
        let s = lqr(true);
        let p = s.problem.as_ref();
        let d = demo_at(&s, &s.spec.x0(), 1e-3);
        let (mu, length) = (1e-3, 6);
        let rs = build_recovery_system(p, &d, mu, length).unwrap();
        for (th, tail) in [
            (Vector::from_vec(vec![0.4, 1.7, 0.2]), vec2(0.3, -1.1)),
            (Vector::from_vec(vec![-1.0, 0.5, 2.0]), vec2(2.0, 0.6)),
        ] {
            let mut v = tail.clone();
            let mut r = Vector::zeros(length);
            for k in (0..length).rev() {
                let sd = p.stage_derivatives(k, &d.states[k], &d.controls[k], &th, Wrt::StateControl).unwrap();
                let l = sd.layout;
                let lam = sd.ineq.value.map(|g| -mu / g);
                let grad = |var: Var| {
                    sd.cost.grad(&l, var) + sd.dynamics.d(&l, var).tr_mul(&v) + sd.ineq.d(&l, var).tr_mul(&lam)
                };
                r[k] = grad(Var::U)[0];
                v = grad(Var::X);
            }
            let lin = rs.residual(&th, &tail);
            assert!((&lin - &r).amax() < 1e-12 * (1.0 + r.amax()), "{lin} vs {r}");
        }
    }

    #[test]
    fn closed_loop_residual_agrees_on_the_demonstration() {
        let s = lqr(true);
        let ts = s.spec.theta_star();
        let d = demo_at(&s, &s.spec.x0(), 1e-6);
        for length in [1, 5, 20] {
            let (closed, lin) = residual_identity(s.problem.as_ref(), &d, &ts, 1e-6, length).unwrap();
            assert!((&closed - &lin).amax() < 1e-8, "length {length}");
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let s = lqr(true);
        let p = s.problem.as_ref();
        let d = demo_at(&s, &s.spec.x0(), 1e-2);
        assert_eq!(build_recovery_system(p, &d, 0.0, 3), Err(IocError::BadMu(0.0)));
        assert_eq!(build_recovery_system(p, &d, 1e-2, 0), Err(IocError::EmptyWindow));
        assert!(matches!(build_recovery_system(p, &d, 1e-2, 51), Err(IocError::TooShort { .. })));
        let mut bad = d.clone();
        bad.states[2] = vec2(10.0, 0.0);
        assert_eq!(build_recovery_system(p, &bad, 1e-2, 4), Err(IocError::NotInterior { stage: 2, index: 0 }));
        let cp = make_system("cartpole", &Overrides { constrained: Some(false), ..Default::default() }).unwrap();
        let cd = Demonstration {
            samples: vec![0],
            states: vec![Vector::from_vec(vec![0.1, 0.2, 0.3, 0.4]); 3],
            controls: vec![Vector::from_element(1, 0.5); 2],
            ..d
        };
        let got = build_recovery_system(cp.problem.as_ref(), &cd, 1e-2, 2);
        assert!(matches!(
            got,
            Err(IocError::NotCostLinear(_))
        ), "{got:?}");
    }
}
