//! Independent gradient oracle: differentiate the whole-trajectory
//! stationarity system and solve it densely.
//!
//! Unknowns per stage `k` are `[u_k; λ_k; ν_k; x_{k+1}; p_{k+1}]`, where `p`
//! is the costate. The equations are
//!
//! ```text
//! L_u = c_u + f_uᵀp⁺ + g_uᵀλ + h_uᵀν = 0
//! λ∘g + μ = 0
//! h − μν = 0
//! f(x, u) − x⁺ = 0
//! L_x − p = 0          (stages 1..N−1),   c_f,x − p_N = 0
//! ```
//!
//! Differentiating with respect to θ gives one linear system of size
//! `N(n_u + n_in + n_eq + 2n_x)`. Cost is cubic in N; use for testing only.

use crate::gradient::{GradientError, TrajectoryGradient};
use crate::linalg::{Mat, Vector};
use crate::problem::{OcProblem, StageDerivatives, Trajectory, Var, Wrt};

/// `dT/dθ` from the dense KKT system. Multipliers are taken in closed form
/// (`λ = −μ/g`, `ν = h/μ`) so the result is comparable with the recursive
/// interior-point gradient at the same `μ`.
pub fn pdp_oracle_gradient(
    p: &dyn OcProblem,
    traj: &Trajectory,
    theta: &Vector,
    mu: f64,
) -> Result<TrajectoryGradient, GradientError> {
    let d = p.dims();
    let n = traj.horizon();
    let (nx, nu, ni, ne, nt) = (d.n_x, d.n_u, d.n_in, d.n_eq, d.n_theta);
    if (ni > 0 || ne > 0) && !(mu > 0.0) {
        return Err(GradientError::Invalid(format!("barrier parameter must be positive, got {mu}")));
    }
    let derivs: Vec<StageDerivatives> = (0..n)
        .map(|k| p.stage_derivatives(k, &traj.states[k], &traj.controls[k], theta, Wrt::All))
        .collect::<Result<_, _>>()?;
    let term = p.terminal_derivatives(&traj.states[n], theta, Wrt::All)?;

    let lam: Vec<Vector> = derivs.iter().map(|s| s.ineq.value.map(|g| -mu / g)).collect();
    let nu_: Vec<Vector> = derivs.iter().map(|s| &s.eq.value / mu).collect();
    for (k, s) in derivs.iter().enumerate() {
        if s.ineq.value.iter().any(|g| !(*g < 0.0)) {
            return Err(GradientError::NotInterior { stage: k });
        }
    }

    // Costates p_1..p_N, stored at index k for p_{k+1}.
    let tl = term.layout;
    let mut costate = vec![Vector::zeros(nx); n];
    costate[n - 1] = term.cost.grad(&tl, Var::X);
    for j in (1..n).rev() {
        let s = &derivs[j];
        let l = &s.layout;
        costate[j - 1] = s.cost.grad(l, Var::X)
            + s.dynamics.d(l, Var::X).tr_mul(&costate[j])
            + s.ineq.d(l, Var::X).tr_mul(&lam[j])
            + s.eq.d(l, Var::X).tr_mul(&nu_[j]);
    }
    // Lagrangian Hessians over z = [x; u; θ].
    let hess: Vec<Mat> = derivs
        .iter()
        .enumerate()
        .map(|(k, s)| {
            let mut h = s.cost.hess.slice(0) + s.dynamics.hess.contract(&costate[k]);
            if ni > 0 {
                h += s.ineq.hess.contract(&lam[k]);
            }
            if ne > 0 {
                h += s.eq.hess.contract(&nu_[k]);
            }
            h
        })
        .collect();

    let bs = nu + ni + ne + 2 * nx;
    let dim = n * bs;
    let mut m = Mat::zeros(dim, dim);
    let mut rhs = Mat::zeros(dim, nt);
    let ou = |k: usize| k * bs;
    let ol = |k: usize| k * bs + nu;
    let on = |k: usize| k * bs + nu + ni;
    let oxn = |k: usize| k * bs + nu + ni + ne; // x_{k+1}
    let opn = |k: usize| k * bs + nu + ni + ne + nx; // p_{k+1}
    let (zx, zu, zt) = (0, nx, nx + nu);

    let put = |m: &mut Mat, r: usize, c: usize, b: &Mat| {
        let mut v = m.view_mut((r, c), (b.nrows(), b.ncols()));
        v += b;
    };

    for k in 0..n {
        let s = &derivs[k];
        let l = &s.layout;
        let h = &hess[k];
        let (f_x, f_u, f_t) = (s.dynamics.d(l, Var::X), s.dynamics.d(l, Var::U), s.dynamics.d(l, Var::Theta));
        let (g_x, g_u, g_t) = (s.ineq.d(l, Var::X), s.ineq.d(l, Var::U), s.ineq.d(l, Var::Theta));
        let (h_x, h_u, h_t) = (s.eq.d(l, Var::X), s.eq.d(l, Var::U), s.eq.d(l, Var::Theta));
        let xk = if k > 0 { Some(oxn(k - 1)) } else { None };
        let blk = |r0: usize, c0: usize, nr: usize, nc: usize| h.view((r0, c0), (nr, nc)).into_owned();

        // L_u
        let r = ou(k);
        put(&mut m, r, ou(k), &blk(zu, zu, nu, nu));
        if let Some(c) = xk {
            put(&mut m, r, c, &blk(zu, zx, nu, nx));
        }
        put(&mut m, r, opn(k), &f_u.transpose());
        put(&mut m, r, ol(k), &g_u.transpose());
        put(&mut m, r, on(k), &h_u.transpose());
        rhs.view_mut((r, 0), (nu, nt)).copy_from(&(-blk(zu, zt, nu, nt)));

        // λ∘g + μ
        if ni > 0 {
            let r = ol(k);
            put(&mut m, r, ol(k), &Mat::from_diagonal(&s.ineq.value));
            put(&mut m, r, ou(k), &scale(&g_u, &lam[k]));
            if let Some(c) = xk {
                put(&mut m, r, c, &scale(&g_x, &lam[k]));
            }
            rhs.view_mut((r, 0), (ni, nt)).copy_from(&(-scale(&g_t, &lam[k])));
        }
        // h − μν
        if ne > 0 {
            let r = on(k);
            put(&mut m, r, on(k), &(-Mat::identity(ne, ne) * mu));
            put(&mut m, r, ou(k), &h_u);
            if let Some(c) = xk {
                put(&mut m, r, c, &h_x);
            }
            rhs.view_mut((r, 0), (ne, nt)).copy_from(&(-&h_t));
        }
        // f − x⁺
        let r = oxn(k);
        if let Some(c) = xk {
            put(&mut m, r, c, &f_x);
        }
        put(&mut m, r, ou(k), &f_u);
        put(&mut m, r, oxn(k), &(-Mat::identity(nx, nx)));
        rhs.view_mut((r, 0), (nx, nt)).copy_from(&(-&f_t));

        // Adjoint equation for x_{k+1}.
        let r = opn(k);
        put(&mut m, r, opn(k), &(-Mat::identity(nx, nx)));
        if k + 1 == n {
            let tl = &term.layout;
            let hf = term.cost.hess.slice(0);
            let (ox_, ot_) = (tl.range(Var::X).0, tl.range(Var::Theta).0);
            put(&mut m, r, oxn(k), &hf.view((ox_, ox_), (nx, nx)).into_owned());
            rhs.view_mut((r, 0), (nx, nt)).copy_from(&(-hf.view((ox_, ot_), (nx, nt))));
        } else {
            let j = k + 1;
            let sj = &derivs[j];
            let lj = &sj.layout;
            let hj = &hess[j];
            put(&mut m, r, oxn(k), &hj.view((zx, zx), (nx, nx)).into_owned());
            put(&mut m, r, ou(j), &hj.view((zx, zu), (nx, nu)).into_owned());
            put(&mut m, r, opn(j), &sj.dynamics.d(lj, Var::X).transpose());
            put(&mut m, r, ol(j), &sj.ineq.d(lj, Var::X).transpose());
            put(&mut m, r, on(j), &sj.eq.d(lj, Var::X).transpose());
            rhs.view_mut((r, 0), (nx, nt)).copy_from(&(-hj.view((zx, zt), (nx, nt))));
        }
    }

    let lu = m.lu();
    let sol = lu.solve(&rhs).ok_or(GradientError::Singular { stage: 0 })?;
    if !sol.iter().all(|v| v.is_finite()) {
        return Err(GradientError::Singular { stage: 0 });
    }
    let mut dx = vec![Mat::zeros(nx, nt)];
    let mut du = Vec::with_capacity(n);
    for k in 0..n {
        du.push(sol.view((ou(k), 0), (nu, nt)).into_owned());
        dx.push(sol.view((oxn(k), 0), (nx, nt)).into_owned());
    }
    Ok(TrajectoryGradient { dx, du })
}

fn scale(m: &Mat, s: &Vector) -> Mat {
    let mut out = m.clone();
    for (i, si) in s.iter().enumerate() {
        out.row_mut(i).scale_mut(*si);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::benchmarks::{make_system, Overrides};
    use crate::ddp::{solve_ipddp, SolverConfig};
    use crate::gradient::gradient_ip;
    use crate::oracles::scalar_example;

    #[test]
    fn scalar_example_closed_form() {
        let s = make_system("scalar_example", &Overrides::default()).unwrap();
        for th in [0.5, 1.0, 3.0] {
            let theta = Vector::from_element(1, th);
            let r = solve_ipddp(s.problem.as_ref(), &theta, &s.spec.x0(), &SolverConfig::default()).unwrap();
            let g = pdp_oracle_gradient(s.problem.as_ref(), &r.traj, &theta, 1.0).unwrap();
            let cf = scalar_example(th, 1.0);
            assert!((g.du[0][(0, 0)] - cf.du0).abs() < 1e-12);
            assert!((g.du[1][(0, 0)] - cf.du1).abs() < 1e-12);
        }
    }

    #[test]
    fn agrees_with_recursive_gradient_on_constrained_cartpole() {
        let s = make_system("cartpole", &Overrides::default()).unwrap();
        let p = s.problem.as_ref();
        let th = s.spec.theta_star();
        let r = solve_ipddp(p, &th, &s.spec.x0(), &SolverConfig::default()).unwrap();
        let a = pdp_oracle_gradient(p, &r.traj, &th, r.mu).unwrap();
        let b = gradient_ip(p, &r.traj, &th, r.mu).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-6);
    }

    #[test]
    fn rejects_zero_barrier_with_constraints() {
        let s = make_system("cartpole", &Overrides::default()).unwrap();
        let p = s.problem.as_ref();
        let th = s.spec.theta_star();
        let r = solve_ipddp(p, &th, &s.spec.x0(), &SolverConfig::default()).unwrap();
        assert!(matches!(pdp_oracle_gradient(p, &r.traj, &th, 0.0), Err(GradientError::Invalid(_))));
    }
}
