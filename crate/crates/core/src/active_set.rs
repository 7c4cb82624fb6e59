//! Active-set DDP.
//!
//! Inequalities in the working set are treated as equalities together with
//! `h`. Each stage solves the KKT system
//!
//! ```text
//! [Q_uu  h◇_uᵀ] [δu]     [Q_u  + Q_ux δx ]
//! [h◇_u  0    ] [ν ] = − [h◇   + h◇_x δx ]
//! ```
//!
//! The working set grows with violated rows and shrinks when a multiplier
//! has the wrong sign, with a wider threshold for removal than for addition.

use crate::ddp::{
    forward_step_plain, q_expansion, solve_kkt, value_update, HatQ, IterLog, SolveResult, SolverConfig, SolverError, Termination,
};
use crate::gradient::{stack_constraints, ActiveSet};
use crate::linalg::{cholesky_regularized, lstsq, Mat, Vector};
use crate::problem::{
    evaluate_cost, trajectory_from_controls, OcProblem, StageDerivatives, TerminalDerivatives, Trajectory, Var, Wrt,
};

/// Converged active-set solution with its working set.
#[derive(Debug, Clone)]
pub struct ActiveSetResult {
    pub result: SolveResult,
    pub active: ActiveSet,
    /// Number of working-set changes made.
    pub changes: usize,
}

struct Stationarity {
    merit: f64,
    /// Multipliers of the working-set rows then the equalities, per stage.
    mult: Vec<Vector>,
}

fn working_derivs(d: &StageDerivatives, w: &[usize]) -> crate::problem::FnDerivs {
    stack_constraints(&d.ineq, w, &d.eq)
}

/// Least-squares multipliers along the adjoint recursion, and the norm of
/// the remaining stationarity plus the working-constraint values.
fn stationarity(derivs: &[StageDerivatives], term: &TerminalDerivatives, w: &ActiveSet) -> Stationarity {
    let n = derivs.len();
    let mut p = term.cost.grad(&term.layout, Var::X);
    let mut s = 0.0;
    let mut mult = vec![Vector::zeros(0); n];
    for k in (0..n).rev() {
        let d = &derivs[k];
        let l = &d.layout;
        let hd = working_derivs(d, &w[k]);
        let h_u = hd.d(l, Var::U);
        let h_x = hd.d(l, Var::X);
        let f_u = d.dynamics.d(l, Var::U);
        let f_x = d.dynamics.d(l, Var::X);
        let qu = d.cost.grad(l, Var::U) + f_u.tr_mul(&p);
        let nu = if hd.m() > 0 { -lstsq(&h_u.transpose(), &qu, 1e-12) } else { Vector::zeros(0) };
        let res = &qu + h_u.tr_mul(&nu);
        s += res.norm_squared() + hd.value.norm_squared();
        p = d.cost.grad(l, Var::X) + f_x.tr_mul(&p) + h_x.tr_mul(&nu);
        mult[k] = nu;
    }
    Stationarity { merit: s.sqrt(), mult }
}

fn select_working(p: &dyn OcProblem, traj: &Trajectory, theta: &Vector, tol: f64) -> ActiveSet {
    (0..traj.horizon())
        .map(|k| {
            let g = p.inequality(k, &traj.states[k], &traj.controls[k], theta);
            let scale = 1.0 + g.amax();
            (0..g.len()).filter(|i| g[*i] >= -tol * scale).collect()
        })
        .collect()
}

struct Gains {
    k: Vec<Vector>,
    kk: Vec<Mat>,
}

fn backward(
    derivs: &[StageDerivatives],
    term: &TerminalDerivatives,
    w: &ActiveSet,
    mult: &[Vector],
    rho: f64,
) -> Result<Gains, (usize, bool)> {
    let n = derivs.len();
    let tl = &term.layout;
    let mut vx = term.cost.grad(tl, Var::X);
    let mut vxx = term.cost.hess1(tl, Var::X, Var::X);
    let mut ks = vec![Vector::zeros(0); n];
    let mut kks = vec![Mat::zeros(0, 0); n];
    for k in (0..n).rev() {
        let d = &derivs[k];
        let l = &d.layout;
        let hd = working_derivs(d, &w[k]);
        // Constraint curvature from the current multiplier estimate only;
        // the gradient terms are solved for in the KKT system.
        let mut q = q_expansion(&strip(d), &vx, &vxx, &Vector::zeros(0), &Vector::zeros(0));
        if hd.m() > 0 {
            let curv = hd.hess.contract(&mult[k]);
            let (ox, nx) = l.range(Var::X);
            let (ou, nu) = l.range(Var::U);
            q.q_xx += curv.view((ox, ox), (nx, nx));
            q.q_ux += curv.view((ou, ox), (nu, nx));
            q.q_uu += curv.view((ou, ou), (nu, nu));
        }
        let m = q.q_uu.nrows();
        let q_uu = &q.q_uu + Mat::identity(m, m) * rho;
        if cholesky_regularized(&q_uu, 0.0).is_none() {
            return Err((k, false));
        }
        let (kff, kfb) = if hd.m() == 0 {
            let ch = cholesky_regularized(&q_uu, 0.0).expect("checked above");
            (-ch.solve(&q.q_u), -ch.solve(&q.q_ux))
        } else {
            let h_u = hd.d(l, Var::U);
            let h_x = hd.d(l, Var::X);
            let mut rhs_u = Mat::zeros(m, 1 + q.q_ux.ncols());
            rhs_u.set_column(0, &q.q_u);
            rhs_u.view_mut((0, 1), (m, q.q_ux.ncols())).copy_from(&q.q_ux);
            let mut rhs_h = Mat::zeros(hd.m(), 1 + h_x.ncols());
            rhs_h.set_column(0, &hd.value);
            rhs_h.view_mut((0, 1), (hd.m(), h_x.ncols())).copy_from(&h_x);
            let (du, _) = solve_kkt(&q_uu, &h_u, &(-rhs_u), &(-rhs_h)).map_err(|_| (k, true))?;
            (du.column(0).into_owned(), du.columns(1, q.q_ux.ncols()).into_owned())
        };
        let hq = HatQ {
            q_x: q.q_x,
            q_u: q.q_u,
            q_xx: q.q_xx,
            q_ux: q.q_ux,
            q_uu: q.q_uu,
            r_in: Vector::zeros(0),
            r_eq: Vector::zeros(0),
        };
        let (a, b) = value_update(&hq, &kff, &kfb);
        vx = a;
        vxx = b;
        ks[k] = kff;
        kks[k] = kfb;
    }
    Ok(Gains { k: ks, kk: kks })
}

fn strip(d: &StageDerivatives) -> StageDerivatives {
    let nz = d.layout.nz();
    StageDerivatives {
        layout: d.layout,
        cost: d.cost.clone(),
        dynamics: d.dynamics.clone(),
        ineq: crate::problem::FnDerivs::zeros(0, nz),
        eq: crate::problem::FnDerivs::zeros(0, nz),
    }
}

/// Rows outside the working set with `g_i > tol · (1 + ‖g‖∞)`.
fn blocking_rows(p: &dyn OcProblem, traj: &Trajectory, theta: &Vector, w: &ActiveSet, tol: f64) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for k in 0..traj.horizon() {
        let g = p.inequality(k, &traj.states[k], &traj.controls[k], theta);
        let scale = 1.0 + g.amax();
        for i in 0..g.len() {
            if !w[k].contains(&i) && g[i] > tol * scale {
                out.push((k, i));
            }
        }
    }
    out
}

/// Active-set DDP from zero controls (or a control guess).
///
/// Iterates stay feasible for rows outside the working set: a step that
/// would violate such a row is shortened and the row joins the working set.
pub fn solve_active_set(
    p: &dyn OcProblem,
    theta: &Vector,
    x0: &Vector,
    cfg: &SolverConfig,
    init: Option<&[Vector]>,
) -> Result<ActiveSetResult, SolverError> {
    let d = p.dims();
    let controls = match init {
        Some(u) if u.len() == d.horizon => u.to_vec(),
        _ => vec![Vector::zeros(d.n_u); d.horizon],
    };
    let mut traj = trajectory_from_controls(p, theta, x0, controls)?;
    let mut w = select_working(p, &traj, theta, cfg.active_tol);
    let mut changes = 0;
    let mut log = Vec::new();
    let mut total_iter = 0;
    loop {
        let out = solve_working(p, theta, traj, &w, cfg, &mut log, total_iter)?;
        traj = out.traj;
        total_iter += out.iterations;
        let mut next = w.clone();
        if !out.blocked.is_empty() {
            for (k, i) in out.blocked {
                if !next[k].contains(&i) {
                    next[k].push(i);
                    next[k].sort_unstable();
                }
            }
        } else {
            // Drop rows whose multiplier has the wrong sign.
            for k in 0..d.horizon {
                let g = p.inequality(k, &traj.states[k], &traj.controls[k], theta);
                let scale = 1.0 + g.amax();
                next[k] = w[k]
                    .iter()
                    .enumerate()
                    .filter(|(r, _)| out.st.mult[k][*r] >= -10.0 * cfg.active_tol * scale)
                    .map(|(_, i)| *i)
                    .collect();
            }
        }
        if next == w {
            if let Some((stage, _)) = blocking_rows(p, &traj, theta, &w, cfg.active_tol).first() {
                return Err(SolverError::RankDeficientActiveSet { stage: *stage });
            }
            let st = out.st;
            let mut duals_in = vec![Vector::zeros(d.n_in); d.horizon];
            let mut duals_eq = vec![Vector::zeros(d.n_eq); d.horizon];
            for k in 0..d.horizon {
                for (r, i) in w[k].iter().enumerate() {
                    duals_in[k][*i] = st.mult[k][r];
                }
                for j in 0..d.n_eq {
                    duals_eq[k][j] = st.mult[k][w[k].len() + j];
                }
            }
            traj.duals_in = duals_in;
            traj.duals_eq = duals_eq;
            let cost = evaluate_cost(p, theta, &traj);
            let result = SolveResult {
                traj,
                cost,
                merit: st.merit,
                mu: 0.0,
                iterations: total_iter,
                converged: st.merit < cfg.tol,
                termination: if st.merit < cfg.tol { Termination::Converged } else { Termination::IterationLimit },
                log,
            };
            return Ok(ActiveSetResult { result, active: w, changes });
        }
        changes += 1;
        if changes > cfg.max_active_set_changes {
            return Err(SolverError::ActiveSetCycling { changes });
        }
        w = next;
    }
}

fn addable(p: &dyn OcProblem, traj: &Trajectory, theta: &Vector, w: &ActiveSet, k: usize, i: usize) -> bool {
    let Ok(d) = p.stage_derivatives(k, &traj.states[k], &traj.controls[k], theta, Wrt::StateControl) else {
        return false;
    };
    let mut rows = w[k].clone();
    rows.push(i);
    let hd = stack_constraints(&d.ineq, &rows, &d.eq);
    let h_u = hd.d(&d.layout, Var::U);
    h_u.nrows() <= h_u.ncols() && crate::linalg::numerical_rank(&h_u, 1e-10).0 == h_u.nrows()
}

struct Working {
    traj: Trajectory,
    st: Stationarity,
    iterations: usize,
    /// Rows that stopped the last step; empty when the working problem converged.
    blocked: Vec<(usize, usize)>,
}

fn solve_working(
    p: &dyn OcProblem,
    theta: &Vector,
    mut traj: Trajectory,
    w: &ActiveSet,
    cfg: &SolverConfig,
    log: &mut Vec<IterLog>,
    iter0: usize,
) -> Result<Working, SolverError> {
    let (mut derivs, mut term) = crate::ddp::trajectory_derivatives(p, &traj, theta, Wrt::StateControl)?;
    let mut st = stationarity(&derivs, &term, w);
    let mut rho = 0.0;
    let mut iter = 0;
    while st.merit >= cfg.tol && iter < cfg.max_iter {
        iter += 1;
        let mut accepted = None;
        let mut blocked = Vec::new();
        loop {
            let gains = match backward(&derivs, &term, w, &st.mult, rho) {
                Ok(g) => g,
                Err((stage, true)) => return Err(SolverError::RankDeficientActiveSet { stage }),
                Err((stage, false)) => {
                    rho = (rho * cfg.rho_factor).max(cfg.rho_min);
                    if rho > cfg.rho_max {
                        return Err(SolverError::RegularizationExhausted { stage, rho });
                    }
                    continue;
                }
            };
            let mut alpha = 1.0;
            for _ in 0..=cfg.max_backtracks {
                if let Some(cand) = forward_step_plain(p, theta, &traj, &gains.k, &gains.kk, alpha) {
                    // Rows without control dependence would make the stage KKT
                    // system singular; they may be crossed transiently.
                    let b: Vec<_> = blocking_rows(p, &cand, theta, w, cfg.active_tol)
                        .into_iter()
                        .filter(|(k, i)| addable(p, &cand, theta, w, *k, *i))
                        .collect();
                    if !b.is_empty() {
                        blocked = b;
                    } else if let Ok((cd, ct)) = crate::ddp::trajectory_derivatives(p, &cand, theta, Wrt::StateControl) {
                        let cs = stationarity(&cd, &ct, w);
                        if cs.merit < st.merit {
                            accepted = Some((cand, cd, ct, cs, alpha));
                            break;
                        }
                    }
                }
                alpha *= 0.5;
            }
            if accepted.is_some() || !blocked.is_empty() {
                break;
            }
            rho = (rho * cfg.rho_factor).max(cfg.rho_min);
            if rho > cfg.rho_max {
                let cost = evaluate_cost(p, theta, &traj);
                return Err(SolverError::LineSearchFailed {
                    iter: iter0 + iter,
                    merit: st.merit,
                    last: Box::new(SolveResult {
                        traj,
                        cost,
                        merit: st.merit,
                        mu: 0.0,
                        iterations: iter0 + iter,
                        converged: false,
                        termination: Termination::IterationLimit,
                        log: log.clone(),
                    }),
                });
            }
        }
        if let Some((cand, cd, ct, cs, alpha)) = accepted {
            traj = cand;
            derivs = cd;
            term = ct;
            st = cs;
            log.push(IterLog { iter: iter0 + iter, mu: 0.0, merit: st.merit, cost: evaluate_cost(p, theta, &traj), alpha, rho });
            rho = if rho / cfg.rho_factor < cfg.rho_min { 0.0 } else { rho / cfg.rho_factor };
        }
        if !blocked.is_empty() {
            return Ok(Working { traj, st, iterations: iter, blocked });
        }
    }
    Ok(Working { traj, st, iterations: iter, blocked: Vec::new() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::benchmarks::{make_system, Overrides};
    use crate::ddp::solve_ipddp;
    use crate::gradient::{gradient_activeset_with, gradient_ip};
    use crate::toys;

    // x0 = 1, w = 1, b = 0.4: the bound u₀ ≥ −b binds, u₁ = −x₁/2 and
    // λ₀ = u₀ + V_x(x₁) = −0.4 + 1.5·0.6 = 0.5.
    #[test]
    fn bound_toy_hand_solution() {
        let p = toys::bound_toy();
        let th = Vector::from_vec(vec![1.0, 0.4]);
        let x0 = Vector::from_element(1, 1.0);
        let r = solve_active_set(&p, &th, &x0, &SolverConfig::default(), None).unwrap();
        assert!(r.result.converged);
        assert_eq!(r.active, vec![vec![0], vec![]]);
        let t = &r.result.traj;
        assert!((t.controls[0][0] + 0.4).abs() < 1e-12);
        assert!((t.controls[1][0] + 0.3).abs() < 1e-12);
        assert!((t.duals_in[0][0] - 0.5).abs() < 1e-10);
        assert_eq!(t.duals_in[1][0], 0.0);

        let g = gradient_activeset_with(&p, t, &th, &r.active).unwrap();
        let expect = [[0.0, -1.0], [0.0, 0.5]];
        for k in 0..2 {
            for i in 0..2 {
                assert!((g.du[k][(0, i)] - expect[k][i]).abs() < 1e-12, "du{k}/dθ{i} = {}", g.du[k][(0, i)]);
            }
        }
        let ip = solve_ipddp(&p, &th, &x0, &SolverConfig::default()).unwrap();
        let gi = gradient_ip(&p, &ip.traj, &th, ip.mu).unwrap();
        assert!(g.max_abs_diff(&gi) < 1e-6);
    }

    #[test]
    fn inactive_bound_gives_unconstrained_solution() {
        let p = toys::bound_toy();
        let th = Vector::from_vec(vec![1.0, 2.0]);
        let r = solve_active_set(&p, &th, &Vector::from_element(1, 1.0), &SolverConfig::default(), None).unwrap();
        assert_eq!(r.active, vec![Vec::<usize>::new(); 2]);
        assert!((r.result.traj.controls[0][0] + 0.6).abs() < 1e-12);
        assert_eq!(r.changes, 0);
    }

    #[test]
    fn matches_interior_point_on_benchmarks() {
        for name in ["cartpole", "arm2link", "quadrotor"] {
            let s = make_system(name, &Overrides::default()).unwrap();
            let p = s.problem.as_ref();
            let th = s.spec.theta_star();
            let x0 = s.spec.x0();
            let a = solve_active_set(p, &th, &x0, &SolverConfig::default(), None).unwrap();
            let b = solve_ipddp(p, &th, &x0, &SolverConfig::default()).unwrap();
            assert!(a.result.converged, "{name}");
            let du = (a.result.traj.control_vector() - b.traj.control_vector()).amax();
            assert!(du < 1e-4, "{name}: {du}");
            for k in 0..p.dims().horizon {
                let g = p.inequality(k, &a.result.traj.states[k], &a.result.traj.controls[k], &th);
                assert!(g.max() <= cfg_tol(), "{name} stage {k}: {}", g.max());
                assert!(a.result.traj.duals_in[k].iter().all(|l| *l >= 0.0));
            }
        }
    }

    fn cfg_tol() -> f64 {
        SolverConfig::default().active_tol
    }

    #[test]
    fn equality_constraint_is_satisfied() {
        let p = toys::eq_toy();
        let th = Vector::from_element(1, 2.0);
        let r = solve_active_set(&p, &th, &Vector::from_element(1, 1.0), &SolverConfig::default(), None).unwrap();
        for u in &r.result.traj.controls {
            assert!((u[0] - u[1]).abs() < 1e-10);
        }
    }
}
