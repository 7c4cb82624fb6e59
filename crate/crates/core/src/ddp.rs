//! Trajectory solvers: interior-point DDP, active-set DDP and plain DDP.
//!
//! The interior-point variant keeps strictly feasible inequality iterates
//! with multipliers `λ > 0` and solves a perturbed KKT system whose
//! complementarity residual is `r_in = λ∘g + μ` and whose equality residual is
//! `r_eq = ν − h/μ`. The merit measures the equality part as `μν − h`, which
//! has the same zeros but no `h/μ` rounding floor.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{cholesky_regularized, solve_regularized, symmetrize, LinalgError, Mat, Vector};
use crate::problem::{
    rollout, trajectory_from_controls, OcProblem, ProblemError, StageDerivatives, TerminalDerivatives, Trajectory,
    Unconstrained, Var, Wrt,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    pub max_iter: usize,
    /// Merit tolerance once `μ` has reached its floor.
    pub tol: f64,
    /// Looser tolerance accepted when the line search stalls at the `μ` floor.
    pub acceptable_tol: f64,
    /// Initial barrier parameter; derived from the initial merit when absent.
    pub mu_init: Option<f64>,
    pub mu_floor: f64,
    /// `μ` shrinks once the merit drops below `kappa · μ`.
    pub kappa: f64,
    pub mu_shrink: f64,
    pub rho_min: f64,
    pub rho_max: f64,
    pub rho_factor: f64,
    pub max_backtracks: u32,
    /// Fraction-to-boundary factor.
    pub tau: f64,
    /// Activation threshold of the active-set solver.
    pub active_tol: f64,
    pub max_active_set_changes: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            max_iter: 500,
            tol: 1e-9,
            acceptable_tol: 1e-7,
            mu_init: None,
            mu_floor: 1e-8,
            kappa: 0.2,
            mu_shrink: 0.2,
            rho_min: 1e-6,
            rho_max: 1e6,
            rho_factor: 10.0,
            max_backtracks: 10,
            tau: 0.995,
            active_tol: 1e-6,
            max_active_set_changes: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterLog {
    pub iter: usize,
    pub mu: f64,
    pub merit: f64,
    pub cost: f64,
    pub alpha: f64,
    pub rho: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveResult {
    pub traj: Trajectory,
    pub cost: f64,
    pub merit: f64,
    pub mu: f64,
    pub iterations: usize,
    /// True for [`Termination::Converged`] and [`Termination::Acceptable`].
    pub converged: bool,
    pub termination: Termination,
    pub log: Vec<IterLog>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Converged,
    /// No further merit decrease at the `μ` floor, but below `acceptable_tol`.
    Acceptable,
    IterationLimit,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolverError {
    #[error("initial trajectory violates an inequality at stage {stage} (g = {value:e})")]
    InfeasibleStart { stage: usize, value: f64 },
    #[error("regularisation exceeded {rho:e} at stage {stage}")]
    RegularizationExhausted { stage: usize, rho: f64 },
    #[error("line search failed at iteration {iter} (merit {merit:e})")]
    LineSearchFailed { iter: usize, merit: f64, last: Box<SolveResult> },
    #[error("active constraint Jacobian w.r.t. u is rank deficient at stage {stage}")]
    RankDeficientActiveSet { stage: usize },
    #[error("active set did not settle after {changes} changes")]
    ActiveSetCycling { changes: usize },
    #[error(transparent)]
    Problem(#[from] ProblemError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// Second-order expansion of `Q = c + V⁺∘f + λᵀg + νᵀh` at one stage.
#[derive(Debug, Clone, PartialEq)]
pub struct QBlocks {
    pub q_x: Vector,
    pub q_u: Vector,
    pub q_xx: Mat,
    /// `n_u × n_x`
    pub q_ux: Mat,
    pub q_uu: Mat,
}

/// Blocks of `Q` after eliminating the multiplier steps.
#[derive(Debug, Clone, PartialEq)]
pub struct HatQ {
    pub q_x: Vector,
    pub q_u: Vector,
    pub q_xx: Mat,
    pub q_ux: Mat,
    pub q_uu: Mat,
    pub r_in: Vector,
    pub r_eq: Vector,
}

/// Jacobian blocks of the stage functions at one point.
pub struct StageJac {
    pub f_x: Mat,
    pub f_u: Mat,
    pub g_x: Mat,
    pub g_u: Mat,
    pub h_x: Mat,
    pub h_u: Mat,
}

impl StageJac {
    pub fn of(d: &StageDerivatives) -> Self {
        let l = &d.layout;
        StageJac {
            f_x: d.dynamics.d(l, Var::X),
            f_u: d.dynamics.d(l, Var::U),
            g_x: d.ineq.d(l, Var::X),
            g_u: d.ineq.d(l, Var::U),
            h_x: d.eq.d(l, Var::X),
            h_u: d.eq.d(l, Var::U),
        }
    }
}

/// Hessian of `c + vₓᵀf + λᵀg + νᵀh` over the full stacked variable.
pub fn lagrangian_hessian(d: &StageDerivatives, vx: &Vector, lam: &Vector, nu: &Vector) -> Mat {
    let mut h = d.cost.hess.slice(0).clone();
    h += d.dynamics.hess.contract(vx);
    if lam.len() > 0 {
        h += d.ineq.hess.contract(lam);
    }
    if nu.len() > 0 {
        h += d.eq.hess.contract(nu);
    }
    h
}

pub fn q_expansion(d: &StageDerivatives, vx: &Vector, vxx: &Mat, lam: &Vector, nu: &Vector) -> QBlocks {
    let l = &d.layout;
    let j = StageJac::of(d);
    let h = lagrangian_hessian(d, vx, lam, nu);
    let (ox, nx) = l.range(Var::X);
    let (ou, nu_) = l.range(Var::U);
    let vxx_fx = vxx * &j.f_x;
    let vxx_fu = vxx * &j.f_u;
    let q_x = d.cost.grad(l, Var::X) + j.f_x.tr_mul(vx) + j.g_x.tr_mul(lam) + j.h_x.tr_mul(nu);
    let q_u = d.cost.grad(l, Var::U) + j.f_u.tr_mul(vx) + j.g_u.tr_mul(lam) + j.h_u.tr_mul(nu);
    let mut q_xx = h.view((ox, ox), (nx, nx)) + j.f_x.tr_mul(&vxx_fx);
    let q_ux = h.view((ou, ox), (nu_, nx)) + j.f_u.tr_mul(&vxx_fx);
    let mut q_uu = h.view((ou, ou), (nu_, nu_)) + j.f_u.tr_mul(&vxx_fu);
    symmetrize(&mut q_xx);
    symmetrize(&mut q_uu);
    QBlocks { q_x, q_u, q_xx, q_ux, q_uu }
}

/// Eliminates `δλ, δν` from the perturbed stage KKT system.
pub fn hat_q(q: &QBlocks, d: &StageDerivatives, lam: &Vector, nu: &Vector, mu: f64) -> HatQ {
    let j = StageJac::of(d);
    let g = &d.ineq.value;
    let h = &d.eq.value;
    let r_in = lam.component_mul(g).add_scalar(mu);
    let r_eq = nu - h / mu;
    let ginv_r = r_in.component_div(g);
    // Σ = diag(λ/g), negative on the interior.
    let sigma = lam.component_div(g);
    let sg_x = scale_rows(&j.g_x, &sigma);
    let sg_u = scale_rows(&j.g_u, &sigma);
    let q_x = &q.q_x - j.g_x.tr_mul(&ginv_r) - j.h_x.tr_mul(&r_eq);
    let q_u = &q.q_u - j.g_u.tr_mul(&ginv_r) - j.h_u.tr_mul(&r_eq);
    let mut q_xx = &q.q_xx - j.g_x.tr_mul(&sg_x) + j.h_x.tr_mul(&j.h_x) / mu;
    let q_ux = &q.q_ux - j.g_u.tr_mul(&sg_x) + j.h_u.tr_mul(&j.h_x) / mu;
    let mut q_uu = &q.q_uu - j.g_u.tr_mul(&sg_u) + j.h_u.tr_mul(&j.h_u) / mu;
    symmetrize(&mut q_xx);
    symmetrize(&mut q_uu);
    HatQ { q_x, q_u, q_xx, q_ux, q_uu, r_in, r_eq }
}

pub(crate) fn scale_rows(m: &Mat, s: &Vector) -> Mat {
    let mut out = m.clone();
    for (i, si) in s.iter().enumerate() {
        out.row_mut(i).scale_mut(*si);
    }
    out
}

/// Feedforward and feedback gains of one stage.
#[derive(Debug, Clone, PartialEq)]
pub struct StageGains {
    pub k: Vector,
    pub kk: Mat,
    pub k_in: Vector,
    pub kk_in: Mat,
    pub k_eq: Vector,
    pub kk_eq: Mat,
}

#[derive(Debug, Clone)]
pub struct Backward {
    pub gains: Vec<StageGains>,
    pub vx: Vec<Vector>,
    pub vxx: Vec<Mat>,
}

/// Value-function update from the Q̂ blocks and gains.
pub fn value_update(hq: &HatQ, k: &Vector, kk: &Mat) -> (Vector, Mat) {
    let vx = &hq.q_x + kk.tr_mul(&(&hq.q_uu * k)) + kk.tr_mul(&hq.q_u) + hq.q_ux.tr_mul(k);
    let mut vxx = &hq.q_xx + kk.tr_mul(&(&hq.q_uu * kk)) + kk.tr_mul(&hq.q_ux) + hq.q_ux.tr_mul(kk);
    symmetrize(&mut vxx);
    (vx, vxx)
}

/// Interior-point backward pass. Fails with the stage index when the
/// regularised `Q̂_uu` is not positive definite.
pub fn backward_pass(
    derivs: &[StageDerivatives],
    term: &TerminalDerivatives,
    traj: &Trajectory,
    mu: f64,
    rho: f64,
) -> Result<Backward, usize> {
    let n = derivs.len();
    let tl = &term.layout;
    let mut vx = vec![Vector::zeros(0); n + 1];
    let mut vxx = vec![Mat::zeros(0, 0); n + 1];
    vx[n] = term.cost.grad(tl, Var::X);
    vxx[n] = term.cost.hess1(tl, Var::X, Var::X);
    let mut gains = Vec::with_capacity(n);
    for k in (0..n).rev() {
        let d = &derivs[k];
        let lam = &traj.duals_in[k];
        let nu = &traj.duals_eq[k];
        let q = q_expansion(d, &vx[k + 1], &vxx[k + 1], lam, nu);
        let hq = hat_q(&q, d, lam, nu, mu);
        let chol = cholesky_regularized(&hq.q_uu, rho).ok_or(k)?;
        let kff = -chol.solve(&hq.q_u);
        let kfb = -chol.solve(&hq.q_ux);
        let j = StageJac::of(d);
        let g = &d.ineq.value;
        let lam_over_g = lam.component_div(g);
        let k_in = -(&hq.r_in + lam.component_mul(&(&j.g_u * &kff))).component_div(g);
        let kk_in = -scale_rows(&(&j.g_x + &j.g_u * &kfb), &lam_over_g);
        let k_eq = -&hq.r_eq + &j.h_u * &kff / mu;
        let kk_eq = (&j.h_x + &j.h_u * &kfb) / mu;
        let (vx_k, vxx_k) = value_update(&hq, &kff, &kfb);
        vx[k] = vx_k;
        vxx[k] = vxx_k;
        gains.push(StageGains { k: kff, kk: kfb, k_in, kk_in, k_eq, kk_eq });
    }
    gains.reverse();
    Ok(Backward { gains, vx, vxx })
}

/// Derivatives of all stages and of the terminal cost along a trajectory.
pub fn trajectory_derivatives(
    p: &dyn OcProblem,
    traj: &Trajectory,
    theta: &Vector,
    wrt: Wrt,
) -> Result<(Vec<StageDerivatives>, TerminalDerivatives), ProblemError> {
    let n = traj.horizon();
    let mut out = Vec::with_capacity(n);
    for k in 0..n {
        out.push(p.stage_derivatives(k, &traj.states[k], &traj.controls[k], theta, wrt)?);
    }
    let term = p.terminal_derivatives(&traj.states[n], theta, wrt)?;
    Ok((out, term))
}

/// Adjoint (costate) recursion of the Lagrangian along a fixed trajectory.
/// Returns the stacked `Q_u` residuals, one per stage.
pub fn stationarity(derivs: &[StageDerivatives], term: &TerminalDerivatives, traj: &Trajectory) -> Vec<Vector> {
    let n = derivs.len();
    let mut p = term.cost.grad(&term.layout, Var::X);
    let mut qu = vec![Vector::zeros(0); n];
    for k in (0..n).rev() {
        let d = &derivs[k];
        let l = &d.layout;
        let j = StageJac::of(d);
        let lam = &traj.duals_in[k];
        let nu = &traj.duals_eq[k];
        qu[k] = d.cost.grad(l, Var::U) + j.f_u.tr_mul(&p) + j.g_u.tr_mul(lam) + j.h_u.tr_mul(nu);
        p = d.cost.grad(l, Var::X) + j.f_x.tr_mul(&p) + j.g_x.tr_mul(lam) + j.h_x.tr_mul(nu);
    }
    qu
}

/// `‖[Q_u; r_in; μ·r_eq]‖₂` over all stages at barrier parameter `μ`.
pub fn merit(derivs: &[StageDerivatives], term: &TerminalDerivatives, traj: &Trajectory, mu: f64) -> f64 {
    let qu = stationarity(derivs, term, traj);
    let mut s = 0.0;
    for (k, d) in derivs.iter().enumerate() {
        s += qu[k].norm_squared();
        let lam = &traj.duals_in[k];
        let nu = &traj.duals_eq[k];
        if lam.len() > 0 {
            s += lam.component_mul(&d.ineq.value).add_scalar(mu).norm_squared();
        }
        if nu.len() > 0 {
            s += (nu * mu - &d.eq.value).norm_squared();
        }
    }
    s.sqrt()
}

fn total_cost(p: &dyn OcProblem, traj: &Trajectory, theta: &Vector) -> f64 {
    crate::problem::evaluate_cost(p, theta, traj)
}

/// Candidate trajectory for step size `α`, or `None` when it leaves the
/// fraction-to-boundary region or produces non-finite values.
pub fn forward_pass(
    p: &dyn OcProblem,
    theta: &Vector,
    traj: &Trajectory,
    bw: &Backward,
    alpha: f64,
    tau: f64,
) -> Option<Trajectory> {
    let n = traj.horizon();
    let mut xs = vec![traj.states[0].clone()];
    let mut us = Vec::with_capacity(n);
    let mut lams = Vec::with_capacity(n);
    let mut nus = Vec::with_capacity(n);
    for k in 0..n {
        let gk = &bw.gains[k];
        let dx = &xs[k] - &traj.states[k];
        let u = &traj.controls[k] + &gk.k * alpha + &gk.kk * &dx;
        let lam = &traj.duals_in[k] + &gk.k_in * alpha + &gk.kk_in * &dx;
        let nu = &traj.duals_eq[k] + &gk.k_eq * alpha + &gk.kk_eq * &dx;
        if lam.len() > 0 {
            let g_old = p.inequality(k, &traj.states[k], &traj.controls[k], theta);
            let g_new = p.inequality(k, &xs[k], &u, theta);
            for i in 0..lam.len() {
                if !(g_new[i] <= (1.0 - tau) * g_old[i]) || !(lam[i] >= (1.0 - tau) * traj.duals_in[k][i]) {
                    return None;
                }
            }
        }
        let next = p.dynamics(k, &xs[k], &u, theta);
        if !next.iter().all(|v| v.is_finite()) || !u.iter().all(|v| v.is_finite()) {
            return None;
        }
        xs.push(next);
        us.push(u);
        lams.push(lam);
        nus.push(nu);
    }
    Some(Trajectory { states: xs, controls: us, duals_in: lams, duals_eq: nus })
}

/// Rollout of `u + αk + K(x' − x)` with the multipliers left unchanged.
pub(crate) fn forward_step_plain(
    p: &dyn OcProblem,
    theta: &Vector,
    traj: &Trajectory,
    k: &[Vector],
    kk: &[Mat],
    alpha: f64,
) -> Option<Trajectory> {
    let n = traj.horizon();
    let mut xs = vec![traj.states[0].clone()];
    let mut us = Vec::with_capacity(n);
    for i in 0..n {
        let u = &traj.controls[i] + &k[i] * alpha + &kk[i] * (&xs[i] - &traj.states[i]);
        let next = p.dynamics(i, &xs[i], &u, theta);
        if !next.iter().all(|v| v.is_finite()) || !u.iter().all(|v| v.is_finite()) {
            return None;
        }
        xs.push(next);
        us.push(u);
    }
    Some(Trajectory { states: xs, controls: us, duals_in: traj.duals_in.clone(), duals_eq: traj.duals_eq.clone() })
}

fn initial_duals(p: &dyn OcProblem, traj: &mut Trajectory, theta: &Vector, mu: f64) -> Result<(), SolverError> {
    for k in 0..traj.horizon() {
        let g = p.inequality(k, &traj.states[k], &traj.controls[k], theta);
        if let Some(gi) = g.iter().find(|gi| !(**gi < 0.0)) {
            return Err(SolverError::InfeasibleStart { stage: k, value: *gi });
        }
        traj.duals_in[k] = g.map(|gi| (mu / -gi).max(1e-3));
        traj.duals_eq[k] = Vector::zeros(p.dims().n_eq);
    }
    Ok(())
}

fn initial_trajectory(
    p: &dyn OcProblem,
    theta: &Vector,
    x0: &Vector,
    init: Option<&[Vector]>,
) -> Result<Trajectory, ProblemError> {
    let d = p.dims();
    let zeros = vec![Vector::zeros(d.n_u); d.horizon];
    let controls = match init {
        Some(u) if u.len() == d.horizon => u.to_vec(),
        _ => zeros.clone(),
    };
    let traj = trajectory_from_controls(p, theta, x0, controls)?;
    if init.is_some() && d.n_in > 0 {
        let feasible = (0..d.horizon).all(|k| {
            p.inequality(k, &traj.states[k], &traj.controls[k], theta).iter().all(|g| *g < 0.0)
        });
        if !feasible {
            return trajectory_from_controls(p, theta, x0, zeros);
        }
    }
    Ok(traj)
}

/// Interior-point DDP from zero controls.
pub fn solve_ipddp(p: &dyn OcProblem, theta: &Vector, x0: &Vector, cfg: &SolverConfig) -> Result<SolveResult, SolverError> {
    solve_ipddp_from(p, theta, x0, cfg, None)
}

/// Interior-point DDP from an optional control guess. A guess that violates
/// an inequality is replaced by zero controls.
pub fn solve_ipddp_from(
    p: &dyn OcProblem,
    theta: &Vector,
    x0: &Vector,
    cfg: &SolverConfig,
    init: Option<&[Vector]>,
) -> Result<SolveResult, SolverError> {
    let dims = p.dims();
    let constrained = dims.n_in + dims.n_eq > 0;
    let mut traj = initial_trajectory(p, theta, x0, init)?;
    let (mut derivs, mut term) = trajectory_derivatives(p, &traj, theta, Wrt::StateControl)?;

    let mut mu = if !constrained {
        cfg.mu_floor
    } else if let Some(m) = cfg.mu_init {
        m.max(cfg.mu_floor)
    } else {
        // Scale of the residual before any multiplier is known.
        let qu = stationarity(&derivs, &term, &traj);
        let scale = (qu.iter().map(|v| v.norm_squared()).sum::<f64>()
            + derivs.iter().map(|d| d.eq.value.norm_squared()).sum::<f64>())
        .sqrt();
        (0.1 * scale).clamp(cfg.mu_floor, 10.0)
    };
    initial_duals(p, &mut traj, theta, mu)?;
    let mut cur_merit = merit(&derivs, &term, &traj, mu);
    let mut cost = total_cost(p, &traj, theta);
    let mut rho = 0.0;
    let mut log = vec![IterLog { iter: 0, mu, merit: cur_merit, cost, alpha: 0.0, rho }];
    let mut termination = Termination::IterationLimit;
    let mut iter = 0;

    let snapshot = |traj: &Trajectory, merit: f64, mu: f64, cost: f64, iter: usize, log: &[IterLog]| SolveResult {
        traj: traj.clone(),
        cost,
        merit,
        mu,
        iterations: iter,
        converged: false,
        termination: Termination::IterationLimit,
        log: log.to_vec(),
    };

    while iter < cfg.max_iter {
        let at_floor = mu <= cfg.mu_floor * (1.0 + 1e-12);
        if at_floor && cur_merit < cfg.tol {
            termination = Termination::Converged;
            break;
        }
        if constrained && !at_floor && cur_merit < cfg.kappa * mu {
            mu = (mu * cfg.mu_shrink).max(cfg.mu_floor);
            cur_merit = merit(&derivs, &term, &traj, mu);
            continue;
        }
        iter += 1;
        let mut accepted = None;
        loop {
            let bw = match backward_pass(&derivs, &term, &traj, mu, rho) {
                Ok(bw) => bw,
                Err(stage) => {
                    rho = (rho * cfg.rho_factor).max(cfg.rho_min);
                    if rho > cfg.rho_max {
                        return Err(SolverError::RegularizationExhausted { stage, rho });
                    }
                    continue;
                }
            };
            let mut alpha = 1.0;
            for _ in 0..=cfg.max_backtracks {
                if let Some(cand) = forward_pass(p, theta, &traj, &bw, alpha, cfg.tau) {
                    if let Ok((cd, ct)) = trajectory_derivatives(p, &cand, theta, Wrt::StateControl) {
                        let m = merit(&cd, &ct, &cand, mu);
                        if m < cur_merit {
                            accepted = Some((cand, cd, ct, m, alpha));
                            break;
                        }
                    }
                }
                alpha *= 0.5;
            }
            if accepted.is_some() {
                break;
            }
            rho = (rho * cfg.rho_factor).max(cfg.rho_min);
            if rho > cfg.rho_max {
                if cur_merit < cfg.acceptable_tol {
                    break;
                }
                return Err(SolverError::LineSearchFailed {
                    iter,
                    merit: cur_merit,
                    last: Box::new(snapshot(&traj, cur_merit, mu, cost, iter, &log)),
                });
            }
        }
        let Some((cand, cd, ct, m, alpha)) = accepted else {
            if at_floor {
                termination = Termination::Acceptable;
                break;
            }
            // Nothing measurable is left at this μ; move on to the next one.
            mu = (mu * cfg.mu_shrink).max(cfg.mu_floor);
            cur_merit = merit(&derivs, &term, &traj, mu);
            rho = 0.0;
            continue;
        };
        let stalled = at_floor && m < cfg.acceptable_tol && cur_merit - m < 1e-6 * cur_merit;
        traj = cand;
        derivs = cd;
        term = ct;
        cur_merit = m;
        cost = total_cost(p, &traj, theta);
        log.push(IterLog { iter, mu, merit: cur_merit, cost, alpha, rho });
        rho = if rho / cfg.rho_factor < cfg.rho_min { 0.0 } else { rho / cfg.rho_factor };
        if stalled && m >= cfg.tol {
            termination = Termination::Acceptable;
            break;
        }
    }
    if termination == Termination::IterationLimit && mu <= cfg.mu_floor * (1.0 + 1e-12) && cur_merit < cfg.tol {
        termination = Termination::Converged;
    }
    let converged = termination != Termination::IterationLimit;
    Ok(SolveResult { traj, cost, merit: cur_merit, mu, iterations: iter, converged, termination, log })
}

/// Plain DDP; any constraints of `p` are ignored.
pub fn solve_unconstrained(
    p: &dyn OcProblem,
    theta: &Vector,
    x0: &Vector,
    cfg: &SolverConfig,
) -> Result<SolveResult, SolverError> {
    solve_ipddp(&Unconstrained(p), theta, x0, cfg)
}

/// Warm-started plain DDP.
pub fn solve_unconstrained_from(
    p: &dyn OcProblem,
    theta: &Vector,
    x0: &Vector,
    cfg: &SolverConfig,
    init: Option<&[Vector]>,
) -> Result<SolveResult, SolverError> {
    solve_ipddp_from(&Unconstrained(p), theta, x0, cfg, init)
}

/// Iteration log as CSV (17 significant digits).
pub fn iteration_log_csv(log: &[IterLog]) -> String {
    let mut s = String::from("iter,mu,merit,cost,alpha,rho\n");
    for l in log {
        s.push_str(&format!(
            "{},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}\n",
            l.iter, l.mu, l.merit, l.cost, l.alpha, l.rho
        ));
    }
    s
}

/// States rolled out from `x0` under the trajectory's controls.
pub fn replay(p: &dyn OcProblem, theta: &Vector, traj: &Trajectory) -> Result<Vec<Vector>, ProblemError> {
    rollout(p, theta, &traj.states[0], &traj.controls)
}

pub(crate) fn solve_kkt(q_uu: &Mat, h_u: &Mat, rhs_u: &Mat, rhs_h: &Mat) -> Result<(Mat, Mat), LinalgError> {
    let (m, a) = (q_uu.nrows(), h_u.nrows());
    let mut kkt = Mat::zeros(m + a, m + a);
    kkt.view_mut((0, 0), (m, m)).copy_from(q_uu);
    kkt.view_mut((0, m), (m, a)).copy_from(&h_u.transpose());
    kkt.view_mut((m, 0), (a, m)).copy_from(h_u);
    let mut rhs = Mat::zeros(m + a, rhs_u.ncols());
    rhs.view_mut((0, 0), (m, rhs_u.ncols())).copy_from(rhs_u);
    rhs.view_mut((m, 0), (a, rhs_u.ncols())).copy_from(rhs_h);
    let sol = solve_regularized(&kkt, &rhs, 0.0)?;
    Ok((sol.rows(0, m).into_owned(), sol.rows(m, a).into_owned()))
}
