//! Inverse reinforcement learning with the closed-loop loss.
//!
//! For a demonstration executed as `u** = u* + K*(x** − x*)`, the stage
//! residual
//!
//! ```text
//! r_k = Q̂_u + Q̂_ux (x_k** − x_k) + Q̂_uu (u_k** − u_k)
//! ```
//!
//! vanishes at the true parameter for any noise realisation. Its Jacobian
//! needs the total θ-derivatives of `Q̂_uu` and `Q̂_ux`, which come from a
//! second backward sweep that differentiates the value recursion along the
//! trajectory sensitivities.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::benchmarks::parameter_residual;
use crate::ddp::{scale_rows, SolverConfig};
use crate::demo::{DemoError, Demonstration};
use crate::gradient::{
    build_augmented, gradient_backward, gradient_forward, AugBackward, AugmentedProblem, GradientError,
    TrajectoryGradient,
};
use crate::irl_open::{clamp, open_loop_loss};
use crate::linalg::{kron, numerical_rank, solve_regularized, symmetrize, unvec, vec, Mat, Vector};
use crate::pipeline::{solve, SolverChoice, Solved};
use crate::problem::{OcProblem, ProblemError, Trajectory, Unconstrained, Var, Wrt};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ClosedLoopError {
    #[error("iteration {iter}: solver failed: {source}")]
    Solver { iter: usize, source: crate::ddp::SolverError },
    #[error("iteration {iter}: {source}")]
    Gradient { iter: usize, source: GradientError },
    #[error(transparent)]
    Problem(#[from] ProblemError),
    #[error(transparent)]
    Demo(#[from] DemoError),
    #[error("stage {0} is not a sampled stage with a control")]
    NotSampled(usize),
    #[error("damped normal equations are singular (rank {rank} of {n})")]
    Singular { rank: usize, n: usize },
    #[error("problem is not linear-quadratic: {0}")]
    NotLqr(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
}

// ---------------------------------------------------------------------------
// Second-order backward sweep

/// Total θ-derivatives of the augmented backward quantities, one column per
/// parameter, matrices vectorised column-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SecondOrderBundle {
    /// `dQ̄̂_u/dθ`, `n_u × n_θ`, stages `0..N`.
    pub d_qu: Vec<Mat>,
    /// `d vec(Q̄̂_uu)/dθ`, `n_u² × n_θ`.
    pub d_quu: Vec<Mat>,
    /// `d vec(Q̄̂_uy)/dθ`, `n_u(n_θ + n_x) × n_θ`.
    pub d_quy: Vec<Mat>,
    /// `dV̄_y/dθ`, stages `0..=N`.
    pub d_vy: Vec<Mat>,
    /// `d vec(V̄_yy)/dθ`, stages `0..=N`.
    pub d_vyy: Vec<Mat>,
}

impl SecondOrderBundle {
    /// `d vec(Q̂_ux)/dθ`, the state columns of `d vec(Q̄̂_uy)/dθ`.
    pub fn d_qux(&self, k: usize, n_theta: usize) -> Mat {
        let m = &self.d_quy[k];
        let nu = self.d_qu[k].nrows();
        let skip = nu * n_theta;
        m.rows(skip, m.nrows() - skip).into_owned()
    }
}

/// Tangents `[dy_k; du_k]` in augmented coordinates `[θ; x; u]`.
fn stage_dirs(n_theta: usize, dx: &Mat, du: Option<&Mat>) -> Mat {
    let nx = dx.nrows();
    let nu = du.map(|m| m.nrows()).unwrap_or(0);
    let mut t = Mat::zeros(n_theta + nx + nu, n_theta);
    for i in 0..n_theta {
        t[(i, i)] = 1.0;
    }
    t.view_mut((n_theta, 0), (nx, n_theta)).copy_from(dx);
    if let Some(du) = du {
        t.view_mut((n_theta + nx, 0), (nu, n_theta)).copy_from(du);
    }
    t
}

/// Differentiates the augmented backward pass along `dT/dθ`.
///
/// Stage multipliers are the eliminated ones, `λ = −μ/g` and `ν = h/μ`, so
/// they vary with the trajectory as `dλ = −(λ/g)∘dg`, `dν = dh/μ`.
pub fn second_order_backward(
    aug: &AugmentedProblem<'_>,
    aug_traj: &Trajectory,
    bw: &AugBackward,
    grad: &TrajectoryGradient,
    mu: f64,
) -> Result<SecondOrderBundle, ClosedLoopError> {
    let n = aug_traj.horizon();
    let nt = aug.n_theta;
    if bw.stages.len() != n || grad.du.len() != n || grad.dx.len() != n + 1 {
        return Err(ClosedLoopError::Dimension("backward pass, gradient and trajectory disagree".into()));
    }
    let empty = Vector::zeros(0);
    let ny = aug_traj.states[0].len();
    let mut d_vy = vec![Mat::zeros(0, 0); n + 1];
    let mut d_vyy = vec![Mat::zeros(0, 0); n + 1];
    let mut d_qu = vec![Mat::zeros(0, 0); n];
    let mut d_quu = vec![Mat::zeros(0, 0); n];
    let mut d_quy = vec![Mat::zeros(0, 0); n];

    let tdirs = stage_dirs(nt, &grad.dx[n], None);
    let tt = aug.terminal_tangents(&aug_traj.states[n], &empty, &tdirs)?;
    let mut vy_n = Mat::zeros(ny, nt);
    let mut vyy_n = Mat::zeros(ny * ny, nt);
    for j in 0..nt {
        vy_n.set_column(j, &tt.djac[j].row(0).transpose());
        vyy_n.set_column(j, &vec(tt.dhess[j].slice(0)));
    }
    d_vy[n] = vy_n;
    d_vyy[n] = vyy_n;

    for k in (0..n).rev() {
        let st = &bw.stages[k];
        let d = &st.derivs;
        let l = d.layout;
        let nu = l.n_u;
        let nz = l.nz();
        let dirs = stage_dirs(nt, &grad.dx[k], Some(&grad.du[k]));
        let tg = aug.stage_tangents(k, &aug_traj.states[k], &aug_traj.controls[k], &empty, &dirs)?;
        let vy1 = &bw.vy[k + 1];
        let vyy1 = &bw.vyy[k + 1];
        let f_z = &d.dynamics.jac;
        let g_z = &d.ineq.jac;
        let h_z = &d.eq.jac;
        let g = &d.ineq.value;
        let lam = &st.lam;
        let nu_ = &st.nu;
        // D = μ/g², the barrier curvature on the interior.
        let dcurv = g.map(|gi| mu / (gi * gi));
        let vyy1_fz = vyy1 * f_z;
        let kfb = &st.kfb;
        let qinv = |rhs: &Mat| solve_regularized(&st.hq.q_uu, rhs, 0.0);

        let mut dqu = Mat::zeros(nu, nt);
        let mut dquu = Mat::zeros(nu * nu, nt);
        let mut dquy = Mat::zeros(nu * ny, nt);
        let mut dvy = Mat::zeros(ny, nt);
        let mut dvyy = Mat::zeros(ny * ny, nt);
        for j in 0..nt {
            let dvy1 = d_vy[k + 1].column(j).into_owned();
            let dvyy1 = unvec(&d_vyy[k + 1].column(j).into_owned(), ny, ny);
            let df_z = &tg.dynamics.djac[j];
            let dg = tg.ineq.dvalue.column(j).into_owned();
            let dg_z = &tg.ineq.djac[j];
            let dh = tg.eq.dvalue.column(j).into_owned();
            let dh_z = &tg.eq.djac[j];
            let dlam = -lam.component_div(g).component_mul(&dg);
            let dnu = &dh / mu;

            let dq_z = tg.cost.djac[j].row(0).transpose()
                + df_z.tr_mul(vy1)
                + f_z.tr_mul(&dvy1)
                + dg_z.tr_mul(lam)
                + g_z.tr_mul(&dlam)
                + dh_z.tr_mul(nu_)
                + h_z.tr_mul(&dnu);
            let mut dq_zz = tg.cost.dhess[j].slice(0).clone();
            dq_zz += d.dynamics.hess.contract(&dvy1) + tg.dynamics.dhess[j].contract(vy1);
            if g.len() > 0 {
                dq_zz += d.ineq.hess.contract(&dlam) + tg.ineq.dhess[j].contract(lam);
                let ddcurv = g.zip_map(&dg, |gi, dgi| -2.0 * mu * dgi / (gi * gi * gi));
                let dg_scaled = scale_rows(g_z, &dcurv);
                dq_zz += dg_z.tr_mul(&dg_scaled) + dg_scaled.tr_mul(dg_z) + g_z.tr_mul(&scale_rows(g_z, &ddcurv));
            }
            if nu_.len() > 0 {
                dq_zz += d.eq.hess.contract(&dnu) + tg.eq.dhess[j].contract(nu_);
                dq_zz += (dh_z.tr_mul(h_z) + h_z.tr_mul(dh_z)) / mu;
            }
            dq_zz += df_z.tr_mul(&vyy1_fz) + vyy1_fz.tr_mul(df_z) + f_z.tr_mul(&(&dvyy1 * f_z));

            let (oy, ou) = (0, ny);
            let dq_y = dq_z.rows(oy, ny).into_owned();
            let dq_u = dq_z.rows(ou, nu).into_owned();
            let dq_yy = dq_zz.view((oy, oy), (ny, ny)).into_owned();
            let dq_uy = dq_zz.view((ou, oy), (nu, ny)).into_owned();
            let dq_uu = dq_zz.view((ou, ou), (nu, nu)).into_owned();

            // dK̄ = −Q̂_uu⁻¹(dQ̂_uy + dQ̂_uu K̄)
            let dk = -qinv(&(&dq_uy + &dq_uu * kfb)).map_err(|_| ClosedLoopError::Gradient {
                iter: 0,
                source: GradientError::Singular { stage: k },
            })?;
            let v1 = &dq_y + kfb.tr_mul(&dq_u) + dk.tr_mul(&st.hq.q_u);
            let mut v2 = &dq_yy + dq_uy.tr_mul(kfb) + kfb.tr_mul(&dq_uy) + kfb.tr_mul(&(&dq_uu * kfb));

            dqu.set_column(j, &dq_u);
            dquu.set_column(j, &vec(&dq_uu));
            dquy.set_column(j, &vec(&dq_uy));
            dvy.set_column(j, &v1);
            symmetrize(&mut v2);
            dvyy.set_column(j, &vec(&v2));
            debug_assert_eq!(dq_zz.nrows(), nz);
        }
        d_qu[k] = dqu;
        d_quu[k] = dquu;
        d_quy[k] = dquy;
        d_vy[k] = dvy;
        d_vyy[k] = dvyy;
    }
    Ok(SecondOrderBundle { d_qu, d_quu, d_quy, d_vy, d_vyy })
}

// ---------------------------------------------------------------------------
// Residuals and Jacobian

/// `r_k = Q̂_u + Q̂_ux (x_k** − x_k) + Q̂_uu (u_k** − u_k)`
pub fn closed_loop_residual(
    bw: &AugBackward,
    demo: &Demonstration,
    traj: &Trajectory,
    k: usize,
) -> Result<Vector, ClosedLoopError> {
    if !demo.samples.contains(&k) || k >= traj.horizon() {
        return Err(ClosedLoopError::NotSampled(k));
    }
    let hq = &bw.stages[k].hq;
    let nt = bw.n_theta;
    let nx = traj.states[k].len();
    let qux = hq.q_ux.columns(nt, nx);
    Ok(&hq.q_u + qux * (&demo.states[k] - &traj.states[k]) + &hq.q_uu * (&demo.controls[k] - &traj.controls[k]))
}

/// Stacked residual and Jacobian over sampled stages (and demonstrations).
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualSystem {
    pub r: Vector,
    pub j: Mat,
    /// `(demo, stage)` of each row block.
    pub blocks: Vec<(usize, usize)>,
}

impl ResidualSystem {
    pub fn loss(&self) -> f64 {
        self.r.norm_squared()
    }

    pub fn stack(parts: Vec<ResidualSystem>) -> ResidualSystem {
        let rows: usize = parts.iter().map(|p| p.r.len()).sum();
        let nt = parts.first().map(|p| p.j.ncols()).unwrap_or(0);
        let mut r = Vector::zeros(rows);
        let mut j = Mat::zeros(rows, nt);
        let mut blocks = Vec::new();
        let mut o = 0;
        for (d, p) in parts.into_iter().enumerate() {
            r.rows_mut(o, p.r.len()).copy_from(&p.r);
            j.view_mut((o, 0), (p.r.len(), nt)).copy_from(&p.j);
            o += p.r.len();
            blocks.extend(p.blocks.into_iter().map(|(_, k)| (d, k)));
        }
        ResidualSystem { r, j, blocks }
    }
}

/// Stages of `demo.samples` that carry a control.
pub fn residual_stages(demo: &Demonstration) -> Vec<usize> {
    demo.samples.iter().copied().filter(|k| *k < demo.horizon()).collect()
}

/// Residuals only, for line-search style trial evaluations.
pub fn residual_vector(bw: &AugBackward, demo: &Demonstration, traj: &Trajectory) -> Result<Vector, ClosedLoopError> {
    let mut parts = Vec::new();
    for k in residual_stages(demo) {
        parts.extend(closed_loop_residual(bw, demo, traj, k)?.iter().copied());
    }
    Ok(Vector::from_vec(parts))
}

/// Row block `Q̄̂_uθ + [(Δȳ)ᵀ ⊗ I] d vec(Q̄̂_uy)/dθ + [(Δu)ᵀ ⊗ I] d vec(Q̂_uu)/dθ`
/// per sampled stage, with `Δȳ = [0; x** − x]`.
pub fn assemble_jacobian(
    bw: &AugBackward,
    bundle: &SecondOrderBundle,
    demo: &Demonstration,
    traj: &Trajectory,
) -> Result<ResidualSystem, ClosedLoopError> {
    let nt = bw.n_theta;
    let stages = residual_stages(demo);
    let nu = traj.controls.first().map(|u| u.len()).unwrap_or(0);
    let mut r = Vector::zeros(stages.len() * nu);
    let mut j = Mat::zeros(stages.len() * nu, nt);
    let eye = Mat::identity(nu, nu);
    for (b, &k) in stages.iter().enumerate() {
        let hq = &bw.stages[k].hq;
        let rk = closed_loop_residual(bw, demo, traj, k)?;
        let nx = traj.states[k].len();
        let mut dy = Mat::zeros(nt + nx, 1);
        dy.view_mut((nt, 0), (nx, 1)).copy_from(&(&demo.states[k] - &traj.states[k]));
        let du = Mat::from_column_slice(nu, 1, (&demo.controls[k] - &traj.controls[k]).as_slice());
        let jk = hq.q_ux.columns(0, nt) + kron(&dy.transpose(), &eye) * &bundle.d_quy[k]
            + kron(&du.transpose(), &eye) * &bundle.d_quu[k];
        r.rows_mut(b * nu, nu).copy_from(&rk);
        j.view_mut((b * nu, 0), (nu, nt)).copy_from(&jk);
    }
    Ok(ResidualSystem { r, j, blocks: stages.into_iter().map(|k| (0, k)).collect() })
}

/// Solves `(JᵀJ + η′I) δθ = Jᵀr`; the update is `θ ← θ − δθ`.
pub fn lm_update(rs: &ResidualSystem, eta: f64) -> Result<Vector, ClosedLoopError> {
    if !(eta >= 0.0) {
        return Err(ClosedLoopError::Config(format!("damping must be non-negative, got {eta}")));
    }
    let n = rs.j.ncols();
    if rs.j.nrows() == 0 {
        return if eta > 0.0 { Ok(Vector::zeros(n)) } else { Err(ClosedLoopError::Singular { rank: 0, n }) };
    }
    // δθ = V diag(σ/(σ² + η′)) Uᵀ r, which avoids forming JᵀJ.
    let svd = rs.j.clone().svd(true, true);
    let (u, vt) = (svd.u.as_ref().expect("u"), svd.v_t.as_ref().expect("v_t"));
    let report = rank_diagnostic(&rs.j);
    if eta == 0.0 && report.rank < n {
        return Err(ClosedLoopError::Singular { rank: report.rank, n });
    }
    let utr = u.tr_mul(&rs.r);
    let mut coef = Vector::zeros(vt.nrows());
    for (i, s) in svd.singular_values.iter().enumerate() {
        let d = s * s + eta;
        if d > 0.0 && (eta > 0.0 || *s > report.tolerance) {
            coef[i] = s * utr[i] / d;
        }
    }
    Ok(vt.tr_mul(&coef))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankReport {
    pub rank: usize,
    pub full: bool,
    pub tolerance: f64,
    pub singular_values: Vec<f64>,
}

/// Numerical rank with threshold `σ_max · max(rows, cols) · ε`.
pub fn rank_diagnostic(j: &Mat) -> RankReport {
    let (r, c) = j.shape();
    if r == 0 || c == 0 {
        return RankReport { rank: 0, full: c == 0, tolerance: 0.0, singular_values: Vec::new() };
    }
    let (rank, sv) = numerical_rank(j, f64::EPSILON);
    let smax = sv.iter().copied().fold(0.0, f64::max);
    RankReport { rank, full: rank == c, tolerance: smax * r.max(c) as f64 * f64::EPSILON, singular_values: sv.iter().copied().collect() }
}

/// `d vec(K_k)/dθ = −(I_n ⊗ Q̂_uu⁻¹)[(K_kᵀ ⊗ I_m) d vec(Q̂_uu)/dθ + d vec(Q̂_ux)/dθ]`
/// for the state-feedback gain `K_k = −Q̂_uu⁻¹ Q̂_ux`.
pub fn gain_derivative(bw: &AugBackward, bundle: &SecondOrderBundle, k: usize) -> Result<Mat, ClosedLoopError> {
    let nt = bw.n_theta;
    let st = &bw.stages[k];
    let m = st.hq.q_uu.nrows();
    let kk = st.kfb.columns(nt, st.kfb.ncols() - nt).into_owned();
    let n = kk.ncols();
    let quu_inv = solve_regularized(&st.hq.q_uu, &Mat::identity(m, m), 0.0)
        .map_err(|_| ClosedLoopError::Gradient { iter: 0, source: GradientError::Singular { stage: k } })?;
    let inner = kron(&kk.transpose(), &Mat::identity(m, m)) * &bundle.d_quu[k] + bundle.d_qux(k, nt);
    Ok(-(kron(&Mat::identity(n, n), &quu_inv) * inner))
}

// ---------------------------------------------------------------------------
// Per-θ analysis

/// Everything derived from one solve at `θ` for one demonstration.
#[derive(Debug, Clone)]
pub struct Analysis {
    pub solved: Solved,
    pub backward: AugBackward,
    pub aug_traj: Trajectory,
    pub mu: f64,
}

fn with_problem<R>(p: &dyn OcProblem, choice: SolverChoice, f: impl FnOnce(&dyn OcProblem) -> R) -> R {
    if choice == SolverChoice::Unconstrained {
        f(&Unconstrained(p))
    } else {
        f(p)
    }
}

/// Solves at `θ` and runs the augmented backward pass.
pub fn analyze(
    p: &dyn OcProblem,
    theta: &Vector,
    demo: &Demonstration,
    choice: SolverChoice,
    cfg: &SolverConfig,
    warm: Option<&[Vector]>,
    iter: usize,
) -> Result<Analysis, ClosedLoopError> {
    if choice == SolverChoice::ActiveSet {
        return Err(ClosedLoopError::Config("closed-loop IRL needs the interior-point or unconstrained solver".into()));
    }
    let solved = solve(p, theta, demo.x0(), choice, cfg, warm).map_err(|e| ClosedLoopError::Solver { iter, source: e })?;
    with_problem(p, choice, |q| {
        let mu = if q.dims().n_in + q.dims().n_eq == 0 { 1.0 } else { solved.result.mu };
        let (aug, at) = build_augmented(q, &solved.result.traj, theta);
        let backward =
            gradient_backward(&aug, &at, mu, false).map_err(|e| ClosedLoopError::Gradient { iter, source: e })?;
        Ok(Analysis { solved, backward, aug_traj: at, mu })
    })
}

impl Analysis {
    pub fn traj(&self) -> &Trajectory {
        &self.solved.result.traj
    }

    pub fn gradient(&self) -> TrajectoryGradient {
        gradient_forward(&self.backward, self.traj().states[0].len())
    }

    pub fn bundle(&self, p: &dyn OcProblem, iter: usize) -> Result<SecondOrderBundle, ClosedLoopError> {
        let g = self.gradient();
        with_problem(p, self.solved.choice, |q| {
            let aug = AugmentedProblem::new(q);
            second_order_backward(&aug, &self.aug_traj, &self.backward, &g, self.mu)
        })
        .map_err(|e| match e {
            ClosedLoopError::Gradient { source, .. } => ClosedLoopError::Gradient { iter, source },
            other => other,
        })
    }

    pub fn system(&self, p: &dyn OcProblem, demo: &Demonstration, iter: usize) -> Result<ResidualSystem, ClosedLoopError> {
        let b = self.bundle(p, iter)?;
        assemble_jacobian(&self.backward, &b, demo, self.traj())
    }

    /// Largest `‖Q̂_u‖` along the trajectory, a check on solve quality.
    pub fn max_qu(&self) -> f64 {
        self.backward.stages.iter().map(|s| s.hq.q_u.amax()).fold(0.0, f64::max)
    }
}

// ---------------------------------------------------------------------------
// LQR path

/// Residual `Q̂_ux x** + Q̂_uu u**` and Jacobian
/// `[(x**)ᵀ ⊗ I] d vec(Q̂_ux)/dθ + [(u**)ᵀ ⊗ I] d vec(Q̂_uu)/dθ` of a
/// linear-quadratic problem without constraints.
pub fn lqr_residual_jacobian(
    p: &dyn OcProblem,
    theta: &Vector,
    demo: &Demonstration,
    cfg: &SolverConfig,
) -> Result<ResidualSystem, ClosedLoopError> {
    check_lqr(p, theta, demo)?;
    let a = analyze(p, theta, demo, SolverChoice::Ipddp, cfg, None, 0)?;
    let b = a.bundle(p, 0)?;
    let nt = theta.len();
    let stages = residual_stages(demo);
    let nu = p.dims().n_u;
    let eye = Mat::identity(nu, nu);
    let mut r = Vector::zeros(stages.len() * nu);
    let mut j = Mat::zeros(stages.len() * nu, nt);
    for (i, &k) in stages.iter().enumerate() {
        let hq = &a.backward.stages[k].hq;
        let x = &demo.states[k];
        let u = &demo.controls[k];
        r.rows_mut(i * nu, nu).copy_from(&(hq.q_ux.columns(nt, x.len()) * x + &hq.q_uu * u));
        let xm = Mat::from_row_slice(1, x.len(), x.as_slice());
        let um = Mat::from_row_slice(1, nu, u.as_slice());
        let jk = kron(&xm, &eye) * b.d_qux(k, nt) + kron(&um, &eye) * &b.d_quu[k];
        j.view_mut((i * nu, 0), (nu, nt)).copy_from(&jk);
    }
    Ok(ResidualSystem { r, j, blocks: stages.into_iter().map(|k| (0, k)).collect() })
}

/// Rejects problems with constraints, curved dynamics, non-quadratic costs
/// or affine terms, judged at the origin and the demonstration points.
fn check_lqr(p: &dyn OcProblem, theta: &Vector, demo: &Demonstration) -> Result<(), ClosedLoopError> {
    let d = p.dims();
    if d.n_in + d.n_eq > 0 {
        return Err(ClosedLoopError::NotLqr("problem has constraints".into()));
    }
    let (x0, u0) = (Vector::zeros(d.n_x), Vector::zeros(d.n_u));
    let tol = 1e-12;
    for k in 0..d.horizon {
        let at0 = p.stage_derivatives(k, &x0, &u0, theta, Wrt::StateControl)?;
        let l = at0.layout;
        if at0.dynamics.value.amax() > tol || at0.cost.jac.amax() > tol {
            return Err(ClosedLoopError::NotLqr(format!("affine term at stage {k}")));
        }
        let atd = p.stage_derivatives(k, &demo.states[k], &demo.controls[k], theta, Wrt::StateControl)?;
        let curved = (0..d.n_x).any(|i| atd.dynamics.hess.slice(i).amax() > tol);
        let scale = 1.0 + at0.cost.hess.slice(0).amax();
        if curved
            || (atd.cost.hess.slice(0) - at0.cost.hess.slice(0)).amax() > tol * scale
            || (atd.dynamics.d(&l, Var::X) - at0.dynamics.d(&l, Var::X)).amax() > tol
        {
            return Err(ClosedLoopError::NotLqr(format!("non-quadratic cost or nonlinear dynamics at stage {k}")));
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Levenberg–Marquardt loop

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LmConfig {
    pub theta0: Vec<f64>,
    pub theta_lower: Vec<f64>,
    pub theta_upper: Vec<f64>,
    pub t_max: usize,
    /// Initial damping; `1e-3 · mean(diag(JᵀJ))` when absent.
    #[serde(default)]
    pub eta_init: Option<f64>,
    /// Stop once `L^cl` falls below this.
    #[serde(default = "default_loss_tol")]
    pub loss_tol: f64,
    /// Stop once `‖δθ‖ ≤ step_tol (‖θ‖ + step_tol)`.
    #[serde(default = "default_step_tol")]
    pub step_tol: f64,
    #[serde(default)]
    pub solver: SolverChoice,
    #[serde(default)]
    pub solver_config: SolverConfig,
    /// Parameters fitted to the one-step dynamics residual before the main
    /// loop. Empty disables the initialiser.
    #[serde(default)]
    pub dynamics_init: Vec<usize>,
}

fn default_loss_tol() -> f64 {
    1e-28
}
fn default_step_tol() -> f64 {
    1e-13
}

impl LmConfig {
    pub fn new(theta0: Vector, lower: Vector, upper: Vector, t_max: usize) -> Self {
        LmConfig {
            theta0: theta0.iter().copied().collect(),
            theta_lower: lower.iter().copied().collect(),
            theta_upper: upper.iter().copied().collect(),
            t_max,
            eta_init: None,
            loss_tol: default_loss_tol(),
            step_tol: default_step_tol(),
            solver: SolverChoice::Ipddp,
            solver_config: SolverConfig::default(),
            dynamics_init: Vec::new(),
        }
    }

    pub fn validate(&self, n_theta: usize) -> Result<(), ClosedLoopError> {
        if self.theta0.len() != n_theta || self.theta_lower.len() != n_theta || self.theta_upper.len() != n_theta {
            return Err(ClosedLoopError::Config(format!("theta0 and bounds must have length {n_theta}")));
        }
        if self.theta_lower.iter().zip(&self.theta_upper).any(|(l, u)| !(l <= u)) {
            return Err(ClosedLoopError::Config("theta_lower must not exceed theta_upper".into()));
        }
        if matches!(self.eta_init, Some(e) if !(e >= 0.0)) {
            return Err(ClosedLoopError::Config("eta_init must be non-negative".into()));
        }
        if self.dynamics_init.iter().any(|i| *i >= n_theta) {
            return Err(ClosedLoopError::Config("dynamics_init index out of range".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClosedLoopRecord {
    pub t: usize,
    pub loss_cl: f64,
    /// Open-loop loss on the same data, recorded only.
    pub loss_ol: f64,
    pub eta: f64,
    pub step_norm: f64,
    pub rank: usize,
    pub param_residual: Option<f64>,
    pub theta: Vec<f64>,
    pub max_qu: f64,
    pub rejections: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClosedLoopTrace {
    pub records: Vec<ClosedLoopRecord>,
    pub theta: Vec<f64>,
    pub stop: StopReason,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    LossTolerance,
    StepTolerance,
    DampingLimit,
    IterationLimit,
}

struct State {
    theta: Vector,
    analyses: Vec<Analysis>,
    system: ResidualSystem,
    loss_ol: f64,
}

fn evaluate(
    p: &dyn OcProblem,
    theta: &Vector,
    demos: &[Demonstration],
    cfg: &LmConfig,
    warm: Option<&[Analysis]>,
    iter: usize,
) -> Result<(Vec<Analysis>, Vector, f64), ClosedLoopError> {
    let mut analyses = Vec::with_capacity(demos.len());
    let mut r = Vec::new();
    let mut lol = 0.0;
    for (i, d) in demos.iter().enumerate() {
        let w = warm.and_then(|w| w.get(i)).map(|a| a.solved.controls());
        let a = analyze(p, theta, d, cfg.solver, &cfg.solver_config, w, iter)?;
        r.extend(residual_vector(&a.backward, d, a.traj())?.iter().copied());
        lol += open_loop_loss(d, a.traj(), theta, 0.0).map(|l| l.loss).unwrap_or(f64::NAN);
        analyses.push(a);
    }
    Ok((analyses, Vector::from_vec(r), lol))
}

fn full_state(
    p: &dyn OcProblem,
    theta: Vector,
    analyses: Vec<Analysis>,
    demos: &[Demonstration],
    loss_ol: f64,
    iter: usize,
) -> Result<State, ClosedLoopError> {
    let parts = analyses
        .iter()
        .zip(demos)
        .map(|(a, d)| a.system(p, d, iter))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(State { theta, analyses, system: ResidualSystem::stack(parts), loss_ol })
}

/// Levenberg–Marquardt on the summed closed-loop loss `Σ ‖r_k‖²`.
pub fn run_closed_loop(
    p: &dyn OcProblem,
    demos: &[Demonstration],
    cfg: &LmConfig,
    theta_star: Option<&Vector>,
) -> Result<ClosedLoopTrace, ClosedLoopError> {
    let nt = p.dims().n_theta;
    cfg.validate(nt)?;
    if demos.is_empty() {
        return Err(ClosedLoopError::Config("at least one demonstration is required".into()));
    }
    for d in demos {
        d.validate(p)?;
    }
    let (lo, hi) = (&cfg.theta_lower, &cfg.theta_upper);
    let mut theta = clamp(&Vector::from_vec(cfg.theta0.clone()), lo, hi);
    if !cfg.dynamics_init.is_empty() {
        theta = fit_dynamics(p, demos, &theta, &cfg.dynamics_init, lo, hi)?;
    }
    let (an, _, lol) = evaluate(p, &theta, demos, cfg, None, 0)?;
    let mut s = full_state(p, theta, an, demos, lol, 0)?;
    let mut eta = cfg.eta_init.unwrap_or_else(|| {
        let jtj = s.system.j.tr_mul(&s.system.j);
        1e-3 * jtj.diagonal().mean()
    });
    let mut records = Vec::new();
    let mut step_norm = 0.0;
    let mut rejections = 0;
    let mut stop = StopReason::IterationLimit;
    for t in 0..=cfg.t_max {
        let loss = s.system.loss();
        records.push(ClosedLoopRecord {
            t,
            loss_cl: loss,
            loss_ol: s.loss_ol,
            eta,
            step_norm,
            rank: rank_diagnostic(&s.system.j).rank,
            param_residual: theta_star.and_then(|ts| parameter_residual(&s.theta, ts).ok()),
            theta: s.theta.iter().copied().collect(),
            max_qu: s.analyses.iter().map(|a| a.max_qu()).fold(0.0, f64::max),
            rejections,
        });
        if loss < cfg.loss_tol {
            stop = StopReason::LossTolerance;
            break;
        }
        if t > 0 && step_norm <= cfg.step_tol * (s.theta.norm() + cfg.step_tol) {
            stop = StopReason::StepTolerance;
            break;
        }
        if t == cfg.t_max {
            break;
        }
        rejections = 0;
        let accepted = loop {
            let delta = lm_update(&s.system, eta)?;
            let next = clamp(&(&s.theta - &delta), lo, hi);
            let step = &s.theta - &next;
            let predicted = loss - (&s.system.r - &s.system.j * &step).norm_squared();
            let trial = evaluate(p, &next, demos, cfg, Some(&s.analyses), t + 1);
            if let Ok((an, r, lol)) = trial {
                let actual = loss - r.norm_squared();
                let rho = actual / predicted;
                if predicted > 0.0 && rho > 0.0 {
                    eta *= (1.0 - (2.0 * rho - 1.0).powi(3)).max(1.0 / 3.0);
                    step_norm = step.norm();
                    break Some(full_state(p, next, an, demos, lol, t + 1)?);
                }
            }
            eta *= 2.0;
            rejections += 1;
            if eta > 1e30 || step.norm() == 0.0 {
                break None;
            }
        };
        match accepted {
            Some(n) => s = n,
            None => {
                stop = StopReason::DampingLimit;
                break;
            }
        }
    }
    Ok(ClosedLoopTrace { records, theta: s.theta.iter().copied().collect(), stop })
}

/// Fits the listed components of θ to `x_{k+1}** ≈ f(x_k**, u_k**; θ)` by
/// Gauss–Newton, leaving the rest unchanged.
pub fn fit_dynamics(
    p: &dyn OcProblem,
    demos: &[Demonstration],
    theta0: &Vector,
    idx: &[usize],
    lo: &[f64],
    hi: &[f64],
) -> Result<Vector, ClosedLoopError> {
    let mut theta = theta0.clone();
    let mut eta = 1e-6;
    let eval = |th: &Vector| -> Result<(Vector, Mat), ClosedLoopError> {
        let mut r = Vec::new();
        let mut rows = Vec::new();
        for d in demos {
            for k in 0..d.horizon() {
                let sd = p.stage_derivatives(k, &d.states[k], &d.controls[k], th, Wrt::All)?;
                let ft = sd.dynamics.d(&sd.layout, Var::Theta);
                let e = &d.states[k + 1] - &sd.dynamics.value;
                for i in 0..e.len() {
                    r.push(e[i]);
                    rows.push(idx.iter().map(|c| -ft[(i, *c)]).collect::<Vec<_>>());
                }
            }
        }
        let j = Mat::from_fn(rows.len(), idx.len(), |a, b| rows[a][b]);
        Ok((Vector::from_vec(r), j))
    };
    let (mut r, mut j) = eval(&theta)?;
    for _ in 0..50 {
        let rs = ResidualSystem { r: r.clone(), j: j.clone(), blocks: Vec::new() };
        let delta = lm_update(&rs, eta)?;
        let mut next = theta.clone();
        for (a, c) in idx.iter().enumerate() {
            next[*c] = (theta[*c] - delta[a]).clamp(lo[*c], hi[*c]);
        }
        let (rn, jn) = eval(&next)?;
        if rn.norm_squared() < r.norm_squared() {
            let done = (&next - &theta).norm() < 1e-14 * (1.0 + theta.norm());
            theta = next;
            r = rn;
            j = jn;
            eta = (eta / 3.0).max(1e-12);
            if done {
                break;
            }
        } else {
            eta *= 4.0;
            if eta > 1e12 {
                break;
            }
        }
    }
    Ok(theta)
}

/// `J` evaluated at `θ` for each demonstration, stacked.
pub fn jacobian_at(
    p: &dyn OcProblem,
    theta: &Vector,
    demos: &[Demonstration],
    choice: SolverChoice,
    cfg: &SolverConfig,
) -> Result<ResidualSystem, ClosedLoopError> {
    let parts = demos
        .iter()
        .map(|d| analyze(p, theta, d, choice, cfg, None, 0)?.system(p, d, 0))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(ResidualSystem::stack(parts))
}

/// The state columns of `Q̄̂_uy`, i.e. `Q̂_ux`, at stage `k`.
pub fn q_ux(bw: &AugBackward, k: usize) -> Mat {
    let q = &bw.stages[k].hq.q_ux;
    q.columns(bw.n_theta, q.ncols() - bw.n_theta).into_owned()
}

/// Finite θ-derivative of `Q̂_uu` and `Q̂_ux` blocks across re-solves, used
/// to validate [`second_order_backward`].
pub fn fd_block_derivatives(
    p: &dyn OcProblem,
    theta: &Vector,
    demo: &Demonstration,
    choice: SolverChoice,
    cfg: &SolverConfig,
    h: f64,
) -> Result<(Vec<Mat>, Vec<Mat>), ClosedLoopError> {
    let n = p.dims().horizon;
    let nt = theta.len();
    let mut d_quu = vec![Mat::zeros(0, nt); n];
    let mut d_qux = vec![Mat::zeros(0, nt); n];
    for i in 0..nt {
        let mut tp = theta.clone();
        tp[i] += h;
        let mut tm = theta.clone();
        tm[i] -= h;
        let ap = analyze(p, &tp, demo, choice, cfg, None, 0)?;
        let am = analyze(p, &tm, demo, choice, cfg, None, 0)?;
        for k in 0..n {
            let duu = (vec(&ap.backward.stages[k].hq.q_uu) - vec(&am.backward.stages[k].hq.q_uu)) / (2.0 * h);
            let dux = (vec(&q_ux(&ap.backward, k)) - vec(&q_ux(&am.backward, k))) / (2.0 * h);
            if i == 0 {
                d_quu[k] = Mat::zeros(duu.len(), nt);
                d_qux[k] = Mat::zeros(dux.len(), nt);
            }
            d_quu[k].set_column(i, &duu);
            d_qux[k].set_column(i, &dux);
        }
    }
    Ok((d_quu, d_qux))
}
