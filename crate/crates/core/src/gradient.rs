//! Analytic gradients `dT/dθ` of an optimal trajectory.
//!
//! The parameter is folded into an augmented state `y = [θ; x]` with trivial
//! dynamics `θ⁺ = θ`. A DDP-style backward pass over the augmented problem
//! gives feedback gains `K̄ = −Q̄̂_uu⁻¹ Q̄̂_uy`, and a linear forward pass from
//! `dy₀/dθ = [I; 0]` propagates the sensitivities. Interior-point multipliers
//! are eliminated in closed form: `λ = −μ/g`, `ν = h/μ`.

use thiserror::Error;

use crate::ddp::{hat_q, q_expansion, value_update, HatQ, StageJac};
use crate::linalg::{solve_regularized, symmetrize, LinalgError, Mat, Tensor3, Vector};
use crate::problem::{
    Dims, FnDerivs, FnTangents, Layout, OcProblem, ProblemError, StageDerivatives, StageTangents,
    TerminalDerivatives, Trajectory, Unconstrained, Var, Wrt,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GradientError {
    #[error("Q̄̂_uu is singular at stage {stage}")]
    Singular { stage: usize },
    #[error("active constraint Jacobian w.r.t. u is rank deficient at stage {stage}")]
    RankDeficient { stage: usize },
    #[error("inequality not strictly satisfied at stage {stage}; the barrier gradient needs an interior trajectory")]
    NotInterior { stage: usize },
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error(transparent)]
    Problem(#[from] ProblemError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// Sensitivities of an optimal trajectory with respect to θ.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryGradient {
    /// `dx_k/dθ`, `k = 0..=N`, each `n_x × n_θ`.
    pub dx: Vec<Mat>,
    /// `du_k/dθ`, `k = 0..N`, each `n_u × n_θ`.
    pub du: Vec<Mat>,
}

impl TrajectoryGradient {
    /// `d[u_0; …; u_{N-1}]/dθ`
    pub fn du_stacked(&self) -> Mat {
        stack_rows(&self.du)
    }
    /// `d[x_0; …; x_N]/dθ`
    pub fn dx_stacked(&self) -> Mat {
        stack_rows(&self.dx)
    }
    /// Largest absolute entry difference over all blocks.
    pub fn max_abs_diff(&self, other: &TrajectoryGradient) -> f64 {
        (self.du_stacked() - other.du_stacked()).amax().max((self.dx_stacked() - other.dx_stacked()).amax())
    }
}

pub(crate) fn stack_rows(blocks: &[Mat]) -> Mat {
    let rows: usize = blocks.iter().map(|b| b.nrows()).sum();
    let cols = blocks.first().map(|b| b.ncols()).unwrap_or(0);
    let mut out = Mat::zeros(rows, cols);
    let mut r = 0;
    for b in blocks {
        out.view_mut((r, 0), (b.nrows(), cols)).copy_from(b);
        r += b.nrows();
    }
    out
}

// ---------------------------------------------------------------------------
// Augmented problem

/// The problem in the augmented state `y = [θ; x]`, with no parameters of its
/// own. Derivatives are those of the original problem re-indexed from
/// `[x; u; θ]` to `[θ; x; u]`, plus identity dynamics for θ.
pub struct AugmentedProblem<'a> {
    pub inner: &'a dyn OcProblem,
    pub n_theta: usize,
}

impl<'a> AugmentedProblem<'a> {
    pub fn new(inner: &'a dyn OcProblem) -> Self {
        AugmentedProblem { inner, n_theta: inner.dims().n_theta }
    }

    fn split(&self, y: &Vector) -> (Vector, Vector) {
        let th = y.rows(0, self.n_theta).into_owned();
        let x = y.rows(self.n_theta, y.len() - self.n_theta).into_owned();
        (th, x)
    }

    /// Index in the original `[x; u; θ]` of each coordinate of `[θ; x; u]`.
    fn perm(&self, n_u: usize) -> Vec<usize> {
        let d = self.inner.dims();
        let mut p = Vec::with_capacity(self.n_theta + d.n_x + n_u);
        p.extend((0..self.n_theta).map(|i| d.n_x + n_u + i));
        p.extend(0..d.n_x);
        p.extend((0..n_u).map(|i| d.n_x + i));
        p
    }

    pub fn augment_state(&self, theta: &Vector, x: &Vector) -> Vector {
        let mut y = Vector::zeros(self.n_theta + x.len());
        y.rows_mut(0, self.n_theta).copy_from(theta);
        y.rows_mut(self.n_theta, x.len()).copy_from(x);
        y
    }

    pub fn augment_trajectory(&self, traj: &Trajectory, theta: &Vector) -> Trajectory {
        Trajectory {
            states: traj.states.iter().map(|x| self.augment_state(theta, x)).collect(),
            controls: traj.controls.clone(),
            duals_in: traj.duals_in.clone(),
            duals_eq: traj.duals_eq.clone(),
        }
    }
}

fn permute_fn(f: &FnDerivs, perm: &[usize]) -> FnDerivs {
    let n = perm.len();
    let jac = Mat::from_fn(f.m(), n, |i, a| f.jac[(i, perm[a])]);
    let slices = (0..f.m())
        .map(|i| {
            let s = f.hess.slice(i);
            Mat::from_fn(n, n, |a, b| s[(perm[a], perm[b])])
        })
        .collect();
    FnDerivs { value: f.value.clone(), jac, hess: Tensor3::from_slices(slices, n, n) }
}

fn permute_tangents(t: &FnTangents, perm: &[usize]) -> FnTangents {
    let n = perm.len();
    FnTangents {
        dvalue: t.dvalue.clone(),
        djac: t.djac.iter().map(|j| Mat::from_fn(j.nrows(), n, |i, a| j[(i, perm[a])])).collect(),
        dhess: t
            .dhess
            .iter()
            .map(|h| {
                let (m, _, _) = h.dims();
                Tensor3::from_slices(
                    (0..m)
                        .map(|i| {
                            let s = h.slice(i);
                            Mat::from_fn(n, n, |a, b| s[(perm[a], perm[b])])
                        })
                        .collect(),
                    n,
                    n,
                )
            })
            .collect(),
    }
}

/// Prepends the identity rows of `θ⁺ = θ` to permuted dynamics derivatives.
fn augment_dynamics(f: &FnDerivs, n_theta: usize) -> FnDerivs {
    let n = f.jac.ncols();
    let m = f.m();
    let mut value = Vector::zeros(n_theta + m);
    value.rows_mut(n_theta, m).copy_from(&f.value);
    let mut jac = Mat::zeros(n_theta + m, n);
    for i in 0..n_theta {
        jac[(i, i)] = 1.0;
    }
    jac.view_mut((n_theta, 0), (m, n)).copy_from(&f.jac);
    let mut slices = vec![Mat::zeros(n, n); n_theta];
    slices.extend((0..m).map(|i| f.hess.slice(i).clone()));
    FnDerivs { value, jac, hess: Tensor3::from_slices(slices, n, n) }
}

fn augment_dynamics_tangents(t: &FnTangents, n_theta: usize) -> FnTangents {
    let nd = t.dvalue.ncols();
    let m = t.dvalue.nrows();
    let mut dvalue = Mat::zeros(n_theta + m, nd);
    dvalue.view_mut((n_theta, 0), (m, nd)).copy_from(&t.dvalue);
    let djac = t
        .djac
        .iter()
        .map(|j| {
            let mut out = Mat::zeros(n_theta + m, j.ncols());
            out.view_mut((n_theta, 0), (m, j.ncols())).copy_from(j);
            out
        })
        .collect();
    let dhess = t
        .dhess
        .iter()
        .map(|h| {
            let (_, n, _) = h.dims();
            let mut slices = vec![Mat::zeros(n, n); n_theta];
            slices.extend((0..m).map(|i| h.slice(i).clone()));
            Tensor3::from_slices(slices, n, n)
        })
        .collect();
    FnTangents { dvalue, djac, dhess }
}

impl OcProblem for AugmentedProblem<'_> {
    fn dims(&self) -> Dims {
        let d = self.inner.dims();
        Dims { n_x: d.n_x + self.n_theta, n_theta: 0, ..d }
    }
    fn name(&self) -> &str {
        self.inner.name()
    }
    fn stage_cost(&self, k: usize, y: &Vector, u: &Vector, _t: &Vector) -> f64 {
        let (th, x) = self.split(y);
        self.inner.stage_cost(k, &x, u, &th)
    }
    fn terminal_cost(&self, y: &Vector, _t: &Vector) -> f64 {
        let (th, x) = self.split(y);
        self.inner.terminal_cost(&x, &th)
    }
    fn dynamics(&self, k: usize, y: &Vector, u: &Vector, _t: &Vector) -> Vector {
        let (th, x) = self.split(y);
        self.augment_state(&th, &self.inner.dynamics(k, &x, u, &th))
    }
    fn inequality(&self, k: usize, y: &Vector, u: &Vector, _t: &Vector) -> Vector {
        let (th, x) = self.split(y);
        self.inner.inequality(k, &x, u, &th)
    }
    fn equality(&self, k: usize, y: &Vector, u: &Vector, _t: &Vector) -> Vector {
        let (th, x) = self.split(y);
        self.inner.equality(k, &x, u, &th)
    }
    fn stage_derivatives(
        &self,
        k: usize,
        y: &Vector,
        u: &Vector,
        _t: &Vector,
        _wrt: Wrt,
    ) -> Result<StageDerivatives, ProblemError> {
        let (th, x) = self.split(y);
        let d = self.inner.stage_derivatives(k, &x, u, &th, Wrt::All)?;
        let perm = self.perm(u.len());
        Ok(StageDerivatives {
            layout: Layout { n_x: self.n_theta + x.len(), n_u: u.len(), n_theta: 0 },
            cost: permute_fn(&d.cost, &perm),
            dynamics: augment_dynamics(&permute_fn(&d.dynamics, &perm), self.n_theta),
            ineq: permute_fn(&d.ineq, &perm),
            eq: permute_fn(&d.eq, &perm),
        })
    }
    fn terminal_derivatives(&self, y: &Vector, _t: &Vector, _wrt: Wrt) -> Result<TerminalDerivatives, ProblemError> {
        let (th, x) = self.split(y);
        let d = self.inner.terminal_derivatives(&x, &th, Wrt::All)?;
        let perm = self.perm(0);
        Ok(TerminalDerivatives {
            layout: Layout { n_x: self.n_theta + x.len(), n_u: 0, n_theta: 0 },
            cost: permute_fn(&d.cost, &perm),
        })
    }
    fn stage_tangents(
        &self,
        k: usize,
        y: &Vector,
        u: &Vector,
        _t: &Vector,
        dirs: &Mat,
    ) -> Result<StageTangents, ProblemError> {
        let (th, x) = self.split(y);
        let perm = self.perm(u.len());
        // Re-index the tangents from [θ; x; u] to [x; u; θ].
        let mut inner_dirs = Mat::zeros(dirs.nrows(), dirs.ncols());
        for (a, pa) in perm.iter().enumerate() {
            inner_dirs.row_mut(*pa).copy_from(&dirs.row(a));
        }
        let t = self.inner.stage_tangents(k, &x, u, &th, &inner_dirs)?;
        Ok(StageTangents {
            cost: permute_tangents(&t.cost, &perm),
            dynamics: augment_dynamics_tangents(&permute_tangents(&t.dynamics, &perm), self.n_theta),
            ineq: permute_tangents(&t.ineq, &perm),
            eq: permute_tangents(&t.eq, &perm),
        })
    }
    fn terminal_tangents(&self, y: &Vector, _t: &Vector, dirs: &Mat) -> Result<FnTangents, ProblemError> {
        let (th, x) = self.split(y);
        let perm = self.perm(0);
        let mut inner_dirs = Mat::zeros(dirs.nrows(), dirs.ncols());
        for (a, pa) in perm.iter().enumerate() {
            inner_dirs.row_mut(*pa).copy_from(&dirs.row(a));
        }
        let t = self.inner.terminal_tangents(&x, &th, &inner_dirs)?;
        Ok(permute_tangents(&t, &perm))
    }
}

/// Augmented problem plus the augmented trajectory `y_k = [θ; x_k]`.
pub fn build_augmented<'a>(p: &'a dyn OcProblem, traj: &Trajectory, theta: &Vector) -> (AugmentedProblem<'a>, Trajectory) {
    let aug = AugmentedProblem::new(p);
    let t = aug.augment_trajectory(traj, theta);
    (aug, t)
}

// ---------------------------------------------------------------------------
// Interior-point gradient

/// One stage of the augmented backward pass.
#[derive(Debug, Clone)]
pub struct AugStage {
    pub derivs: StageDerivatives,
    pub lam: Vector,
    pub nu: Vector,
    pub hq: HatQ,
    /// `k̄ = −Q̄̂_uu⁻¹ Q̄̂_u` (zero when the trajectory is held fixed).
    pub kff: Vector,
    /// `K̄ = −Q̄̂_uu⁻¹ Q̄̂_uy`
    pub kfb: Mat,
}

#[derive(Debug, Clone)]
pub struct AugBackward {
    pub stages: Vec<AugStage>,
    pub terminal: TerminalDerivatives,
    /// `V̄_y` at stages `0..=N`.
    pub vy: Vec<Vector>,
    pub vyy: Vec<Mat>,
    pub n_theta: usize,
}

impl AugBackward {
    /// State-feedback part `K_k` of the gains.
    pub fn state_gains(&self) -> Vec<Mat> {
        self.stages.iter().map(|s| s.kfb.columns(self.n_theta, s.kfb.ncols() - self.n_theta).into_owned()).collect()
    }
}

/// Closed-form interior-point multipliers `λ = −μ/g`, `ν = h/μ`.
pub fn eliminated_duals(d: &StageDerivatives, mu: f64) -> (Vector, Vector) {
    (d.ineq.value.map(|g| -mu / g), &d.eq.value / mu)
}

/// Augmented backward pass with eliminated multipliers.
///
/// With `hold_trajectory` the feedforward `k̄` is forced to zero so that the
/// value recursion describes the given trajectory rather than a Newton step
/// away from it.
pub fn gradient_backward(
    aug: &AugmentedProblem<'_>,
    aug_traj: &Trajectory,
    mu: f64,
    hold_trajectory: bool,
) -> Result<AugBackward, GradientError> {
    if !(mu > 0.0) {
        return Err(GradientError::Invalid(format!("barrier parameter must be positive, got {mu}")));
    }
    let n = aug_traj.horizon();
    let empty = Vector::zeros(0);
    let term = aug.terminal_derivatives(&aug_traj.states[n], &empty, Wrt::StateControl)?;
    let tl = term.layout;
    let mut vy = vec![Vector::zeros(0); n + 1];
    let mut vyy = vec![Mat::zeros(0, 0); n + 1];
    vy[n] = term.cost.grad(&tl, Var::X);
    vyy[n] = term.cost.hess1(&tl, Var::X, Var::X);
    let mut stages = Vec::with_capacity(n);
    for k in (0..n).rev() {
        let d = aug.stage_derivatives(k, &aug_traj.states[k], &aug_traj.controls[k], &empty, Wrt::StateControl)?;
        if d.ineq.value.iter().any(|g| !(*g < 0.0)) {
            return Err(GradientError::NotInterior { stage: k });
        }
        let (lam, nu) = eliminated_duals(&d, mu);
        let q = q_expansion(&d, &vy[k + 1], &vyy[k + 1], &lam, &nu);
        let hq = hat_q(&q, &d, &lam, &nu, mu);
        let sol = solve_regularized(&hq.q_uu, &hstack_vec(&hq.q_u, &hq.q_ux), 0.0)
            .map_err(|_| GradientError::Singular { stage: k })?;
        let kff = if hold_trajectory { Vector::zeros(hq.q_u.len()) } else { -sol.column(0).into_owned() };
        let kfb = -sol.columns(1, hq.q_ux.ncols()).into_owned();
        let (v1, v2) = value_update(&hq, &kff, &kfb);
        vy[k] = v1;
        vyy[k] = v2;
        stages.push(AugStage { derivs: d, lam, nu, hq, kff, kfb });
    }
    stages.reverse();
    Ok(AugBackward { stages, terminal: term, vy, vyy, n_theta: aug.n_theta })
}

pub(crate) fn hstack_vec(v: &Vector, m: &Mat) -> Mat {
    let mut out = Mat::zeros(m.nrows(), m.ncols() + 1);
    out.set_column(0, v);
    out.view_mut((0, 1), (m.nrows(), m.ncols())).copy_from(m);
    out
}

/// Linear forward pass `du = K̄ dy`, `dy⁺ = f̄_y dy + f̄_u du` from `dy₀ = [I; 0]`.
pub fn gradient_forward(bw: &AugBackward, n_x: usize) -> TrajectoryGradient {
    let nt = bw.n_theta;
    let mut dy = Mat::zeros(nt + n_x, nt);
    for i in 0..nt {
        dy[(i, i)] = 1.0;
    }
    let mut dx = Vec::with_capacity(bw.stages.len() + 1);
    let mut du = Vec::with_capacity(bw.stages.len());
    for s in &bw.stages {
        dx.push(dy.rows(nt, n_x).into_owned());
        let j = StageJac::of(&s.derivs);
        let dut = &s.kfb * &dy;
        dy = &j.f_x * &dy + &j.f_u * &dut;
        debug_assert!((dy.rows(0, nt) - Mat::identity(nt, nt)).amax() == 0.0);
        du.push(dut);
    }
    dx.push(dy.rows(nt, n_x).into_owned());
    TrajectoryGradient { dx, du }
}

/// Interior-point gradient at barrier parameter `μ`.
pub fn gradient_ip(p: &dyn OcProblem, traj: &Trajectory, theta: &Vector, mu: f64) -> Result<TrajectoryGradient, GradientError> {
    check_shapes(p, traj, theta)?;
    let (aug, at) = build_augmented(p, traj, theta);
    let bw = gradient_backward(&aug, &at, mu, false)?;
    Ok(gradient_forward(&bw, p.dims().n_x))
}

/// Gradient of an unconstrained optimum; constraints of `p` are ignored.
pub fn gradient_unconstrained(p: &dyn OcProblem, traj: &Trajectory, theta: &Vector) -> Result<TrajectoryGradient, GradientError> {
    gradient_ip(&Unconstrained(p), traj, theta, 1.0)
}

/// Gradient of the barrier reformulation: constraints moved into the cost as
/// `−μ Σ log(−g) + ‖h‖²/(2μ)`.
pub fn gradient_barrier(p: &dyn OcProblem, traj: &Trajectory, theta: &Vector, mu: f64) -> Result<TrajectoryGradient, GradientError> {
    let n = traj.horizon();
    for k in 0..n {
        if p.inequality(k, &traj.states[k], &traj.controls[k], theta).iter().any(|g| !(*g < 0.0)) {
            return Err(GradientError::NotInterior { stage: k });
        }
    }
    gradient_unconstrained(&BarrierProblem { inner: p, mu }, traj, theta)
}

fn check_shapes(p: &dyn OcProblem, traj: &Trajectory, theta: &Vector) -> Result<(), GradientError> {
    let d = p.dims();
    if theta.len() != d.n_theta {
        return Err(GradientError::Invalid(format!("θ has length {}, expected {}", theta.len(), d.n_theta)));
    }
    if traj.horizon() != d.horizon || traj.states.len() != d.horizon + 1 {
        return Err(GradientError::Invalid(format!("trajectory horizon {} != {}", traj.horizon(), d.horizon)));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Barrier reformulation

/// `c̃ = c − μ Σ log(−g_i) + ‖h‖²/(2μ)` with no explicit constraints.
pub struct BarrierProblem<'a> {
    pub inner: &'a dyn OcProblem,
    pub mu: f64,
}

impl OcProblem for BarrierProblem<'_> {
    fn dims(&self) -> Dims {
        Dims { n_in: 0, n_eq: 0, ..self.inner.dims() }
    }
    fn name(&self) -> &str {
        self.inner.name()
    }
    fn stage_cost(&self, k: usize, x: &Vector, u: &Vector, theta: &Vector) -> f64 {
        let g = self.inner.inequality(k, x, u, theta);
        let h = self.inner.equality(k, x, u, theta);
        self.inner.stage_cost(k, x, u, theta) - self.mu * g.iter().map(|gi| (-gi).ln()).sum::<f64>()
            + h.norm_squared() / (2.0 * self.mu)
    }
    fn terminal_cost(&self, x: &Vector, theta: &Vector) -> f64 {
        self.inner.terminal_cost(x, theta)
    }
    fn dynamics(&self, k: usize, x: &Vector, u: &Vector, theta: &Vector) -> Vector {
        self.inner.dynamics(k, x, u, theta)
    }
    fn inequality(&self, _k: usize, _x: &Vector, _u: &Vector, _theta: &Vector) -> Vector {
        Vector::zeros(0)
    }
    fn equality(&self, _k: usize, _x: &Vector, _u: &Vector, _theta: &Vector) -> Vector {
        Vector::zeros(0)
    }
    fn stage_derivatives(
        &self,
        k: usize,
        x: &Vector,
        u: &Vector,
        theta: &Vector,
        wrt: Wrt,
    ) -> Result<StageDerivatives, ProblemError> {
        let d = self.inner.stage_derivatives(k, x, u, theta, wrt)?;
        let nz = d.layout.nz();
        let mu = self.mu;
        let mut cost = d.cost.clone();
        let mut grad = cost.jac.row(0).transpose();
        let mut hess = cost.hess.slice(0).clone();
        for i in 0..d.ineq.m() {
            let g = d.ineq.value[i];
            let gz = d.ineq.jac.row(i).transpose();
            cost.value[0] -= mu * (-g).ln();
            grad -= &gz * (mu / g);
            hess += (&gz * gz.transpose()) * (mu / (g * g)) - d.ineq.hess.slice(i) * (mu / g);
        }
        for i in 0..d.eq.m() {
            let h = d.eq.value[i];
            let hz = d.eq.jac.row(i).transpose();
            cost.value[0] += h * h / (2.0 * mu);
            grad += &hz * (h / mu);
            hess += (&hz * hz.transpose()) / mu + d.eq.hess.slice(i) * (h / mu);
        }
        symmetrize(&mut hess);
        cost.jac = Mat::from_row_slice(1, nz, grad.as_slice());
        cost.hess = Tensor3::from_slices(vec![hess], nz, nz);
        Ok(StageDerivatives {
            layout: d.layout,
            cost,
            dynamics: d.dynamics,
            ineq: FnDerivs::zeros(0, nz),
            eq: FnDerivs::zeros(0, nz),
        })
    }
    fn terminal_derivatives(&self, x: &Vector, theta: &Vector, wrt: Wrt) -> Result<TerminalDerivatives, ProblemError> {
        self.inner.terminal_derivatives(x, theta, wrt)
    }
}

// ---------------------------------------------------------------------------
// Active-set gradient

/// Indices of the active inequalities at each stage.
pub type ActiveSet = Vec<Vec<usize>>;

/// Inequalities with `g_i ≥ −tol`.
pub fn detect_active_set(p: &dyn OcProblem, traj: &Trajectory, theta: &Vector, tol: f64) -> ActiveSet {
    (0..traj.horizon())
        .map(|k| {
            let g = p.inequality(k, &traj.states[k], &traj.controls[k], theta);
            (0..g.len()).filter(|i| g[*i] >= -tol).collect()
        })
        .collect()
}

/// Rows `rows` of a function's derivatives stacked over another's.
pub(crate) fn stack_constraints(g: &FnDerivs, rows: &[usize], h: &FnDerivs) -> FnDerivs {
    let nz = g.jac.ncols();
    let m = rows.len() + h.m();
    let mut value = Vector::zeros(m);
    let mut jac = Mat::zeros(m, nz);
    let mut slices = Vec::with_capacity(m);
    for (r, i) in rows.iter().enumerate() {
        value[r] = g.value[*i];
        jac.row_mut(r).copy_from(&g.jac.row(*i));
        slices.push(g.hess.slice(*i).clone());
    }
    for i in 0..h.m() {
        value[rows.len() + i] = h.value[i];
        jac.row_mut(rows.len() + i).copy_from(&h.jac.row(i));
        slices.push(h.hess.slice(i).clone());
    }
    FnDerivs { value, jac, hess: Tensor3::from_slices(slices, nz, nz) }
}

/// Slack threshold used by [`gradient_activeset`] to read the active set off
/// a trajectory. Interior-point solutions at `μ = 1e-8` with strictly
/// complementary multipliers have active slacks far below it.
pub const ACTIVE_DETECT_TOL: f64 = 1e-4;

/// Active-set gradient with the active set read off the trajectory.
pub fn gradient_activeset(p: &dyn OcProblem, traj: &Trajectory, theta: &Vector) -> Result<TrajectoryGradient, GradientError> {
    let active = detect_active_set(p, traj, theta, ACTIVE_DETECT_TOL);
    gradient_activeset_with(p, traj, theta, &active)
}

/// Gradient of an optimum whose active inequalities (together with all
/// equalities) are treated as equality constraints.
///
/// The stage multipliers are recovered from first-order stationarity and
/// their curvature is included in the Lagrangian blocks, which reduces to
/// plain `Q◇` blocks for affine constraints.
pub fn gradient_activeset_with(
    p: &dyn OcProblem,
    traj: &Trajectory,
    theta: &Vector,
    active: &ActiveSet,
) -> Result<TrajectoryGradient, GradientError> {
    check_shapes(p, traj, theta)?;
    let n = traj.horizon();
    if active.len() != n {
        return Err(GradientError::Invalid(format!("active set covers {} stages, expected {n}", active.len())));
    }
    let (aug, at) = build_augmented(p, traj, theta);
    let empty = Vector::zeros(0);
    let term = aug.terminal_derivatives(&at.states[n], &empty, Wrt::StateControl)?;
    let tl = term.layout;
    let mut vy = term.cost.grad(&tl, Var::X);
    let mut vyy = term.cost.hess1(&tl, Var::X, Var::X);
    let mut stages = Vec::with_capacity(n);
    for k in (0..n).rev() {
        let d = aug.stage_derivatives(k, &at.states[k], &at.controls[k], &empty, Wrt::StateControl)?;
        let l = d.layout;
        let hd = stack_constraints(&d.ineq, &active[k], &d.eq);
        let no_mult = Vector::zeros(0);
        let plain = StageDerivatives {
            layout: l,
            cost: d.cost.clone(),
            dynamics: d.dynamics.clone(),
            ineq: FnDerivs::zeros(0, l.nz()),
            eq: FnDerivs::zeros(0, l.nz()),
        };
        let q = q_expansion(&plain, &vy, &vyy, &no_mult, &no_mult);
        let (kfb, lq) = if hd.m() == 0 {
            let kfb = -solve_regularized(&q.q_uu, &q.q_ux, 0.0).map_err(|_| GradientError::Singular { stage: k })?;
            (kfb, q)
        } else {
            let h_u = hd.d(&l, Var::U);
            let h_y = hd.d(&l, Var::X);
            let (rank, _) = crate::linalg::numerical_rank(&h_u, 1e-10);
            if rank < hd.m() {
                return Err(GradientError::RankDeficient { stage: k });
            }
            // ν from Q_u + h_uᵀν = 0 (least squares, exact at an optimum).
            let nu = -crate::linalg::solve_vec(&(&h_u * h_u.transpose()), &(&h_u * &q.q_u), 0.0)
                .map_err(|_| GradientError::RankDeficient { stage: k })?;
            let curv = hd.hess.contract(&nu);
            let (ox, nx) = l.range(Var::X);
            let (ou, nu_) = l.range(Var::U);
            let mut lq = q.clone();
            lq.q_x += h_y.tr_mul(&nu);
            lq.q_u += h_u.tr_mul(&nu);
            lq.q_xx += curv.view((ox, ox), (nx, nx));
            lq.q_ux += curv.view((ou, ox), (nu_, nx));
            lq.q_uu += curv.view((ou, ou), (nu_, nu_));
            // du = −[Q⁻¹(I − h_uᵀA), Aᵀ] [Q_uy; h_y] dy, A = (h_u Q⁻¹ h_uᵀ)⁻¹ h_u Q⁻¹
            let qinv_hut = solve_regularized(&lq.q_uu, &h_u.transpose(), 0.0).map_err(|_| GradientError::Singular { stage: k })?;
            let s = &h_u * &qinv_hut;
            let a = solve_regularized(&s, &qinv_hut.transpose(), 0.0).map_err(|_| GradientError::RankDeficient { stage: k })?;
            let m = lq.q_uu.nrows();
            let proj = Mat::identity(m, m) - h_u.transpose() * &a;
            let qinv_proj = solve_regularized(&lq.q_uu, &proj, 0.0).map_err(|_| GradientError::Singular { stage: k })?;
            let kfb = -(qinv_proj * &lq.q_ux + a.transpose() * h_y);
            (kfb, lq)
        };
        let mut v2 = &lq.q_xx + kfb.tr_mul(&lq.q_ux) + lq.q_ux.tr_mul(&kfb) + kfb.tr_mul(&(&lq.q_uu * &kfb));
        symmetrize(&mut v2);
        vy = &lq.q_x + kfb.tr_mul(&lq.q_u);
        vyy = v2;
        stages.push(AugStage {
            hq: HatQ {
                q_x: lq.q_x.clone(),
                q_u: lq.q_u.clone(),
                q_xx: lq.q_xx.clone(),
                q_ux: lq.q_ux.clone(),
                q_uu: lq.q_uu.clone(),
                r_in: Vector::zeros(0),
                r_eq: Vector::zeros(0),
            },
            derivs: d,
            lam: Vector::zeros(0),
            nu: Vector::zeros(0),
            kff: Vector::zeros(lq.q_u.len()),
            kfb,
        });
    }
    stages.reverse();
    let bw = AugBackward { stages, terminal: term, vy: Vec::new(), vyy: Vec::new(), n_theta: aug.n_theta };
    Ok(gradient_forward(&bw, p.dims().n_x))
}

/// Feedback gains `K_k = −Q̂_uu⁻¹ Q̂_ux` of the optimal policy, computed with
/// eliminated multipliers at barrier parameter `μ`.
pub fn policy_gains(p: &dyn OcProblem, traj: &Trajectory, theta: &Vector, mu: f64) -> Result<Vec<Mat>, GradientError> {
    let (aug, at) = build_augmented(p, traj, theta);
    Ok(gradient_backward(&aug, &at, mu, false)?.state_gains())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::benchmarks::{make_system, Overrides};
    use crate::ddp::{solve_ipddp, solve_ipddp_from, SolverConfig};
    use crate::oracles::scalar_example;
    use crate::pdp::pdp_oracle_gradient;
    use crate::problem::fd_derivatives_at;
    use crate::toys;
    use proptest::prelude::*;

    fn solved(name: &str, constrained: bool) -> (crate::benchmarks::System, crate::ddp::SolveResult) {
        let s = make_system(name, &Overrides { constrained: Some(constrained), ..Default::default() }).unwrap();
        let r = solve_ipddp(s.problem.as_ref(), &s.spec.theta_star(), &s.spec.x0(), &SolverConfig::default()).unwrap();
        (s, r)
    }

    #[test]
    fn scalar_example_sensitivity() {
        let (s, r) = solved("scalar_example", false);
        let g = gradient_unconstrained(s.problem.as_ref(), &r.traj, &s.spec.theta_star()).unwrap();
        let cf = scalar_example(1.0, 1.0);
        assert!((g.du[0][(0, 0)] + 0.16).abs() < 1e-12);
        assert!((g.du[1][(0, 0)] - cf.du1).abs() < 1e-12);
        assert!((g.dx[1][(0, 0)] - cf.du0).abs() < 1e-12);
    }

    #[test]
    fn theta_free_problem_has_zero_gradient() {
        let p = toys::theta_free();
        let th = Vector::from_element(1, 3.0);
        let r = solve_ipddp(&p, &th, &Vector::from_element(1, 1.0), &SolverConfig::default()).unwrap();
        let g = gradient_unconstrained(&p, &r.traj, &th).unwrap();
        assert_eq!(g.du_stacked().amax(), 0.0);
        assert_eq!(g.dx_stacked().amax(), 0.0);
    }

    #[test]
    fn initial_state_sensitivity_is_exactly_zero() {
        let (s, r) = solved("cartpole", true);
        let g = gradient_ip(s.problem.as_ref(), &r.traj, &s.spec.theta_star(), r.mu).unwrap();
        assert_eq!(g.dx[0].amax(), 0.0);
        assert_eq!(g.dx.len(), r.traj.states.len());
        assert_eq!(g.du.len(), r.traj.controls.len());
    }

    #[test]
    fn barrier_and_interior_point_agree_on_cartpole() {
        let (s, r) = solved("cartpole", true);
        let p = s.problem.as_ref();
        let th = s.spec.theta_star();
        let a = gradient_ip(p, &r.traj, &th, r.mu).unwrap();
        let b = gradient_barrier(p, &r.traj, &th, r.mu).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-6, "{}", a.max_abs_diff(&b));
    }

    #[test]
    fn unconstrained_matches_dense_oracle() {
        for name in ["cartpole", "arm2link"] {
            let (s, r) = solved(name, false);
            let p = s.problem.as_ref();
            let th = s.spec.theta_star();
            let a = gradient_unconstrained(p, &r.traj, &th).unwrap();
            let b = pdp_oracle_gradient(&Unconstrained(p), &r.traj, &th, 1.0).unwrap();
            assert!(a.max_abs_diff(&b) < 1e-8, "{name}: {}", a.max_abs_diff(&b));
        }
    }

    #[test]
    fn equality_sensitivity_is_tangent_to_constraint() {
        // h = u₁ − u₂ does not depend on θ, so h_u du/dθ = 0 at every stage.
        let p = toys::eq_toy();
        let th = Vector::from_element(1, 2.0);
        let r = solve_ipddp(&p, &th, &Vector::from_element(1, 1.0), &SolverConfig::default()).unwrap();
        let a = gradient_activeset(&p, &r.traj, &th).unwrap();
        for du in &a.du {
            assert!((du[(0, 0)] - du[(1, 0)]).abs() < 1e-12);
        }
        let b = gradient_ip(&p, &r.traj, &th, r.mu).unwrap();
        for du in &b.du {
            assert!((du[(0, 0)] - du[(1, 0)]).abs() < 1e-6);
        }
        assert!(a.du[0].amax() > 1e-3);
    }

    #[test]
    fn empty_active_set_reduces_to_unconstrained() {
        let (s, r) = solved("cartpole", false);
        let p = s.problem.as_ref();
        let th = s.spec.theta_star();
        let empty: ActiveSet = vec![Vec::new(); r.traj.horizon()];
        let a = gradient_activeset_with(p, &r.traj, &th, &empty).unwrap();
        let b = gradient_unconstrained(p, &r.traj, &th).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn active_set_gradient_rejects_wrong_length() {
        let (s, r) = solved("cartpole", true);
        let err = gradient_activeset_with(s.problem.as_ref(), &r.traj, &s.spec.theta_star(), &vec![]).unwrap_err();
        assert!(matches!(err, GradientError::Invalid(_)));
    }

    #[test]
    fn augmented_partials_match_differences() {
        let s = make_system("cartpole", &Overrides::default()).unwrap();
        let p = s.problem.as_ref();
        let th = s.spec.theta_star();
        let aug = AugmentedProblem::new(p);
        let x = Vector::from_vec(vec![0.1, -0.2, 0.3, 0.05]);
        let u = Vector::from_element(1, 0.4);
        let y = aug.augment_state(&th, &x);
        let empty = Vector::zeros(0);
        let an = aug.stage_derivatives(3, &y, &u, &empty, Wrt::StateControl).unwrap();
        let fd = fd_derivatives_at(&aug, 3, &y, &u, &empty, Wrt::StateControl, 1e-5);
        for (a, b) in [(&an.cost, &fd.cost), (&an.dynamics, &fd.dynamics), (&an.ineq, &fd.ineq)] {
            assert!((&a.jac - &b.jac).amax() < 1e-4);
            for i in 0..a.m() {
                assert!((a.hess.slice(i) - b.hess.slice(i)).amax() < 1e-4);
            }
        }
        // θ rows of the augmented dynamics are the identity.
        let nt = th.len();
        let fy = an.dynamics.d(&an.layout, Var::X);
        assert_eq!(fy.view((0, 0), (nt, nt)).into_owned(), Mat::identity(nt, nt));
        assert_eq!(fy.view((0, nt), (nt, x.len())).amax(), 0.0);
    }

    #[test]
    fn barrier_requires_interior_trajectory() {
        let (s, mut r) = solved("cartpole", true);
        let th = s.spec.theta_star();
        r.traj.controls[0][0] = 100.0;
        let err = gradient_barrier(s.problem.as_ref(), &r.traj, &th, 1e-3).unwrap_err();
        assert!(matches!(err, GradientError::NotInterior { stage: 0 }));
    }

    #[test]
    fn nonpositive_barrier_parameter_is_rejected() {
        let (s, r) = solved("cartpole", true);
        let err = gradient_ip(s.problem.as_ref(), &r.traj, &s.spec.theta_star(), 0.0).unwrap_err();
        assert!(matches!(err, GradientError::Invalid(_)));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(8))]

        // Central differences of cold re-solves.
        #[test]
        fn interior_point_gradient_matches_resolve_differences(w in 0.5f64..2.0, b in 0.3f64..0.8, x0 in 0.5f64..1.5) {
            let p = toys::bound_toy();
            let th = Vector::from_vec(vec![w, b]);
            let x = Vector::from_element(1, x0);
            let cfg = SolverConfig { tol: 1e-10, ..Default::default() };
            let r = solve_ipddp_from(&p, &th, &x, &cfg, None).unwrap();
            let g = gradient_ip(&p, &r.traj, &th, r.mu).unwrap().du_stacked();
            let h = 1e-5;
            for i in 0..2 {
                let mut tp = th.clone();
                tp[i] += h;
                let mut tm = th.clone();
                tm[i] -= h;
                let up = solve_ipddp_from(&p, &tp, &x, &cfg, None).unwrap().traj.control_vector();
                let um = solve_ipddp_from(&p, &tm, &x, &cfg, None).unwrap().traj.control_vector();
                let fd = (up - um) / (2.0 * h);
                for j in 0..fd.len() {
                    prop_assert!((fd[j] - g[(j, i)]).abs() < 1e-3f64.max(1e-3 * fd[j].abs()));
                }
            }
        }
    }
}
