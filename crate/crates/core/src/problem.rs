//! Parameterised constrained optimal-control problems.
//!
//! A problem is a horizon `N`, dynamics `x⁺ = f(x, u; θ)`, a stage cost `c`, a
//! terminal cost `c_f`, inequalities `g ≤ 0` and equalities `h = 0` imposed on
//! stages `0..N`. Derivatives are taken over the stacked variable
//! `z = [x; u; θ]`, where the θ part is present only when requested.

use thiserror::Error;

use crate::linalg::{Mat, Tensor3, Vector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Dims {
    pub n_x: usize,
    pub n_u: usize,
    pub n_theta: usize,
    pub n_in: usize,
    pub n_eq: usize,
    pub horizon: usize,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProblemError {
    #[error("non-finite value in {what} at stage {stage}")]
    NonFinite { what: &'static str, stage: usize },
    #[error("derivative oracle does not provide {0}")]
    MissingBlock(&'static str),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
}

/// Which variables derivatives are taken with respect to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Wrt {
    /// `z = [x; u]`
    StateControl,
    /// `z = [x; u; θ]`
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Var {
    X,
    U,
    Theta,
}

/// Offsets of the blocks of `z`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    pub n_x: usize,
    pub n_u: usize,
    /// Zero when θ-derivatives were not requested.
    pub n_theta: usize,
}

impl Layout {
    pub fn nz(&self) -> usize {
        self.n_x + self.n_u + self.n_theta
    }

    pub fn range(&self, v: Var) -> (usize, usize) {
        match v {
            Var::X => (0, self.n_x),
            Var::U => (self.n_x, self.n_u),
            Var::Theta => (self.n_x + self.n_u, self.n_theta),
        }
    }
}

/// Value, Jacobian and Hessian of a vector function `φ: z ↦ ℝᵐ`.
#[derive(Debug, Clone, PartialEq)]
pub struct FnDerivs {
    pub value: Vector,
    /// `m × nz`
    pub jac: Mat,
    /// `m × nz × nz`, slice `i` is the Hessian of `φ_i`.
    pub hess: Tensor3,
}

impl FnDerivs {
    pub fn zeros(m: usize, nz: usize) -> Self {
        FnDerivs { value: Vector::zeros(m), jac: Mat::zeros(m, nz), hess: Tensor3::zeros(m, nz, nz) }
    }

    pub fn m(&self) -> usize {
        self.value.len()
    }

    /// `∂φ/∂a`, an `m × n_a` block.
    pub fn d(&self, l: &Layout, a: Var) -> Mat {
        let (o, n) = l.range(a);
        self.jac.columns(o, n).into_owned()
    }

    /// `∂²φ/∂a∂b` with rows indexed by `a`.
    pub fn dd(&self, l: &Layout, a: Var, b: Var) -> Tensor3 {
        let (oa, na) = l.range(a);
        let (ob, nb) = l.range(b);
        self.hess.block(oa, na, ob, nb)
    }

    /// Gradient block of a scalar function (`m == 1`).
    pub fn grad(&self, l: &Layout, a: Var) -> Vector {
        let (o, n) = l.range(a);
        self.jac.row(0).columns(o, n).transpose()
    }

    /// Hessian block of a scalar function (`m == 1`).
    pub fn hess1(&self, l: &Layout, a: Var, b: Var) -> Mat {
        let (oa, na) = l.range(a);
        let (ob, nb) = l.range(b);
        self.hess.slice(0).view((oa, ob), (na, nb)).into_owned()
    }
}

/// Derivatives of all stage functions at one point.
#[derive(Debug, Clone, PartialEq)]
pub struct StageDerivatives {
    pub layout: Layout,
    pub cost: FnDerivs,
    pub dynamics: FnDerivs,
    pub ineq: FnDerivs,
    pub eq: FnDerivs,
}

/// Derivatives of the terminal cost; the layout has `n_u = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct TerminalDerivatives {
    pub layout: Layout,
    pub cost: FnDerivs,
}

/// Directional derivatives along a set of tangents `T` (`nz × n_dir`).
///
/// For direction `j`: `dvalue[(i, j)] = ∇φ_i·t_j`, `djac[j] = ∂(∇φ)/∂z · t_j`
/// and `dhess[j]` is the third derivative contracted with `t_j`.
#[derive(Debug, Clone, PartialEq)]
pub struct FnTangents {
    pub dvalue: Mat,
    pub djac: Vec<Mat>,
    pub dhess: Vec<Tensor3>,
}

impl FnTangents {
    pub fn zeros(m: usize, nz: usize, n_dir: usize) -> Self {
        FnTangents {
            dvalue: Mat::zeros(m, n_dir),
            djac: vec![Mat::zeros(m, nz); n_dir],
            dhess: vec![Tensor3::zeros(m, nz, nz); n_dir],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageTangents {
    pub cost: FnTangents,
    pub dynamics: FnTangents,
    pub ineq: FnTangents,
    pub eq: FnTangents,
}

/// A parameterised optimal-control problem with a derivative oracle.
pub trait OcProblem: Send + Sync {
    fn dims(&self) -> Dims;
    fn name(&self) -> &str {
        "problem"
    }
    fn stage_cost(&self, k: usize, x: &Vector, u: &Vector, theta: &Vector) -> f64;
    fn terminal_cost(&self, x: &Vector, theta: &Vector) -> f64;
    fn dynamics(&self, k: usize, x: &Vector, u: &Vector, theta: &Vector) -> Vector;
    fn inequality(&self, k: usize, x: &Vector, u: &Vector, theta: &Vector) -> Vector;
    fn equality(&self, k: usize, x: &Vector, u: &Vector, theta: &Vector) -> Vector;

    fn stage_derivatives(
        &self,
        k: usize,
        x: &Vector,
        u: &Vector,
        theta: &Vector,
        wrt: Wrt,
    ) -> Result<StageDerivatives, ProblemError>;

    fn terminal_derivatives(
        &self,
        x: &Vector,
        theta: &Vector,
        wrt: Wrt,
    ) -> Result<TerminalDerivatives, ProblemError>;

    /// Third-order information along tangents over `z = [x; u; θ]`.
    fn stage_tangents(
        &self,
        _k: usize,
        _x: &Vector,
        _u: &Vector,
        _theta: &Vector,
        _dirs: &Mat,
    ) -> Result<StageTangents, ProblemError> {
        Err(ProblemError::MissingBlock("third-order stage derivatives"))
    }

    /// Third-order information of `c_f` along tangents over `z = [x; θ]`.
    fn terminal_tangents(&self, _x: &Vector, _theta: &Vector, _dirs: &Mat) -> Result<FnTangents, ProblemError> {
        Err(ProblemError::MissingBlock("third-order terminal derivatives"))
    }
}

/// A trajectory with its inequality and equality multipliers.
///
/// `states` has `N + 1` entries, the other fields `N`.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Trajectory {
    pub states: Vec<Vector>,
    pub controls: Vec<Vector>,
    pub duals_in: Vec<Vector>,
    pub duals_eq: Vec<Vector>,
}

impl Trajectory {
    pub fn horizon(&self) -> usize {
        self.controls.len()
    }

    /// Flattened controls `[u_0; …; u_{N-1}]`.
    pub fn control_vector(&self) -> Vector {
        let data: Vec<f64> = self.controls.iter().flat_map(|u| u.iter().copied()).collect();
        Vector::from_vec(data)
    }
}

pub fn check_finite(v: &Vector, what: &'static str, stage: usize) -> Result<(), ProblemError> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(ProblemError::NonFinite { what, stage })
    }
}

/// Forward simulation from `x0` under `controls`.
pub fn rollout(p: &dyn OcProblem, theta: &Vector, x0: &Vector, controls: &[Vector]) -> Result<Vec<Vector>, ProblemError> {
    let mut xs = Vec::with_capacity(controls.len() + 1);
    xs.push(x0.clone());
    for (k, u) in controls.iter().enumerate() {
        let next = p.dynamics(k, &xs[k], u, theta);
        check_finite(&next, "dynamics", k)?;
        xs.push(next);
    }
    Ok(xs)
}

/// Total cost `Σ c(x_k, u_k) + c_f(x_N)`.
pub fn evaluate_cost(p: &dyn OcProblem, theta: &Vector, traj: &Trajectory) -> f64 {
    let n = traj.horizon();
    let mut j = 0.0;
    for k in 0..n {
        j += p.stage_cost(k, &traj.states[k], &traj.controls[k], theta);
    }
    j + p.terminal_cost(&traj.states[n], theta)
}

/// Builds a trajectory by rolling out `controls`, with zero multipliers.
pub fn trajectory_from_controls(
    p: &dyn OcProblem,
    theta: &Vector,
    x0: &Vector,
    controls: Vec<Vector>,
) -> Result<Trajectory, ProblemError> {
    let d = p.dims();
    let states = rollout(p, theta, x0, &controls)?;
    let n = controls.len();
    Ok(Trajectory {
        states,
        controls,
        duals_in: vec![Vector::zeros(d.n_in); n],
        duals_eq: vec![Vector::zeros(d.n_eq); n],
    })
}

pub fn derivatives_at(
    p: &dyn OcProblem,
    k: usize,
    x: &Vector,
    u: &Vector,
    theta: &Vector,
    wrt: Wrt,
) -> Result<StageDerivatives, ProblemError> {
    p.stage_derivatives(k, x, u, theta, wrt)
}

fn split_z(z: &Vector, n_x: usize, n_u: usize, theta: &Vector, wrt: Wrt) -> (Vector, Vector, Vector) {
    let x = z.rows(0, n_x).into_owned();
    let u = z.rows(n_x, n_u).into_owned();
    let th = match wrt {
        Wrt::StateControl => theta.clone(),
        Wrt::All => z.rows(n_x + n_u, theta.len()).into_owned(),
    };
    (x, u, th)
}

/// Central finite-difference derivatives, independent of the problem's oracle.
///
/// Jacobians are differenced from function values. Hessians are differenced
/// from the finite-difference Jacobians (a nested central scheme), so nothing
/// analytic enters.
pub fn fd_derivatives_at(
    p: &dyn OcProblem,
    k: usize,
    x: &Vector,
    u: &Vector,
    theta: &Vector,
    wrt: Wrt,
    h: f64,
) -> StageDerivatives {
    let d = p.dims();
    let layout = Layout {
        n_x: d.n_x,
        n_u: d.n_u,
        n_theta: if wrt == Wrt::All { d.n_theta } else { 0 },
    };
    let nz = layout.nz();
    let mut z = Vector::zeros(nz);
    z.rows_mut(0, d.n_x).copy_from(x);
    z.rows_mut(d.n_x, d.n_u).copy_from(u);
    if wrt == Wrt::All {
        z.rows_mut(d.n_x + d.n_u, d.n_theta).copy_from(theta);
    }
    let eval = |z: &Vector| -> Vector {
        let (x, u, th) = split_z(z, d.n_x, d.n_u, theta, wrt);
        let mut out = vec![p.stage_cost(k, &x, &u, &th)];
        out.extend(p.dynamics(k, &x, &u, &th).iter());
        out.extend(p.inequality(k, &x, &u, &th).iter());
        out.extend(p.equality(k, &x, &u, &th).iter());
        Vector::from_vec(out)
    };
    let jac_at = |z: &Vector, h: f64| -> Mat {
        let m = eval(z).len();
        let mut j = Mat::zeros(m, nz);
        for i in 0..nz {
            let mut zp = z.clone();
            let mut zm = z.clone();
            zp[i] += h;
            zm[i] -= h;
            j.set_column(i, &((eval(&zp) - eval(&zm)) / (2.0 * h)));
        }
        j
    };
    let value = eval(&z);
    let m = value.len();
    let jac = jac_at(&z, h);
    // Second differences need a wider step to stay above round-off.
    let h2 = h.sqrt().max(h) * 1e-1;
    let mut hess = Tensor3::zeros(m, nz, nz);
    for j in 0..nz {
        let mut zp = z.clone();
        let mut zm = z.clone();
        zp[j] += h2;
        zm[j] -= h2;
        let dj = (jac_at(&zp, h2) - jac_at(&zm, h2)) / (2.0 * h2);
        for i in 0..m {
            for a in 0..nz {
                hess.slice_mut(i)[(a, j)] = dj[(i, a)];
            }
        }
    }
    for i in 0..m {
        crate::linalg::symmetrize(hess.slice_mut(i));
    }
    let take = |o: usize, n: usize| FnDerivs {
        value: value.rows(o, n).into_owned(),
        jac: jac.rows(o, n).into_owned(),
        hess: Tensor3::from_slices((o..o + n).map(|i| hess.slice(i).clone()).collect(), nz, nz),
    };
    StageDerivatives {
        layout,
        cost: take(0, 1),
        dynamics: take(1, d.n_x),
        ineq: take(1 + d.n_x, d.n_in),
        eq: take(1 + d.n_x + d.n_in, d.n_eq),
    }
}

/// View of a problem with its constraints dropped.
pub struct Unconstrained<'a>(pub &'a dyn OcProblem);

fn strip_stage(mut d: StageDerivatives) -> StageDerivatives {
    let nz = d.layout.nz();
    d.ineq = FnDerivs::zeros(0, nz);
    d.eq = FnDerivs::zeros(0, nz);
    d
}

impl OcProblem for Unconstrained<'_> {
    fn dims(&self) -> Dims {
        Dims { n_in: 0, n_eq: 0, ..self.0.dims() }
    }
    fn name(&self) -> &str {
        self.0.name()
    }
    fn stage_cost(&self, k: usize, x: &Vector, u: &Vector, theta: &Vector) -> f64 {
        self.0.stage_cost(k, x, u, theta)
    }
    fn terminal_cost(&self, x: &Vector, theta: &Vector) -> f64 {
        self.0.terminal_cost(x, theta)
    }
    fn dynamics(&self, k: usize, x: &Vector, u: &Vector, theta: &Vector) -> Vector {
        self.0.dynamics(k, x, u, theta)
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
        self.0.stage_derivatives(k, x, u, theta, wrt).map(strip_stage)
    }
    fn terminal_derivatives(&self, x: &Vector, theta: &Vector, wrt: Wrt) -> Result<TerminalDerivatives, ProblemError> {
        self.0.terminal_derivatives(x, theta, wrt)
    }
    fn stage_tangents(
        &self,
        k: usize,
        x: &Vector,
        u: &Vector,
        theta: &Vector,
        dirs: &Mat,
    ) -> Result<StageTangents, ProblemError> {
        let mut t = self.0.stage_tangents(k, x, u, theta, dirs)?;
        let nz = dirs.nrows();
        t.ineq = FnTangents::zeros(0, nz, dirs.ncols());
        t.eq = FnTangents::zeros(0, nz, dirs.ncols());
        Ok(t)
    }
    fn terminal_tangents(&self, x: &Vector, theta: &Vector, dirs: &Mat) -> Result<FnTangents, ProblemError> {
        self.0.terminal_tangents(x, theta, dirs)
    }
}
