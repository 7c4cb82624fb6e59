//! Pairs a trajectory solver with its matching gradient flavour.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::active_set::solve_active_set;
use crate::ddp::{solve_ipddp_from, SolveResult, SolverConfig, SolverError};
use crate::gradient::{
    gradient_activeset_with, gradient_barrier, gradient_ip, gradient_unconstrained, policy_gains, ActiveSet,
    GradientError, TrajectoryGradient,
};
use crate::linalg::{Mat, Vector};
use crate::pdp::pdp_oracle_gradient;
use crate::problem::{OcProblem, Unconstrained};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum SolverChoice {
    #[default]
    Ipddp,
    ActiveSet,
    /// Constraints are dropped.
    Unconstrained,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GradientFlavor {
    Ip,
    ActiveSet,
    Barrier,
    Unconstrained,
    PdpOracle,
}

impl SolverChoice {
    /// Gradient flavour consistent with the solver's optimality conditions.
    pub fn default_gradient(self) -> GradientFlavor {
        match self {
            SolverChoice::Ipddp => GradientFlavor::Ip,
            SolverChoice::ActiveSet => GradientFlavor::ActiveSet,
            SolverChoice::Unconstrained => GradientFlavor::Unconstrained,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PipelineError {
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Gradient(#[from] GradientError),
}

/// A solved trajectory together with what the gradient solvers need.
#[derive(Debug, Clone)]
pub struct Solved {
    pub result: SolveResult,
    /// Working set at termination (active-set solver only).
    pub active: Option<ActiveSet>,
    pub choice: SolverChoice,
}

impl Solved {
    pub fn controls(&self) -> &[Vector] {
        &self.result.traj.controls
    }
}

/// Solves at `θ`, trying `warm` first and falling back to a cold start.
pub fn solve(
    p: &dyn OcProblem,
    theta: &Vector,
    x0: &Vector,
    choice: SolverChoice,
    cfg: &SolverConfig,
    warm: Option<&[Vector]>,
) -> Result<Solved, SolverError> {
    let attempt = |init: Option<&[Vector]>| -> Result<Solved, SolverError> {
        match choice {
            SolverChoice::Ipddp => {
                Ok(Solved { result: solve_ipddp_from(p, theta, x0, cfg, init)?, active: None, choice })
            }
            SolverChoice::Unconstrained => Ok(Solved {
                result: solve_ipddp_from(&Unconstrained(p), theta, x0, cfg, init)?,
                active: None,
                choice,
            }),
            SolverChoice::ActiveSet => {
                let r = solve_active_set(p, theta, x0, cfg, init)?;
                Ok(Solved { result: r.result, active: Some(r.active), choice })
            }
        }
    };
    match warm {
        Some(w) => attempt(Some(w)).or_else(|_| attempt(None)),
        None => attempt(None),
    }
}

/// `dT/dθ` of a solved trajectory with the requested flavour.
pub fn gradient(
    p: &dyn OcProblem,
    s: &Solved,
    theta: &Vector,
    flavor: GradientFlavor,
) -> Result<TrajectoryGradient, GradientError> {
    let traj = &s.result.traj;
    let mu = s.result.mu;
    match flavor {
        GradientFlavor::Ip => gradient_ip(p, traj, theta, mu),
        GradientFlavor::Barrier => gradient_barrier(p, traj, theta, mu),
        GradientFlavor::Unconstrained => gradient_unconstrained(p, traj, theta),
        GradientFlavor::PdpOracle => {
            if s.choice == SolverChoice::Unconstrained {
                pdp_oracle_gradient(&Unconstrained(p), traj, theta, 1.0)
            } else {
                pdp_oracle_gradient(p, traj, theta, mu)
            }
        }
        GradientFlavor::ActiveSet => match &s.active {
            Some(a) => gradient_activeset_with(p, traj, theta, a),
            None => crate::gradient::gradient_activeset(p, traj, theta),
        },
    }
}

/// Feedback gains `K_k` of the solved policy.
pub fn gains(p: &dyn OcProblem, s: &Solved, theta: &Vector) -> Result<Vec<Mat>, GradientError> {
    match s.choice {
        SolverChoice::Unconstrained => policy_gains(&Unconstrained(p), &s.result.traj, theta, 1.0),
        _ if p.dims().n_in + p.dims().n_eq == 0 => policy_gains(p, &s.result.traj, theta, 1.0),
        SolverChoice::Ipddp => policy_gains(p, &s.result.traj, theta, s.result.mu),
        SolverChoice::ActiveSet => {
            Err(GradientError::Invalid("feedback gains are only produced by the interior-point solver".into()))
        }
    }
}

/// Central differences of complete re-solves, each started cold so that the
/// result does not depend on the unperturbed solution.
pub fn fd_trajectory_gradient(
    p: &dyn OcProblem,
    theta: &Vector,
    x0: &Vector,
    choice: SolverChoice,
    cfg: &SolverConfig,
    h: f64,
) -> Result<TrajectoryGradient, SolverError> {
    let n = p.dims().horizon;
    let nt = theta.len();
    let mut dx = vec![Mat::zeros(p.dims().n_x, nt); n + 1];
    let mut du = vec![Mat::zeros(p.dims().n_u, nt); n];
    for j in 0..nt {
        let step = h * theta[j].abs().max(1.0);
        let mut tp = theta.clone();
        tp[j] += step;
        let mut tm = theta.clone();
        tm[j] -= step;
        let a = solve(p, &tp, x0, choice, cfg, None)?.result.traj;
        let b = solve(p, &tm, x0, choice, cfg, None)?.result.traj;
        for k in 0..=n {
            dx[k].set_column(j, &((&a.states[k] - &b.states[k]) / (2.0 * step)));
        }
        for k in 0..n {
            du[k].set_column(j, &((&a.controls[k] - &b.controls[k]) / (2.0 * step)));
        }
    }
    Ok(TrajectoryGradient { dx, du })
}

/// `max |a − b| / max(1, |b|)` entrywise, the mixed tolerance used by the
/// finite-difference checks.
pub fn mixed_error(a: &TrajectoryGradient, b: &TrajectoryGradient) -> f64 {
    let (x, y) = (a.du_stacked(), b.du_stacked());
    let (sx, sy) = (a.dx_stacked(), b.dx_stacked());
    x.iter()
        .zip(y.iter())
        .chain(sx.iter().zip(sy.iter()))
        .map(|(p, q)| (p - q).abs() / q.abs().max(1.0))
        .fold(0.0, f64::max)
}
