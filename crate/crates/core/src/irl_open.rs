//! Inverse reinforcement learning with the open-loop (trajectory matching)
//! loss, minimised by projected gradient descent.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::benchmarks::parameter_residual;
use crate::ddp::SolverConfig;
use crate::demo::{DemoError, Demonstration};
use crate::gradient::TrajectoryGradient;
use crate::linalg::Vector;
use crate::pipeline::{gradient, solve, PipelineError, SolverChoice, Solved};
use crate::problem::{OcProblem, Trajectory};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum IrlError {
    #[error("iteration {iter}: {source}")]
    Inner { iter: usize, source: PipelineError },
    #[error(transparent)]
    Demo(#[from] DemoError),
    #[error("invalid configuration: {0}")]
    Config(String),
}

impl IrlError {
    pub(crate) fn inner(iter: usize, e: impl Into<PipelineError>) -> Self {
        IrlError::Inner { iter, source: e.into() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum StepSchedule {
    #[default]
    Constant,
    /// `η_t = η / √(t + 1)`
    InvSqrt,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OpenLoopConfig {
    pub eta: f64,
    #[serde(default)]
    pub schedule: StepSchedule,
    pub theta_lower: Vec<f64>,
    pub theta_upper: Vec<f64>,
    pub t_max: usize,
    pub theta0: Vec<f64>,
    /// Stop once `‖∇L‖` falls below this.
    #[serde(default = "default_grad_tol")]
    pub grad_tol: f64,
    /// Weight of the optional `‖θ‖²` term.
    #[serde(default)]
    pub ridge: f64,
    /// Halve the step until the loss does not increase.
    #[serde(default)]
    pub backtracking: bool,
    #[serde(default)]
    pub solver: SolverChoice,
    #[serde(default)]
    pub solver_config: SolverConfig,
}

fn default_grad_tol() -> f64 {
    1e-10
}

impl OpenLoopConfig {
    pub fn new(theta0: Vector, lower: Vector, upper: Vector, eta: f64, t_max: usize) -> Self {
        OpenLoopConfig {
            eta,
            schedule: StepSchedule::Constant,
            theta_lower: lower.iter().copied().collect(),
            theta_upper: upper.iter().copied().collect(),
            t_max,
            theta0: theta0.iter().copied().collect(),
            grad_tol: default_grad_tol(),
            ridge: 0.0,
            backtracking: false,
            solver: SolverChoice::Ipddp,
            solver_config: SolverConfig::default(),
        }
    }

    pub fn validate(&self, n_theta: usize) -> Result<(), IrlError> {
        if !(self.eta > 0.0) {
            return Err(IrlError::Config(format!("eta must be positive, got {}", self.eta)));
        }
        if self.theta0.len() != n_theta || self.theta_lower.len() != n_theta || self.theta_upper.len() != n_theta {
            return Err(IrlError::Config(format!("theta0 and bounds must have length {n_theta}")));
        }
        if self.theta_lower.iter().zip(&self.theta_upper).any(|(l, u)| !(l <= u)) {
            return Err(IrlError::Config("theta_lower must not exceed theta_upper".into()));
        }
        if self.ridge < 0.0 {
            return Err(IrlError::Config("ridge weight must be non-negative".into()));
        }
        Ok(())
    }

    fn step(&self, t: usize) -> f64 {
        match self.schedule {
            StepSchedule::Constant => self.eta,
            StepSchedule::InvSqrt => self.eta / ((t + 1) as f64).sqrt(),
        }
    }
}

/// Componentwise projection onto `[lo, hi]`.
pub fn clamp(v: &Vector, lo: &[f64], hi: &[f64]) -> Vector {
    Vector::from_fn(v.len(), |i, _| v[i].clamp(lo[i], hi[i]))
}

/// Value and partial derivatives of the open-loop loss.
#[derive(Debug, Clone, PartialEq)]
pub struct OpenLoopLoss {
    pub loss: f64,
    /// `∂L/∂x_k`, `k = 0..=N` (zero off the sample set).
    pub d_states: Vec<Vector>,
    /// `∂L/∂u_k`, `k = 0..N`.
    pub d_controls: Vec<Vector>,
    /// Explicit `∂L/∂θ`; nonzero only with the ridge term.
    pub d_theta: Vector,
}

/// `Σ_{k∈S} ‖x_k** − x_k‖² + ‖u_k** − u_k‖²`; the terminal stage contributes
/// its state only. `ridge` adds `ridge·‖θ‖²`.
pub fn open_loop_loss(
    demo: &Demonstration,
    traj: &Trajectory,
    theta: &Vector,
    ridge: f64,
) -> Result<OpenLoopLoss, IrlError> {
    let n = traj.horizon();
    crate::demo::check_samples(&demo.samples, n)?;
    if demo.states.len() != n + 1 || demo.controls.len() != n {
        return Err(DemoError::Shape(format!("demo horizon {} vs trajectory {n}", demo.horizon())).into());
    }
    let mut loss = 0.0;
    let mut d_states: Vec<Vector> = traj.states.iter().map(|x| Vector::zeros(x.len())).collect();
    let mut d_controls: Vec<Vector> = traj.controls.iter().map(|u| Vector::zeros(u.len())).collect();
    for &k in &demo.samples {
        let rx = &demo.states[k] - &traj.states[k];
        loss += rx.norm_squared();
        d_states[k] = -2.0 * rx;
        if k < n {
            let ru = &demo.controls[k] - &traj.controls[k];
            loss += ru.norm_squared();
            d_controls[k] = -2.0 * ru;
        }
    }
    loss += ridge * theta.norm_squared();
    Ok(OpenLoopLoss { loss, d_states, d_controls, d_theta: 2.0 * ridge * theta })
}

/// `(∂L/∂T)(dT/dθ) + ∂L/∂θ`
pub fn chain_rule(l: &OpenLoopLoss, g: &TrajectoryGradient) -> Vector {
    let mut out = l.d_theta.clone();
    for (dl, dx) in l.d_states.iter().zip(&g.dx) {
        out += dx.tr_mul(dl);
    }
    for (dl, du) in l.d_controls.iter().zip(&g.du) {
        out += du.tr_mul(dl);
    }
    out
}

/// Loss and gradient at `θ`, summed over demonstrations.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub loss: f64,
    pub grad: Vector,
    pub solved: Vec<Solved>,
}

pub fn evaluate(
    p: &dyn OcProblem,
    theta: &Vector,
    demos: &[Demonstration],
    cfg: &OpenLoopConfig,
    warm: Option<&[Solved]>,
    iter: usize,
) -> Result<Evaluation, IrlError> {
    let mut loss = 0.0;
    let mut grad = Vector::zeros(theta.len());
    let mut solved = Vec::with_capacity(demos.len());
    for (i, d) in demos.iter().enumerate() {
        let init = warm.and_then(|w| w.get(i)).map(|s| s.controls());
        let s = solve(p, theta, d.x0(), cfg.solver, &cfg.solver_config, init).map_err(|e| IrlError::inner(iter, e))?;
        let l = open_loop_loss(d, &s.result.traj, theta, 0.0)?;
        let g = gradient(p, &s, theta, cfg.solver.default_gradient()).map_err(|e| IrlError::inner(iter, e))?;
        loss += l.loss;
        grad += chain_rule(&l, &g);
        solved.push(s);
    }
    loss += cfg.ridge * theta.norm_squared();
    grad += 2.0 * cfg.ridge * theta;
    Ok(Evaluation { loss, grad, solved })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpenLoopRecord {
    pub t: usize,
    pub loss: f64,
    pub grad_norm: f64,
    pub theta: Vec<f64>,
    pub param_residual: Option<f64>,
    pub eta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpenLoopTrace {
    pub records: Vec<OpenLoopRecord>,
    pub theta: Vec<f64>,
    pub stopped_on_gradient: bool,
}

/// One projected step from `θ_t`; returns `θ_{t+1}` and the step used.
pub fn irl_open_step(theta: &Vector, grad: &Vector, eta: f64, cfg: &OpenLoopConfig) -> Vector {
    clamp(&(theta - eta * grad), &cfg.theta_lower, &cfg.theta_upper)
}

/// Projected gradient descent on the summed open-loop loss.
pub fn run_open_loop(
    p: &dyn OcProblem,
    demos: &[Demonstration],
    cfg: &OpenLoopConfig,
    theta_star: Option<&Vector>,
) -> Result<OpenLoopTrace, IrlError> {
    let nt = p.dims().n_theta;
    cfg.validate(nt)?;
    if demos.is_empty() {
        return Err(IrlError::Config("at least one demonstration is required".into()));
    }
    for d in demos {
        d.validate(p)?;
    }
    let mut theta = clamp(&Vector::from_vec(cfg.theta0.clone()), &cfg.theta_lower, &cfg.theta_upper);
    let mut ev = evaluate(p, &theta, demos, cfg, None, 0)?;
    let mut records = Vec::new();
    let mut stopped = false;
    for t in 0..=cfg.t_max {
        let residual = theta_star.map(|s| parameter_residual(&theta, s)).transpose().ok().flatten();
        let gn = ev.grad.norm();
        let mut eta = cfg.step(t);
        records.push(OpenLoopRecord {
            t,
            loss: ev.loss,
            grad_norm: gn,
            theta: theta.iter().copied().collect(),
            param_residual: residual,
            eta,
        });
        if gn < cfg.grad_tol {
            stopped = true;
            break;
        }
        if t == cfg.t_max {
            break;
        }
        let mut next = irl_open_step(&theta, &ev.grad, eta, cfg);
        let mut next_ev = evaluate(p, &next, demos, cfg, Some(&ev.solved), t + 1)?;
        if cfg.backtracking {
            let mut tries = 0;
            while next_ev.loss > ev.loss && tries < 30 {
                eta *= 0.5;
                next = irl_open_step(&theta, &ev.grad, eta, cfg);
                next_ev = evaluate(p, &next, demos, cfg, Some(&ev.solved), t + 1)?;
                tries += 1;
            }
        }
        theta = next;
        ev = next_ev;
    }
    Ok(OpenLoopTrace { records, theta: theta.iter().copied().collect(), stopped_on_gradient: stopped })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::benchmarks::{make_system, NoiseModel, Overrides};
    use crate::demo::{first_samples, generate_closed_loop_demo};
    use proptest::prelude::*;

    fn scalar_demo(w1: f64, w2: f64) -> (crate::benchmarks::System, Demonstration) {
        let s = make_system("scalar_example", &Overrides::default()).unwrap();
        let d = generate_closed_loop_demo(
            s.problem.as_ref(),
            &s.spec.theta_star(),
            &s.spec.x0(),
            &NoiseModel::fixed(vec![vec![w1], vec![w2]]),
            0,
            vec![0, 1, 2],
            SolverChoice::Ipddp,
            &SolverConfig::default(),
        )
        .unwrap();
        (s, d)
    }

    fn traj_at(s: &crate::benchmarks::System, th: f64) -> Trajectory {
        let th = Vector::from_element(1, th);
        solve(s.problem.as_ref(), &th, &s.spec.x0(), SolverChoice::Ipddp, &SolverConfig::default(), None)
            .unwrap()
            .result
            .traj
    }

    #[test]
    fn loss_of_demo_against_itself_is_zero() {
        let (s, d) = scalar_demo(0.0, 0.0);
        let l = open_loop_loss(&d, &traj_at(&s, 1.0), &Vector::from_element(1, 1.0), 0.0).unwrap();
        assert!(l.loss < 1e-24);
        assert!(l.d_states.iter().chain(&l.d_controls).all(|v| v.amax() < 1e-12));
        assert_eq!(l.d_theta[0], 0.0);
    }

    #[test]
    fn noisy_scalar_loss_value() {
        // w₁ = 0.5, w₂ = 0: L = w₁² + (w₁/2)² + (w₁/2)² = 0.375.
        let (s, d) = scalar_demo(0.5, 0.0);
        let l = open_loop_loss(&d, &traj_at(&s, 1.0), &Vector::from_element(1, 1.0), 0.0).unwrap();
        assert!((l.loss - 0.375).abs() < 1e-12);
    }

    #[test]
    fn ridge_adds_explicit_term() {
        let (s, d) = scalar_demo(0.0, 0.0);
        let th = Vector::from_element(1, 1.0);
        let l = open_loop_loss(&d, &traj_at(&s, 1.0), &th, 0.1).unwrap();
        assert!((l.loss - 0.1).abs() < 1e-12);
        assert!((l.d_theta[0] - 0.2).abs() < 1e-15);
    }

    #[test]
    fn out_of_range_sample_is_rejected() {
        let (s, d) = scalar_demo(0.0, 0.0);
        let bad = d.with_samples(vec![0, 3]);
        assert!(open_loop_loss(&bad, &traj_at(&s, 1.0), &Vector::from_element(1, 1.0), 0.0).is_err());
    }

    #[test]
    fn zero_gradient_leaves_theta_unchanged() {
        let cfg = OpenLoopConfig::new(
            Vector::from_element(2, 1.0),
            Vector::from_element(2, 0.0),
            Vector::from_element(2, 5.0),
            0.1,
            1,
        );
        let th = Vector::from_vec(vec![0.3, 4.0]);
        assert_eq!(irl_open_step(&th, &Vector::zeros(2), 0.1, &cfg), th);
        let out = irl_open_step(&th, &Vector::from_vec(vec![10.0, -10.0]), 0.1, &cfg);
        assert_eq!(out, Vector::from_vec(vec![0.0, 5.0]));
    }

    #[test]
    fn descends_toward_true_parameter_noise_free() {
        let (s, d) = scalar_demo(0.0, 0.0);
        let (lo, hi) = s.spec.bounds();
        let cfg = OpenLoopConfig::new(Vector::from_element(1, 1.2), lo, hi, 2.0, 30);
        let tr = run_open_loop(s.problem.as_ref(), &[d], &cfg, Some(&s.spec.theta_star())).unwrap();
        for w in tr.records.windows(2) {
            assert!(w[1].loss < w[0].loss || w[1].loss < 1e-20);
            assert!(w[1].theta[0] <= w[0].theta[0] && w[1].theta[0] >= 1.0 - 1e-9);
        }
        assert!(tr.records.last().unwrap().param_residual.unwrap() < 1e-8);
    }

    #[test]
    fn starting_at_truth_stays_put() {
        let (s, d) = scalar_demo(0.0, 0.0);
        let (lo, hi) = s.spec.bounds();
        let cfg = OpenLoopConfig::new(s.spec.theta_star(), lo, hi, 1.0, 5);
        let tr = run_open_loop(s.problem.as_ref(), &[d], &cfg, Some(&s.spec.theta_star())).unwrap();
        assert!(tr.stopped_on_gradient);
        assert_eq!(tr.theta, vec![1.0]);
    }

    #[test]
    fn gradient_matches_loss_differences_on_cartpole() {
        let s = make_system("cartpole", &Overrides::default()).unwrap();
        let p = s.problem.as_ref();
        let d = generate_closed_loop_demo(
            p,
            &s.spec.theta_star(),
            &s.spec.x0(),
            &NoiseModel::multiplicative(0.05),
            4,
            first_samples(13),
            SolverChoice::Ipddp,
            &SolverConfig::default(),
        )
        .unwrap();
        let (lo, hi) = s.spec.bounds();
        let th = s.spec.theta_star() * 1.05;
        let cfg = OpenLoopConfig::new(th.clone(), lo, hi, 1e-3, 1);
        let demos = [d];
        let ev = evaluate(p, &th, &demos, &cfg, None, 0).unwrap();
        let h = 1e-5;
        for i in 0..th.len() {
            let mut tp = th.clone();
            tp[i] += h;
            let mut tm = th.clone();
            tm[i] -= h;
            let fd = (evaluate(p, &tp, &demos, &cfg, None, 0).unwrap().loss
                - evaluate(p, &tm, &demos, &cfg, None, 0).unwrap().loss)
                / (2.0 * h);
            assert!((fd - ev.grad[i]).abs() < 1e-4 * (1.0 + fd.abs()), "θ{i}: fd {fd} vs {}", ev.grad[i]);
        }
    }

    proptest! {
        #[test]
        fn projection_is_idempotent(v in proptest::collection::vec(-10.0f64..10.0, 3)) {
            let lo = [-1.0, 0.0, 2.0];
            let hi = [1.0, 0.5, 3.0];
            let once = clamp(&Vector::from_vec(v), &lo, &hi);
            prop_assert_eq!(clamp(&once, &lo, &hi), once);
        }
    }
}
