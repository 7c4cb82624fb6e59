//! Benchmark systems with their nominal parameters, plus evaluation metrics.
//!
//! Every system uses explicit Euler integration. The quaternion part of the
//! quadrotor and rocket states is renormalised after each step.

use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutoDiff, Model};
use crate::linalg::{cross, mat3_vec, quat_mul, quat_normalize, quat_to_rot, Mat, Vector};
use crate::problem::{evaluate_cost, Dims, OcProblem, ProblemError, Trajectory};
use crate::scalar::{c, Scalar};

pub const DEFAULT_DT: f64 = 0.05;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BenchmarkError {
    #[error("unknown benchmark `{0}`")]
    UnknownSystem(String),
    #[error("invalid override: {0}")]
    InvalidOverride(String),
    #[error("length mismatch: {left} vs {right}")]
    Length { left: usize, right: usize },
}

/// Optional changes to a benchmark's defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Overrides {
    pub horizon: Option<usize>,
    pub dt: Option<f64>,
    /// Include the norm-bound constraints and their bound parameters.
    pub constrained: Option<bool>,
    pub x0: Option<Vec<f64>>,
    pub theta_star: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkSpec {
    pub name: String,
    pub dims: Dims,
    pub theta_names: Vec<String>,
    pub theta_star: Vec<f64>,
    pub x0: Vec<f64>,
    pub dt: f64,
    pub constrained: bool,
    /// Box used when projecting parameter iterates.
    pub theta_lower: Vec<f64>,
    pub theta_upper: Vec<f64>,
}

impl BenchmarkSpec {
    pub fn theta_star(&self) -> Vector {
        Vector::from_vec(self.theta_star.clone())
    }
    pub fn x0(&self) -> Vector {
        Vector::from_vec(self.x0.clone())
    }
    pub fn bounds(&self) -> (Vector, Vector) {
        (Vector::from_vec(self.theta_lower.clone()), Vector::from_vec(self.theta_upper.clone()))
    }
}

pub struct System {
    pub problem: Box<dyn OcProblem>,
    pub spec: BenchmarkSpec,
}

pub const SYSTEM_NAMES: [&str; 6] = ["scalar_example", "lqr_ioc", "cartpole", "arm2link", "quadrotor", "rocket"];

/// Builds a benchmark by name.
pub fn make_system(name: &str, ov: &Overrides) -> Result<System, BenchmarkError> {
    let dt = ov.dt.unwrap_or(DEFAULT_DT);
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(BenchmarkError::InvalidOverride(format!("dt must be positive, got {dt}")));
    }
    if ov.horizon == Some(0) {
        return Err(BenchmarkError::InvalidOverride("horizon must be at least 1".into()));
    }
    let constrained = ov.constrained;
    let (problem, mut spec): (Box<dyn OcProblem>, BenchmarkSpec) = match name {
        "scalar_example" => {
            let m = ScalarExample { horizon: ov.horizon.unwrap_or(2) };
            let spec = m.spec();
            (Box::new(AutoDiff(m)), spec)
        }
        "lqr_ioc" => {
            let m = LqrIoc { horizon: ov.horizon.unwrap_or(50), constrained: constrained.unwrap_or(true) };
            let spec = m.spec();
            (Box::new(AutoDiff(m)), spec)
        }
        "cartpole" => {
            let m = Cartpole { dt, horizon: ov.horizon.unwrap_or(12), constrained: constrained.unwrap_or(true) };
            let spec = m.spec();
            (Box::new(AutoDiff(m)), spec)
        }
        "arm2link" => {
            let m = Arm2Link { dt, horizon: ov.horizon.unwrap_or(10), constrained: constrained.unwrap_or(true) };
            let spec = m.spec();
            (Box::new(AutoDiff(m)), spec)
        }
        "quadrotor" => {
            let m = Quadrotor { dt, horizon: ov.horizon.unwrap_or(10), constrained: constrained.unwrap_or(true) };
            let spec = m.spec();
            (Box::new(AutoDiff(m)), spec)
        }
        "rocket" => {
            let m = Rocket { dt, horizon: ov.horizon.unwrap_or(40), constrained: constrained.unwrap_or(true) };
            let spec = m.spec();
            (Box::new(AutoDiff(m)), spec)
        }
        other => return Err(BenchmarkError::UnknownSystem(other.to_string())),
    };
    if ov.dt.is_some() {
        spec.dt = dt;
    }
    if let Some(x0) = &ov.x0 {
        if x0.len() != spec.dims.n_x {
            return Err(BenchmarkError::InvalidOverride(format!("x0 has length {}, expected {}", x0.len(), spec.dims.n_x)));
        }
        spec.x0 = x0.clone();
    }
    if let Some(t) = &ov.theta_star {
        if t.len() != spec.dims.n_theta {
            return Err(BenchmarkError::InvalidOverride(format!(
                "theta_star has length {}, expected {}",
                t.len(),
                spec.dims.n_theta
            )));
        }
        spec.theta_star = t.clone();
    }
    Ok(System { problem, spec })
}

fn names(v: &[&str]) -> Vec<String> {
    v.iter().map(|s| s.to_string()).collect()
}

fn sq<D: Scalar>(v: D) -> D {
    v * v
}

// ---------------------------------------------------------------------------

/// `x⁺ = x + u`, `c = ½(θx² + u²)`, `c_f = ½x²`.
#[derive(Debug, Clone)]
pub struct ScalarExample {
    pub horizon: usize,
}

impl ScalarExample {
    fn spec(&self) -> BenchmarkSpec {
        BenchmarkSpec {
            name: "scalar_example".into(),
            dims: self.dims(),
            theta_names: names(&["theta"]),
            theta_star: vec![1.0],
            x0: vec![1.0],
            dt: 1.0,
            constrained: false,
            theta_lower: vec![1e-3],
            theta_upper: vec![1e3],
        }
    }
}

impl Model for ScalarExample {
    fn dims(&self) -> Dims {
        Dims { n_x: 1, n_u: 1, n_theta: 1, n_in: 0, n_eq: 0, horizon: self.horizon }
    }
    fn name(&self) -> &str {
        "scalar_example"
    }
    fn stage_cost<D: Scalar>(&self, _k: usize, x: &[D], u: &[D], th: &[D]) -> D {
        (th[0] * x[0] * x[0] + u[0] * u[0]) * 0.5
    }
    fn terminal_cost<D: Scalar>(&self, x: &[D], _th: &[D]) -> D {
        x[0] * x[0] * 0.5
    }
    fn dynamics<D: Scalar>(&self, _k: usize, x: &[D], u: &[D], _th: &[D]) -> Vec<D> {
        vec![x[0] + u[0]]
    }
}

// ---------------------------------------------------------------------------

/// Linear system with a bilinear state-control bound, linear in θ through the
/// cost: `c = θ₁x₁² + θ₂x₂² + θ₃u²`, `c_f = 0`, `(x₁u)² ≤ 0.01`.
#[derive(Debug, Clone)]
pub struct LqrIoc {
    pub horizon: usize,
    pub constrained: bool,
}

impl LqrIoc {
    fn spec(&self) -> BenchmarkSpec {
        BenchmarkSpec {
            name: "lqr_ioc".into(),
            dims: self.dims(),
            theta_names: names(&["theta_x1", "theta_x2", "theta_u"]),
            theta_star: vec![0.1, 0.3, 0.6],
            x0: vec![1.2, -0.8],
            dt: 1.0,
            constrained: self.constrained,
            theta_lower: vec![1e-4; 3],
            theta_upper: vec![1e3; 3],
        }
    }

    /// Cost features `φ(x, u)` with `c = φᵀθ`.
    pub fn features<D: Scalar>(x: &[D], u: &[D]) -> [D; 3] {
        [x[0] * x[0], x[1] * x[1], u[0] * u[0]]
    }
}

impl Model for LqrIoc {
    fn dims(&self) -> Dims {
        Dims { n_x: 2, n_u: 1, n_theta: 3, n_in: usize::from(self.constrained), n_eq: 0, horizon: self.horizon }
    }
    fn name(&self) -> &str {
        "lqr_ioc"
    }
    fn stage_cost<D: Scalar>(&self, _k: usize, x: &[D], u: &[D], th: &[D]) -> D {
        let f = Self::features(x, u);
        f[0] * th[0] + f[1] * th[1] + f[2] * th[2]
    }
    fn terminal_cost<D: Scalar>(&self, _x: &[D], _th: &[D]) -> D {
        D::zero()
    }
    fn dynamics<D: Scalar>(&self, _k: usize, x: &[D], u: &[D], _th: &[D]) -> Vec<D> {
        vec![-x[0] + x[1] + u[0], x[1] + u[0] * 3.0]
    }
    fn inequality<D: Scalar>(&self, _k: usize, x: &[D], u: &[D], _th: &[D]) -> Vec<D> {
        if self.constrained {
            vec![sq(x[0] * u[0]) - 0.01]
        } else {
            Vec::new()
        }
    }
}

// ---------------------------------------------------------------------------

const CART_G: f64 = 9.81;
const CART_XD: [f64; 4] = [0.0, 0.0, PI, 0.0];
const W_U: f64 = 0.1;

/// θ = [m_c, m_p, l, θ_x(4), x_ub, f_ub]; the last two only when constrained.
#[derive(Debug, Clone)]
pub struct Cartpole {
    pub dt: f64,
    pub horizon: usize,
    pub constrained: bool,
}

impl Cartpole {
    fn spec(&self) -> BenchmarkSpec {
        let mut theta_names = names(&["m_c", "m_p", "l", "w_x", "w_xdot", "w_q", "w_qdot"]);
        let mut theta = vec![1.0, 0.3, 0.8, 1.0, 0.5, 2.0, 0.3];
        let mut upper = vec![1e2; 7];
        if self.constrained {
            theta_names.extend(names(&["x_ub", "f_ub"]));
            theta.extend([0.5, 3.5]);
            upper.extend([1e2, 1e3]);
        }
        BenchmarkSpec {
            name: "cartpole".into(),
            dims: self.dims(),
            theta_lower: vec![1e-3; theta.len()],
            theta_upper: upper,
            theta_names,
            theta_star: theta,
            x0: vec![0.0, 0.0, 0.0, 0.0],
            dt: self.dt,
            constrained: self.constrained,
        }
    }

    fn tracking<D: Scalar>(x: &[D], th: &[D]) -> D {
        let mut s = D::zero();
        for i in 0..4 {
            s += th[3 + i] * sq(x[i] - CART_XD[i]);
        }
        s
    }
}

impl Model for Cartpole {
    fn dims(&self) -> Dims {
        let (n_theta, n_in) = if self.constrained { (9, 4) } else { (7, 0) };
        Dims { n_x: 4, n_u: 1, n_theta, n_in, n_eq: 0, horizon: self.horizon }
    }
    fn name(&self) -> &str {
        "cartpole"
    }
    fn stage_cost<D: Scalar>(&self, _k: usize, x: &[D], u: &[D], th: &[D]) -> D {
        Self::tracking(x, th) + u[0] * u[0] * W_U
    }
    fn terminal_cost<D: Scalar>(&self, x: &[D], th: &[D]) -> D {
        Self::tracking(x, th)
    }
    fn dynamics<D: Scalar>(&self, _k: usize, x: &[D], u: &[D], th: &[D]) -> Vec<D> {
        let (mc, mp, l) = (th[0], th[1], th[2]);
        let (xd, q, qd) = (x[1], x[2], x[3]);
        let f = u[0];
        let (s, co) = (q.sin(), q.cos());
        let b = mc + mp * s * s;
        let xdd = (f + mp * s * (l * qd * qd + co * CART_G)) / b;
        let qdd = (-f * co - mp * l * qd * qd * co * s - (mc + mp) * s * CART_G) / (l * b);
        let dt = self.dt;
        vec![x[0] + xd * dt, xd + xdd * dt, q + qd * dt, qd + qdd * dt]
    }
    fn inequality<D: Scalar>(&self, _k: usize, x: &[D], u: &[D], th: &[D]) -> Vec<D> {
        if !self.constrained {
            return Vec::new();
        }
        let (xub, fub) = (th[7], th[8]);
        vec![x[0] - xub, -x[0] - xub, u[0] - fub, -u[0] - fub]
    }
}

// ---------------------------------------------------------------------------

const ARM_G: f64 = 9.81;
const ARM_M: [f64; 2] = [1.0, 1.0];
const ARM_XD: [f64; 4] = [PI / 2.0, 0.0, 0.0, 0.0];

/// θ = [l₁, l₂, θ_x(4), q_ub, u_ub]; the last two only when constrained.
#[derive(Debug, Clone)]
pub struct Arm2Link {
    pub dt: f64,
    pub horizon: usize,
    pub constrained: bool,
}

impl Arm2Link {
    fn spec(&self) -> BenchmarkSpec {
        let mut theta_names = names(&["l1", "l2", "w_q1", "w_q2", "w_q1dot", "w_q2dot"]);
        let mut theta = vec![1.0, 0.8, 1.0, 1.0, 0.3, 0.3];
        if self.constrained {
            theta_names.extend(names(&["q_ub", "u_ub"]));
            theta.extend([2.0, 0.8]);
        }
        BenchmarkSpec {
            name: "arm2link".into(),
            dims: self.dims(),
            theta_lower: vec![1e-3; theta.len()],
            theta_upper: vec![1e3; theta.len()],
            theta_names,
            theta_star: theta,
            x0: vec![0.5, 0.3, 0.0, 0.0],
            dt: self.dt,
            constrained: self.constrained,
        }
    }

    fn tracking<D: Scalar>(x: &[D], th: &[D]) -> D {
        let mut s = D::zero();
        for i in 0..4 {
            s += th[2 + i] * sq(x[i] - ARM_XD[i]);
        }
        s
    }
}

impl Model for Arm2Link {
    fn dims(&self) -> Dims {
        let (n_theta, n_in) = if self.constrained { (8, 8) } else { (6, 0) };
        Dims { n_x: 4, n_u: 2, n_theta, n_in, n_eq: 0, horizon: self.horizon }
    }
    fn name(&self) -> &str {
        "arm2link"
    }
    fn stage_cost<D: Scalar>(&self, _k: usize, x: &[D], u: &[D], th: &[D]) -> D {
        Self::tracking(x, th) + (u[0] * u[0] + u[1] * u[1]) * W_U
    }
    fn terminal_cost<D: Scalar>(&self, x: &[D], th: &[D]) -> D {
        Self::tracking(x, th)
    }
    fn dynamics<D: Scalar>(&self, _k: usize, x: &[D], u: &[D], th: &[D]) -> Vec<D> {
        let (l1, l2) = (th[0], th[1]);
        let (m1, m2) = (ARM_M[0], ARM_M[1]);
        let (q1, q2, dq1, dq2) = (x[0], x[1], x[2], x[3]);
        let i1 = l1 * l1 * (m1 / 12.0);
        let i2 = l2 * l2 * (m2 / 12.0);
        let c2 = q2.cos();
        let m11 = l1 * l1 * (m1 / 4.0) + i1 + (l1 * l1 + l2 * l2 / 4.0 + l1 * l2 * c2) * m2 + i2;
        let m12 = (l2 * l2 / 4.0 + l1 * l2 * c2 / 2.0) * m2 + i2;
        let m22 = l2 * l2 * (m2 / 4.0) + i2;
        let h = l1 * l2 * q2.sin() * (m2 / 2.0);
        let cor = [-h * (dq2 * dq2 + dq1 * dq2 * 2.0), h * dq1 * dq1];
        let grav = [
            l1 * q1.cos() * (m1 * ARM_G / 2.0) + (l2 * (q1 + q2).cos() / 2.0 + l1 * q1.cos()) * (m2 * ARM_G),
            l2 * (q1 + q2).cos() * (m2 * ARM_G / 2.0),
        ];
        let r = [u[0] - cor[0] - grav[0], u[1] - cor[1] - grav[1]];
        let det = m11 * m22 - m12 * m12;
        let ddq1 = (m22 * r[0] - m12 * r[1]) / det;
        let ddq2 = (m11 * r[1] - m12 * r[0]) / det;
        let dt = self.dt;
        vec![q1 + dq1 * dt, q2 + dq2 * dt, dq1 + ddq1 * dt, dq2 + ddq2 * dt]
    }
    fn inequality<D: Scalar>(&self, _k: usize, x: &[D], u: &[D], th: &[D]) -> Vec<D> {
        if !self.constrained {
            return Vec::new();
        }
        let (qub, uub) = (th[6], th[7]);
        vec![
            x[0] - qub,
            -x[0] - qub,
            x[1] - qub,
            -x[1] - qub,
            u[0] - uub,
            -u[0] - uub,
            u[1] - uub,
            -u[1] - uub,
        ]
    }
}

// ---------------------------------------------------------------------------

const QUAD_G: f64 = 10.0;
const QUAD_TORQUE_RATIO: f64 = 0.01;

/// `tr(I − R_dᵀR)/2` with `R_d = I`.
fn attitude_error<D: Scalar>(q: &[D]) -> D {
    let r = quat_to_rot(q);
    (c::<D>(3.0) - r[0][0] - r[1][1] - r[2][2]) * 0.5
}

/// Shared rigid-body step: position, velocity, quaternion, body rates.
fn rigid_body_step<D: Scalar>(x: &[D], acc_world: [D; 3], omega_dot: [D; 3], dt: f64) -> Vec<D> {
    let (p, v, q, w) = (&x[0..3], &x[3..6], &x[6..10], &x[10..13]);
    let qd = quat_mul(q, &[D::zero(), w[0], w[1], w[2]]);
    let mut qn = [D::zero(); 4];
    for i in 0..4 {
        qn[i] = q[i] + qd[i] * (0.5 * dt);
    }
    let qn = quat_normalize(&qn);
    let mut out = Vec::with_capacity(13);
    for i in 0..3 {
        out.push(p[i] + v[i] * dt);
    }
    for i in 0..3 {
        out.push(v[i] + acc_world[i] * dt);
    }
    out.extend(qn);
    for i in 0..3 {
        out.push(w[i] + omega_dot[i] * dt);
    }
    out
}

/// `J⁻¹(τ − ω × Jω)` for diagonal `J`.
fn euler_rates<D: Scalar>(j: &[D], w: &[D], tau: &[D]) -> [D; 3] {
    let jw = [j[0] * w[0], j[1] * w[1], j[2] * w[2]];
    let gyro = cross(w, &jw);
    [(tau[0] - gyro[0]) / j[0], (tau[1] - gyro[1]) / j[1], (tau[2] - gyro[2]) / j[2]]
}

/// Group-weighted tracking cost of a rigid-body state towards the origin.
fn rigid_body_tracking<D: Scalar>(x: &[D], w: &[D]) -> D {
    let mut sp = D::zero();
    let mut sv = D::zero();
    let mut sw = D::zero();
    for i in 0..3 {
        sp += x[i] * x[i];
        sv += x[3 + i] * x[3 + i];
        sw += x[10 + i] * x[10 + i];
    }
    w[0] * sp + w[1] * sv + w[2] * attitude_error(&x[6..10]) + w[3] * sw
}

fn rigid_body_x0(tilt: f64, p: [f64; 3]) -> Vec<f64> {
    let axis = [0.6, 0.8, 0.0];
    let (s, co) = ((tilt / 2.0).sin(), (tilt / 2.0).cos());
    vec![p[0], p[1], p[2], 0.0, 0.0, 0.0, co, s * axis[0], s * axis[1], s * axis[2], 0.0, 0.0, 0.0]
}

/// θ = [m, J_x, J_y, J_z, l, θ_p, θ_v, θ_q, θ_ω, r, u_ub].
#[derive(Debug, Clone)]
pub struct Quadrotor {
    pub dt: f64,
    pub horizon: usize,
    pub constrained: bool,
}

impl Quadrotor {
    fn spec(&self) -> BenchmarkSpec {
        let mut theta_names = names(&["m", "J_x", "J_y", "J_z", "l", "w_p", "w_v", "w_q", "w_omega"]);
        let mut theta = vec![1.0, 1.0, 1.0, 1.0, 0.4, 1.0, 1.0, 5.0, 1.0];
        if self.constrained {
            theta_names.extend(names(&["r", "u_ub"]));
            theta.extend([2.0, 1.3]);
        }
        BenchmarkSpec {
            name: "quadrotor".into(),
            dims: self.dims(),
            theta_lower: vec![1e-3; theta.len()],
            theta_upper: vec![1e3; theta.len()],
            theta_names,
            theta_star: theta,
            x0: rigid_body_x0(0.4, [1.0, -0.8, 0.5]),
            dt: self.dt,
            constrained: self.constrained,
        }
    }
}

impl Model for Quadrotor {
    fn dims(&self) -> Dims {
        let (n_theta, n_in) = if self.constrained { (11, 9) } else { (9, 0) };
        Dims { n_x: 13, n_u: 4, n_theta, n_in, n_eq: 0, horizon: self.horizon }
    }
    fn name(&self) -> &str {
        "quadrotor"
    }
    fn stage_cost<D: Scalar>(&self, _k: usize, x: &[D], u: &[D], th: &[D]) -> D {
        let uu = u.iter().fold(D::zero(), |a, v| a + *v * *v);
        rigid_body_tracking(x, &th[5..9]) + uu * W_U
    }
    fn terminal_cost<D: Scalar>(&self, x: &[D], th: &[D]) -> D {
        rigid_body_tracking(x, &th[5..9])
    }
    fn dynamics<D: Scalar>(&self, _k: usize, x: &[D], u: &[D], th: &[D]) -> Vec<D> {
        let (m, l) = (th[0], th[4]);
        let thrust = u[0] + u[1] + u[2] + u[3];
        let tau = [
            (u[3] - u[1]) * l * 0.5,
            (u[2] - u[0]) * l * 0.5,
            (u[0] - u[1] + u[2] - u[3]) * QUAD_TORQUE_RATIO,
        ];
        let r = quat_to_rot(&x[6..10]);
        let acc = [
            r[0][2] * thrust / m,
            r[1][2] * thrust / m,
            r[2][2] * thrust / m - QUAD_G,
        ];
        let wd = euler_rates(&th[1..4], &x[10..13], &tau);
        rigid_body_step(x, acc, wd, self.dt)
    }
    fn inequality<D: Scalar>(&self, _k: usize, x: &[D], u: &[D], th: &[D]) -> Vec<D> {
        if !self.constrained {
            return Vec::new();
        }
        let (r, uub) = (th[9], th[10]);
        let mut g = vec![x[0] * x[0] + x[1] * x[1] + x[2] * x[2] - r * r];
        for ui in u.iter().take(4) {
            g.push(*ui - uub);
            g.push(-*ui - uub);
        }
        g
    }
}

// ---------------------------------------------------------------------------

const ROCKET_G: f64 = 10.0;
const ROCKET_GIMBAL: [f64; 3] = [0.0, 0.0, -0.5];

/// θ = [m, J_x, J_y, J_z, θ_p, θ_v, θ_q, θ_ω, α_ub, u_ub].
#[derive(Debug, Clone)]
pub struct Rocket {
    pub dt: f64,
    pub horizon: usize,
    pub constrained: bool,
}

impl Rocket {
    fn spec(&self) -> BenchmarkSpec {
        let mut theta_names = names(&["m", "J_x", "J_y", "J_z", "w_p", "w_v", "w_q", "w_omega"]);
        let mut theta = vec![1.0, 0.5, 0.5, 0.2, 1.0, 1.0, 5.0, 1.0];
        if self.constrained {
            theta_names.extend(names(&["alpha_ub", "u_ub"]));
            theta.extend([0.2, 8.0]);
        }
        BenchmarkSpec {
            name: "rocket".into(),
            dims: self.dims(),
            theta_lower: vec![1e-3; theta.len()],
            theta_upper: vec![1e3; theta.len()],
            theta_names,
            theta_star: theta,
            x0: rigid_body_x0(0.3, [1.0, 1.0, 3.0]),
            dt: self.dt,
            constrained: self.constrained,
        }
    }
}

impl Model for Rocket {
    fn dims(&self) -> Dims {
        let (n_theta, n_in) = if self.constrained { (10, 2) } else { (8, 0) };
        Dims { n_x: 13, n_u: 3, n_theta, n_in, n_eq: 0, horizon: self.horizon }
    }
    fn name(&self) -> &str {
        "rocket"
    }
    fn stage_cost<D: Scalar>(&self, _k: usize, x: &[D], u: &[D], th: &[D]) -> D {
        let uu = u.iter().fold(D::zero(), |a, v| a + *v * *v);
        rigid_body_tracking(x, &th[4..8]) + uu * W_U
    }
    fn terminal_cost<D: Scalar>(&self, x: &[D], th: &[D]) -> D {
        rigid_body_tracking(x, &th[4..8])
    }
    fn dynamics<D: Scalar>(&self, _k: usize, x: &[D], u: &[D], th: &[D]) -> Vec<D> {
        let m = th[0];
        let r = quat_to_rot(&x[6..10]);
        let f = mat3_vec(&r, u);
        let acc = [f[0] / m, f[1] / m, f[2] / m - ROCKET_G];
        let gimbal = [c::<D>(ROCKET_GIMBAL[0]), c(ROCKET_GIMBAL[1]), c(ROCKET_GIMBAL[2])];
        let tau = cross(&gimbal, u);
        let wd = euler_rates(&th[1..4], &x[10..13], &tau);
        rigid_body_step(x, acc, wd, self.dt)
    }
    fn inequality<D: Scalar>(&self, _k: usize, x: &[D], u: &[D], th: &[D]) -> Vec<D> {
        if !self.constrained {
            return Vec::new();
        }
        let (aub, uub) = (th[8], th[9]);
        let uu = u[0] * u[0] + u[1] * u[1] + u[2] * u[2];
        vec![attitude_error(&x[6..10]) - aub, uu - uub * uub]
    }
}

// ---------------------------------------------------------------------------
// Metrics

/// `‖θ − θ*‖²`
/// `θ_i (1 + frac)` on even indices and `θ_i (1 − frac)` on odd ones.
pub fn alternating_offset(theta: &Vector, frac: f64) -> Vector {
    Vector::from_fn(theta.len(), |i, _| theta[i] * if i % 2 == 0 { 1.0 + frac } else { 1.0 - frac })
}

pub fn parameter_residual(theta: &Vector, theta_star: &Vector) -> Result<f64, BenchmarkError> {
    if theta.len() != theta_star.len() {
        return Err(BenchmarkError::Length { left: theta.len(), right: theta_star.len() });
    }
    Ok((theta - theta_star).norm_squared())
}

/// Sum of squared state and control deviations between two trajectories.
pub fn trajectory_residual(a: &Trajectory, b: &Trajectory) -> Result<f64, BenchmarkError> {
    if a.states.len() != b.states.len() || a.controls.len() != b.controls.len() {
        return Err(BenchmarkError::Length { left: a.states.len(), right: b.states.len() });
    }
    let xs: f64 = a.states.iter().zip(&b.states).map(|(p, q)| (p - q).norm_squared()).sum();
    let us: f64 = a.controls.iter().zip(&b.controls).map(|(p, q)| (p - q).norm_squared()).sum();
    Ok(xs + us)
}

/// `J(T; θ*) − J(T*; θ*)`, the cost gap of a trajectory under the true parameter.
pub fn suboptimality_gap(p: &dyn OcProblem, theta_star: &Vector, traj: &Trajectory, reference: &Trajectory) -> f64 {
    evaluate_cost(p, theta_star, traj) - evaluate_cost(p, theta_star, reference)
}

/// Multiplicative state noise `x⁺ ← x⁺ ∘ (1 + σε)` plus optional additive terms.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseModel {
    #[serde(default)]
    pub multiplicative_sigma: f64,
    #[serde(default)]
    pub additive_sigma: f64,
    /// Explicit additive realisations `w_1, …, w_N` (one per transition).
    #[serde(default)]
    pub fixed_additive: Option<Vec<Vec<f64>>>,
}

impl NoiseModel {
    pub fn multiplicative(sigma: f64) -> Self {
        NoiseModel { multiplicative_sigma: sigma, ..Default::default() }
    }

    pub fn fixed(w: Vec<Vec<f64>>) -> Self {
        NoiseModel { fixed_additive: Some(w), ..Default::default() }
    }

    /// Perturbs the successor of transition `k`.
    pub fn apply(&self, k: usize, next: &Vector, rng: &mut ChaCha8Rng) -> Vector {
        let mut out = next.clone();
        if self.multiplicative_sigma != 0.0 {
            for v in out.iter_mut() {
                let e: f64 = StandardNormal.sample(rng);
                *v *= 1.0 + self.multiplicative_sigma * e;
            }
        }
        if self.additive_sigma != 0.0 {
            for v in out.iter_mut() {
                let e: f64 = StandardNormal.sample(rng);
                *v += self.additive_sigma * e;
            }
        }
        if let Some(w) = self.fixed_additive.as_ref().and_then(|w| w.get(k)) {
            for (v, wi) in out.iter_mut().zip(w) {
                *v += wi;
            }
        }
        out
    }
}

pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Rolls out `u = u_k + K_k(x − x_k)` on the true system under noise.
pub fn noisy_feedback_rollout(
    p: &dyn OcProblem,
    theta_true: &Vector,
    nominal: &Trajectory,
    gains: &[Mat],
    noise: &NoiseModel,
    seed: u64,
) -> Result<Trajectory, ProblemError> {
    let n = nominal.horizon();
    let mut rng = rng_from_seed(seed);
    let mut states = vec![nominal.states[0].clone()];
    let mut controls = Vec::with_capacity(n);
    for k in 0..n {
        let dx = &states[k] - &nominal.states[k];
        let u = &nominal.controls[k] + &gains[k] * dx;
        let next = p.dynamics(k, &states[k], &u, theta_true);
        crate::problem::check_finite(&next, "dynamics", k)?;
        states.push(noise.apply(k, &next, &mut rng));
        controls.push(u);
    }
    Ok(Trajectory {
        states,
        controls,
        duals_in: nominal.duals_in.clone(),
        duals_eq: nominal.duals_eq.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::{fd_derivatives_at, Wrt};

    #[test]
    fn every_system_builds_with_consistent_dims() {
        for name in SYSTEM_NAMES {
            let s = make_system(name, &Overrides::default()).unwrap();
            let d = s.problem.dims();
            assert_eq!(d, s.spec.dims);
            assert_eq!(s.spec.theta_star.len(), d.n_theta, "{name}");
            assert_eq!(s.spec.theta_names.len(), d.n_theta, "{name}");
            assert_eq!(s.spec.x0.len(), d.n_x, "{name}");
            let th = s.spec.theta_star();
            let x = s.spec.x0();
            let u = Vector::zeros(d.n_u);
            assert_eq!(s.problem.dynamics(0, &x, &u, &th).len(), d.n_x);
            let g = s.problem.inequality(0, &x, &u, &th);
            assert_eq!(g.len(), d.n_in);
            assert!(g.iter().all(|v| *v < 0.0), "{name}: x0 with zero control must be strictly feasible");
        }
    }

    #[test]
    fn unknown_system_is_rejected() {
        assert!(matches!(make_system("pendulum", &Overrides::default()), Err(BenchmarkError::UnknownSystem(_))));
    }

    #[test]
    fn cartpole_rest_is_equilibrium() {
        let s = make_system("cartpole", &Overrides::default()).unwrap();
        let x = Vector::zeros(4);
        let next = s.problem.dynamics(0, &x, &Vector::zeros(1), &s.spec.theta_star());
        assert_eq!(next, x);
    }

    #[test]
    fn scalar_cost_at_closed_form_optimum() {
        let s = make_system("scalar_example", &Overrides::default()).unwrap();
        let traj = crate::problem::trajectory_from_controls(
            s.problem.as_ref(),
            &s.spec.theta_star(),
            &s.spec.x0(),
            vec![Vector::from_vec(vec![-0.6]), Vector::from_vec(vec![-0.2])],
        )
        .unwrap();
        assert!((evaluate_cost(s.problem.as_ref(), &s.spec.theta_star(), &traj) - 0.8).abs() < 1e-12);
    }

    #[test]
    fn quaternion_stays_unit_under_dynamics() {
        for name in ["quadrotor", "rocket"] {
            let s = make_system(name, &Overrides::default()).unwrap();
            let d = s.problem.dims();
            let mut x = s.spec.x0();
            x[10] = 0.7;
            x[11] = -0.4;
            let u = Vector::from_element(d.n_u, 2.0);
            let next = s.problem.dynamics(0, &x, &u, &s.spec.theta_star());
            let qn = next.rows(6, 4).norm();
            assert!((qn - 1.0).abs() < 1e-14, "{name}: {qn}");
        }
    }

    #[test]
    fn ad_derivatives_match_finite_differences() {
        for name in SYSTEM_NAMES {
            let s = make_system(name, &Overrides::default()).unwrap();
            let d = s.problem.dims();
            let th = s.spec.theta_star();
            let mut x = s.spec.x0();
            for (i, v) in x.iter_mut().enumerate() {
                *v += 0.05 * ((i as f64) * 0.7).sin();
            }
            let u = Vector::from_fn(d.n_u, |i, _| 0.3 + 0.1 * i as f64);
            let ad = s.problem.stage_derivatives(1, &x, &u, &th, Wrt::All).unwrap();
            let fd = fd_derivatives_at(s.problem.as_ref(), 1, &x, &u, &th, Wrt::All, 1e-6);
            for (a, b, what) in [
                (&ad.cost, &fd.cost, "cost"),
                (&ad.dynamics, &fd.dynamics, "dynamics"),
                (&ad.ineq, &fd.ineq, "ineq"),
            ] {
                let sj = 1.0 + a.jac.amax();
                assert!((&a.jac - &b.jac).amax() / sj < 1e-5, "{name} {what} jacobian");
                for i in 0..a.m() {
                    let sh = 1.0 + a.hess.slice(i).amax();
                    let e = (a.hess.slice(i) - b.hess.slice(i)).amax() / sh;
                    assert!(e < 1e-5, "{name} {what}[{i}] hessian rel err {e}");
                }
            }
        }
    }

    #[test]
    fn noisy_rollout_with_zero_noise_reproduces_nominal() {
        let s = make_system("cartpole", &Overrides { constrained: Some(false), ..Default::default() }).unwrap();
        let th = s.spec.theta_star();
        let ctrls = vec![Vector::from_element(1, 0.5); 12];
        let nominal =
            crate::problem::trajectory_from_controls(s.problem.as_ref(), &th, &s.spec.x0(), ctrls).unwrap();
        let gains = vec![Mat::zeros(1, 4); 12];
        let out = noisy_feedback_rollout(s.problem.as_ref(), &th, &nominal, &gains, &NoiseModel::default(), 3).unwrap();
        assert!(trajectory_residual(&out, &nominal).unwrap() < 1e-24);
    }

    #[test]
    fn parameter_residual_examples() {
        let t = Vector::from_vec(vec![0.1, 0.3, 0.6]);
        assert_eq!(parameter_residual(&t, &t).unwrap(), 0.0);
        let mut e = t.clone();
        e[0] += 1.0;
        assert!((parameter_residual(&e, &t).unwrap() - 1.0).abs() < 1e-15);
        assert!(parameter_residual(&Vector::zeros(2), &t).is_err());
    }

    #[test]
    fn trajectory_residual_single_offset() {
        let s = make_system("scalar_example", &Overrides::default()).unwrap();
        let a = crate::problem::trajectory_from_controls(
            s.problem.as_ref(),
            &s.spec.theta_star(),
            &s.spec.x0(),
            vec![Vector::zeros(1); 2],
        )
        .unwrap();
        let mut b = a.clone();
        assert_eq!(trajectory_residual(&a, &b).unwrap(), 0.0);
        b.controls[1][0] += 0.25;
        assert!((trajectory_residual(&a, &b).unwrap() - 0.0625).abs() < 1e-15);
        b.states.pop();
        assert!(trajectory_residual(&a, &b).is_err());
        assert_eq!(suboptimality_gap(s.problem.as_ref(), &s.spec.theta_star(), &a, &a), 0.0);
    }

    #[test]
    fn scalar_solver_matches_closed_form_on_grid() {
        use crate::ddp::{solve_ipddp, SolverConfig};
        use crate::gradient::policy_gains;
        let s = make_system("scalar_example", &Overrides::default()).unwrap();
        let p = s.problem.as_ref();
        for th in [0.1, 0.5, 1.0, 4.0] {
            for x0 in [-2.0, 0.3, 1.0] {
                let theta = Vector::from_element(1, th);
                let r = solve_ipddp(p, &theta, &Vector::from_element(1, x0), &SolverConfig::default()).unwrap();
                let cf = crate::oracles::scalar_example(th, x0);
                assert!((r.traj.controls[0][0] - cf.u0).abs() < 1e-10);
                let k = policy_gains(p, &r.traj, &theta, 1.0).unwrap();
                assert!((k[1][(0, 0)] + 0.5).abs() < 1e-12);
            }
        }
    }
}
