//! Small problems used by unit tests.

use crate::autodiff::{AutoDiff, Model};
use crate::problem::Dims;
use crate::scalar::Scalar;

/// `x⁺ = x + u`, `c = ½(x² + u²)`; θ does not enter.
#[derive(Debug, Clone)]
pub struct ThetaFree;

impl Model for ThetaFree {
    fn dims(&self) -> Dims {
        Dims { n_x: 1, n_u: 1, n_theta: 1, n_in: 0, n_eq: 0, horizon: 3 }
    }
    fn name(&self) -> &str {
        "theta_free"
    }
    fn stage_cost<D: Scalar>(&self, _k: usize, x: &[D], u: &[D], _th: &[D]) -> D {
        (x[0] * x[0] + u[0] * u[0]) * 0.5
    }
    fn terminal_cost<D: Scalar>(&self, x: &[D], _th: &[D]) -> D {
        x[0] * x[0] * 0.5
    }
    fn dynamics<D: Scalar>(&self, _k: usize, x: &[D], u: &[D], _th: &[D]) -> Vec<D> {
        vec![x[0] + u[0]]
    }
}

/// Two controls tied by `u₁ = u₂`; θ weights the state cost.
#[derive(Debug, Clone)]
pub struct EqToy;

impl Model for EqToy {
    fn dims(&self) -> Dims {
        Dims { n_x: 1, n_u: 2, n_theta: 1, n_in: 0, n_eq: 1, horizon: 4 }
    }
    fn name(&self) -> &str {
        "eq_toy"
    }
    fn stage_cost<D: Scalar>(&self, _k: usize, x: &[D], u: &[D], th: &[D]) -> D {
        (th[0] * x[0] * x[0] + u[0] * u[0] + u[1] * u[1] * 2.0) * 0.5
    }
    fn terminal_cost<D: Scalar>(&self, x: &[D], _th: &[D]) -> D {
        x[0] * x[0] * 0.5
    }
    fn dynamics<D: Scalar>(&self, _k: usize, x: &[D], u: &[D], _th: &[D]) -> Vec<D> {
        vec![x[0] + u[0] + u[1] * 0.5]
    }
    fn equality<D: Scalar>(&self, _k: usize, _x: &[D], u: &[D], _th: &[D]) -> Vec<D> {
        vec![u[0] - u[1]]
    }
}

/// Scalar example with a lower control bound `u ≥ −b`, θ = [w, b].
#[derive(Debug, Clone)]
pub struct BoundToy;

impl Model for BoundToy {
    fn dims(&self) -> Dims {
        Dims { n_x: 1, n_u: 1, n_theta: 2, n_in: 1, n_eq: 0, horizon: 2 }
    }
    fn name(&self) -> &str {
        "bound_toy"
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
    fn inequality<D: Scalar>(&self, _k: usize, _x: &[D], u: &[D], th: &[D]) -> Vec<D> {
        vec![-u[0] - th[1]]
    }
}

pub fn theta_free() -> AutoDiff<ThetaFree> {
    AutoDiff(ThetaFree)
}
pub fn eq_toy() -> AutoDiff<EqToy> {
    AutoDiff(EqToy)
}
pub fn bound_toy() -> AutoDiff<BoundToy> {
    AutoDiff(BoundToy)
}
