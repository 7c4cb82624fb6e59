//! Reference solutions that do not go through the DDP code paths.

use crate::linalg::{Mat, Vector};

/// Finite-horizon discrete Riccati recursion for
/// `Σ ½(xᵀQx + uᵀRu) + ½x_NᵀQ_f x_N`, `x⁺ = Ax + Bu`.
///
/// Returns the feedback gains `K_k` (`u_k = K_k x_k`) and cost-to-go
/// Hessians `P_k`, `k = 0..=N` for `P`.
pub fn riccati(a: &Mat, b: &Mat, q: &Mat, r: &Mat, qf: &Mat, horizon: usize) -> (Vec<Mat>, Vec<Mat>) {
    let mut p = vec![Mat::zeros(0, 0); horizon + 1];
    let mut k = vec![Mat::zeros(0, 0); horizon];
    p[horizon] = qf.clone();
    for t in (0..horizon).rev() {
        let pb = &p[t + 1] * b;
        let s = r + b.transpose() * &pb;
        let gain = -s.lu().solve(&(pb.transpose() * a)).expect("R + BᵀPB must be invertible");
        let acl = a + b * &gain;
        p[t] = q + gain.transpose() * r * &gain + acl.transpose() * &p[t + 1] * &acl;
        k[t] = gain;
    }
    (k, p)
}

/// Optimal controls and states of the LQR problem from `x0`.
pub fn riccati_trajectory(gains: &[Mat], a: &Mat, b: &Mat, x0: &Vector) -> (Vec<Vector>, Vec<Vector>) {
    let mut xs = vec![x0.clone()];
    let mut us = Vec::with_capacity(gains.len());
    for g in gains {
        let x = xs.last().expect("nonempty").clone();
        let u = g * &x;
        xs.push(a * &x + b * &u);
        us.push(u);
    }
    (us, xs)
}

/// Closed form of the two-stage scalar example
/// `x⁺ = x + u`, `c = ½(θx² + u²)`, `c_f = ½x²`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScalarSolution {
    pub u0: f64,
    pub u1: f64,
    pub x1: f64,
    pub x2: f64,
    /// `du₀/dθ`
    pub du0: f64,
    /// `du₁/dθ`
    pub du1: f64,
}

pub fn scalar_example(theta: f64, x0: f64) -> ScalarSolution {
    let s = 2.0 * theta + 3.0;
    let u0 = -(2.0 * theta + 1.0) / s * x0;
    let x1 = x0 + u0;
    let u1 = -x1 / 2.0;
    let du0 = -4.0 * x0 / (s * s);
    ScalarSolution { u0, u1, x1, x2: x1 + u1, du0, du1: -du0 / 2.0 }
}

/// Closed-loop demonstration of the scalar example at θ = 1 with additive
/// state noise `w₁` on `x₁` and `w₂` on `x₂`: returns `(u₁, x₂)`.
pub fn scalar_noisy_demo(x0: f64, w1: f64, w2: f64) -> (f64, f64) {
    (-x0 / 5.0 - w1 / 2.0, x0 / 5.0 + w1 / 2.0 + w2)
}

/// `(2θ + 1)/(2θ + 3) − 3/5`, the first-stage gain offset from `θ* = 1`.
pub fn scalar_gain_offset(theta: f64) -> f64 {
    (2.0 * theta + 1.0) / (2.0 * theta + 3.0) - 0.6
}

/// Open-loop loss of the scalar example against the closed-loop noisy
/// demonstration at `θ* = 1`, written in the gain offset `t` and summed over
/// `x₀..x₂`, `u₀, u₁`.
pub fn scalar_open_loop_loss(t: f64, x0: f64, w1: f64, w2: f64) -> f64 {
    let a = t * x0;
    (a + w1).powi(2) + (0.5 * (a + w1)).powi(2) + a * a + (0.5 * (a + w1) + w2).powi(2)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_closed_form_at_one() {
        let s = scalar_example(1.0, 1.0);
        assert!((s.u0 + 0.6).abs() < 1e-15);
        assert!((s.u1 + 0.2).abs() < 1e-15);
        assert!((s.x1 - 0.4).abs() < 1e-15);
        assert!((s.x2 - 0.2).abs() < 1e-15);
        assert!((s.du0 + 0.16).abs() < 1e-15);
    }

    #[test]
    fn scalar_derivative_matches_difference_quotient() {
        for th in [0.3, 1.0, 2.5] {
            let h = 1e-6;
            let fd = (scalar_example(th + h, 1.3).u0 - scalar_example(th - h, 1.3).u0) / (2.0 * h);
            assert!((fd - scalar_example(th, 1.3).du0).abs() < 1e-8);
        }
    }

    #[test]
    fn riccati_one_step_scalar() {
        // One stage, A = B = Q = R = Q_f = 1: K = −P_f/(R + P_f) = −½.
        let one = Mat::from_element(1, 1, 1.0);
        let (k, p) = riccati(&one, &one, &one, &one, &one, 1);
        assert!((k[0][(0, 0)] + 0.5).abs() < 1e-15);
        assert!((p[0][(0, 0)] - 1.5).abs() < 1e-15);
    }

    #[test]
    fn open_loop_loss_is_minimised_at_the_biased_offset() {
        let (x0, w1, w2) = (1.3, 0.07, -0.02);
        let t = -(3.0 * w1 + w2) / (5.0 * x0);
        let h = 1e-5;
        let slope = (scalar_open_loop_loss(t + h, x0, w1, w2) - scalar_open_loop_loss(t - h, x0, w1, w2)) / (2.0 * h);
        assert!(slope.abs() < 1e-10);
        assert!(scalar_open_loop_loss(t + 0.1, x0, w1, w2) > scalar_open_loop_loss(t, x0, w1, w2));
        assert_eq!(scalar_gain_offset(1.0), 0.0);
    }
}
