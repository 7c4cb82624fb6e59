//! Exact derivative oracle for models written generically over [`Scalar`].
//!
//! First and second derivatives come from hyper-dual numbers seeded on pairs
//! of coordinates; third-order directional derivatives come from
//! hyper-hyper-dual numbers with the third perturbation along a tangent.

use num_dual::{HyperDual64, HyperHyperDual64};

use crate::linalg::{Mat, Tensor3, Vector};
use crate::problem::{
    check_finite, Dims, FnDerivs, FnTangents, Layout, OcProblem, ProblemError, StageDerivatives, StageTangents,
    TerminalDerivatives, Wrt,
};
use crate::scalar::{lift, Scalar};

/// A problem whose functions are generic over the scalar type.
pub trait Model: Send + Sync {
    fn dims(&self) -> Dims;
    fn name(&self) -> &str;
    fn stage_cost<D: Scalar>(&self, k: usize, x: &[D], u: &[D], theta: &[D]) -> D;
    fn terminal_cost<D: Scalar>(&self, x: &[D], theta: &[D]) -> D;
    fn dynamics<D: Scalar>(&self, k: usize, x: &[D], u: &[D], theta: &[D]) -> Vec<D>;
    fn inequality<D: Scalar>(&self, _k: usize, _x: &[D], _u: &[D], _theta: &[D]) -> Vec<D> {
        Vec::new()
    }
    fn equality<D: Scalar>(&self, _k: usize, _x: &[D], _u: &[D], _theta: &[D]) -> Vec<D> {
        Vec::new()
    }
}

/// Adapter turning a [`Model`] into an [`OcProblem`].
#[derive(Debug, Clone)]
pub struct AutoDiff<M>(pub M);

fn stage_all<M: Model, D: Scalar>(m: &M, k: usize, x: &[D], u: &[D], th: &[D]) -> Vec<D> {
    let mut out = vec![m.stage_cost(k, x, u, th)];
    out.extend(m.dynamics(k, x, u, th));
    out.extend(m.inequality(k, x, u, th));
    out.extend(m.equality(k, x, u, th));
    out
}

/// Point `z` split into `(x, u, θ)`; θ is taken from `z` or lifted constants.
fn split<D: Scalar>(z: &[D], l: &Layout, theta: &[f64]) -> (Vec<D>, Vec<D>, Vec<D>) {
    let x = z[..l.n_x].to_vec();
    let u = z[l.n_x..l.n_x + l.n_u].to_vec();
    let th = if l.n_theta > 0 { z[l.n_x + l.n_u..].to_vec() } else { lift(theta) };
    (x, u, th)
}

/// Value, Jacobian and Hessians of `eval` at `z` (length `nz`).
fn second_order<F>(z: &[f64], m: usize, eval: F) -> (Vector, Mat, Tensor3)
where
    F: Fn(&[HyperDual64]) -> Vec<HyperDual64>,
{
    let nz = z.len();
    let mut value = Vector::zeros(m);
    let mut jac = Mat::zeros(m, nz);
    let mut hess = Tensor3::zeros(m, nz, nz);
    let mut zd: Vec<HyperDual64> = z.iter().map(|v| HyperDual64::from_re(*v)).collect();
    if nz == 0 {
        let out = eval(&zd);
        for (i, o) in out.iter().enumerate() {
            value[i] = o.re;
        }
        return (value, jac, hess);
    }
    for a in 0..nz {
        for b in a..nz {
            zd[a].eps1 = 1.0;
            zd[b].eps2 = 1.0;
            let out = eval(&zd);
            zd[a].eps1 = 0.0;
            zd[b].eps2 = 0.0;
            for (i, o) in out.iter().enumerate() {
                if a == 0 && b == 0 {
                    value[i] = o.re;
                }
                if a == b {
                    jac[(i, a)] = o.eps1;
                }
                let s = hess.slice_mut(i);
                s[(a, b)] = o.eps1eps2;
                s[(b, a)] = o.eps1eps2;
            }
        }
    }
    (value, jac, hess)
}

fn third_order<F>(z: &[f64], m: usize, dirs: &Mat, eval: F) -> FnTangents
where
    F: Fn(&[HyperHyperDual64]) -> Vec<HyperHyperDual64>,
{
    let nz = z.len();
    let nd = dirs.ncols();
    let mut t = FnTangents::zeros(m, nz, nd);
    let mut zd: Vec<HyperHyperDual64> = z.iter().map(|v| HyperHyperDual64::from_re(*v)).collect();
    for j in 0..nd {
        for l in 0..nz {
            zd[l].eps3 = dirs[(l, j)];
        }
        for a in 0..nz {
            for b in a..nz {
                zd[a].eps1 = 1.0;
                zd[b].eps2 = 1.0;
                let out = eval(&zd);
                zd[a].eps1 = 0.0;
                zd[b].eps2 = 0.0;
                for (i, o) in out.iter().enumerate() {
                    if a == 0 && b == 0 {
                        t.dvalue[(i, j)] = o.eps3;
                    }
                    if a == b {
                        t.djac[j][(i, a)] = o.eps1eps3;
                    }
                    let s = t.dhess[j].slice_mut(i);
                    s[(a, b)] = o.eps1eps2eps3;
                    s[(b, a)] = o.eps1eps2eps3;
                }
            }
        }
    }
    t
}

fn rows_of(t: &FnTangents, o: usize, n: usize) -> FnTangents {
    let nz = t.djac.first().map(|m| m.ncols()).unwrap_or(0);
    FnTangents {
        dvalue: t.dvalue.rows(o, n).into_owned(),
        djac: t.djac.iter().map(|m| m.rows(o, n).into_owned()).collect(),
        dhess: t
            .dhess
            .iter()
            .map(|h| Tensor3::from_slices((o..o + n).map(|i| h.slice(i).clone()).collect(), nz, nz))
            .collect(),
    }
}

fn stack_z(x: &Vector, u: &Vector, theta: Option<&Vector>) -> Vec<f64> {
    let mut z: Vec<f64> = x.iter().chain(u.iter()).copied().collect();
    if let Some(t) = theta {
        z.extend(t.iter());
    }
    z
}

impl<M: Model> OcProblem for AutoDiff<M> {
    fn dims(&self) -> Dims {
        self.0.dims()
    }

    fn name(&self) -> &str {
        self.0.name()
    }

    fn stage_cost(&self, k: usize, x: &Vector, u: &Vector, theta: &Vector) -> f64 {
        self.0.stage_cost(k, x.as_slice(), u.as_slice(), theta.as_slice())
    }

    fn terminal_cost(&self, x: &Vector, theta: &Vector) -> f64 {
        self.0.terminal_cost(x.as_slice(), theta.as_slice())
    }

    fn dynamics(&self, k: usize, x: &Vector, u: &Vector, theta: &Vector) -> Vector {
        Vector::from_vec(self.0.dynamics(k, x.as_slice(), u.as_slice(), theta.as_slice()))
    }

    fn inequality(&self, k: usize, x: &Vector, u: &Vector, theta: &Vector) -> Vector {
        Vector::from_vec(self.0.inequality(k, x.as_slice(), u.as_slice(), theta.as_slice()))
    }

    fn equality(&self, k: usize, x: &Vector, u: &Vector, theta: &Vector) -> Vector {
        Vector::from_vec(self.0.equality(k, x.as_slice(), u.as_slice(), theta.as_slice()))
    }

    fn stage_derivatives(
        &self,
        k: usize,
        x: &Vector,
        u: &Vector,
        theta: &Vector,
        wrt: Wrt,
    ) -> Result<StageDerivatives, ProblemError> {
        let d = self.0.dims();
        let layout = Layout {
            n_x: d.n_x,
            n_u: d.n_u,
            n_theta: if wrt == Wrt::All { d.n_theta } else { 0 },
        };
        let z = stack_z(x, u, (wrt == Wrt::All).then_some(theta));
        let m = 1 + d.n_x + d.n_in + d.n_eq;
        let (value, jac, hess) = second_order(&z, m, |zd| {
            let (x, u, th) = split(zd, &layout, theta.as_slice());
            stage_all(&self.0, k, &x, &u, &th)
        });
        check_finite(&value, "stage functions", k)?;
        let nz = layout.nz();
        let take = |o: usize, n: usize| FnDerivs {
            value: value.rows(o, n).into_owned(),
            jac: jac.rows(o, n).into_owned(),
            hess: Tensor3::from_slices((o..o + n).map(|i| hess.slice(i).clone()).collect(), nz, nz),
        };
        Ok(StageDerivatives {
            layout,
            cost: take(0, 1),
            dynamics: take(1, d.n_x),
            ineq: take(1 + d.n_x, d.n_in),
            eq: take(1 + d.n_x + d.n_in, d.n_eq),
        })
    }

    fn terminal_derivatives(&self, x: &Vector, theta: &Vector, wrt: Wrt) -> Result<TerminalDerivatives, ProblemError> {
        let d = self.0.dims();
        let layout = Layout {
            n_x: d.n_x,
            n_u: 0,
            n_theta: if wrt == Wrt::All { d.n_theta } else { 0 },
        };
        let z = stack_z(x, &Vector::zeros(0), (wrt == Wrt::All).then_some(theta));
        let (value, jac, hess) = second_order(&z, 1, |zd| {
            let (x, _, th) = split(zd, &layout, theta.as_slice());
            vec![self.0.terminal_cost(&x, &th)]
        });
        check_finite(&value, "terminal cost", d.horizon)?;
        Ok(TerminalDerivatives { layout, cost: FnDerivs { value, jac, hess } })
    }

    fn stage_tangents(
        &self,
        k: usize,
        x: &Vector,
        u: &Vector,
        theta: &Vector,
        dirs: &Mat,
    ) -> Result<StageTangents, ProblemError> {
        let d = self.0.dims();
        let layout = Layout { n_x: d.n_x, n_u: d.n_u, n_theta: d.n_theta };
        if dirs.nrows() != layout.nz() {
            return Err(ProblemError::Dimension(format!("tangent rows {} != nz {}", dirs.nrows(), layout.nz())));
        }
        let z = stack_z(x, u, Some(theta));
        let m = 1 + d.n_x + d.n_in + d.n_eq;
        let all = third_order(&z, m, dirs, |zd| {
            let (x, u, th) = split(zd, &layout, theta.as_slice());
            stage_all(&self.0, k, &x, &u, &th)
        });
        Ok(StageTangents {
            cost: rows_of(&all, 0, 1),
            dynamics: rows_of(&all, 1, d.n_x),
            ineq: rows_of(&all, 1 + d.n_x, d.n_in),
            eq: rows_of(&all, 1 + d.n_x + d.n_in, d.n_eq),
        })
    }

    fn terminal_tangents(&self, x: &Vector, theta: &Vector, dirs: &Mat) -> Result<FnTangents, ProblemError> {
        let d = self.0.dims();
        let layout = Layout { n_x: d.n_x, n_u: 0, n_theta: d.n_theta };
        if dirs.nrows() != layout.nz() {
            return Err(ProblemError::Dimension(format!("tangent rows {} != nz {}", dirs.nrows(), layout.nz())));
        }
        let z = stack_z(x, &Vector::zeros(0), Some(theta));
        Ok(third_order(&z, 1, dirs, |zd| {
            let (x, _, th) = split(zd, &layout, theta.as_slice());
            vec![self.0.terminal_cost(&x, &th)]
        }))
    }
}
