//! Dense linear algebra helpers shared by every solver.
//!
//! Matrices are nalgebra `DMatrix<f64>` (column-major), so [`vec`] is a plain
//! copy of the storage. Third-order tensors are stored as a list of matrix
//! slices, one per leading index.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::scalar::Scalar;

pub type Mat = DMatrix<f64>;
pub type Vector = DVector<f64>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("singular matrix (smallest pivot magnitude {pivot:e})")]
    Singular { pivot: f64 },
}

/// Column-stacking vectorisation.
pub fn vec(m: &Mat) -> Vector {
    Vector::from_column_slice(m.as_slice())
}

/// Inverse of [`vec`].
pub fn unvec(v: &Vector, rows: usize, cols: usize) -> Mat {
    assert_eq!(v.len(), rows * cols, "unvec: length {} != {rows}x{cols}", v.len());
    Mat::from_column_slice(rows, cols, v.as_slice())
}

pub fn kron(a: &Mat, b: &Mat) -> Mat {
    a.kronecker(b)
}

/// Permutation `C` with `C vec(A) = vec(Aᵀ)` for `A` of size `n×m`.
pub fn commutation_matrix(n: usize, m: usize) -> Mat {
    let mut c = Mat::zeros(n * m, n * m);
    for i in 0..n {
        for j in 0..m {
            c[(j + i * m, i + j * n)] = 1.0;
        }
    }
    c
}

/// A `d1×d2×d3` tensor stored as `d1` matrices of size `d2×d3`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3 {
    slices: Vec<Mat>,
    d2: usize,
    d3: usize,
}

impl Tensor3 {
    pub fn zeros(d1: usize, d2: usize, d3: usize) -> Self {
        Tensor3 { slices: vec![Mat::zeros(d2, d3); d1], d2, d3 }
    }

    pub fn from_slices(slices: Vec<Mat>, d2: usize, d3: usize) -> Self {
        for s in &slices {
            assert_eq!(s.shape(), (d2, d3), "tensor slice shape");
        }
        Tensor3 { slices, d2, d3 }
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.slices.len(), self.d2, self.d3)
    }

    pub fn slice(&self, i: usize) -> &Mat {
        &self.slices[i]
    }

    pub fn slice_mut(&mut self, i: usize) -> &mut Mat {
        &mut self.slices[i]
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.slices[i][(j, k)]
    }

    /// `Σ_i v_i T_i`, the contraction over the leading index.
    pub fn contract(&self, v: &Vector) -> Mat {
        assert_eq!(v.len(), self.slices.len(), "contract: vector length");
        let mut out = Mat::zeros(self.d2, self.d3);
        for (vi, s) in v.iter().zip(&self.slices) {
            if *vi != 0.0 {
                out += s * *vi;
            }
        }
        out
    }

    /// Sub-block `[.., rows, cols]` of every slice.
    pub fn block(&self, r0: usize, nr: usize, c0: usize, nc: usize) -> Tensor3 {
        Tensor3 {
            slices: self.slices.iter().map(|s| s.view((r0, c0), (nr, nc)).into_owned()).collect(),
            d2: nr,
            d3: nc,
        }
    }
}

/// Free-function form of [`Tensor3::contract`].
pub fn contract(v: &Vector, t: &Tensor3) -> Mat {
    t.contract(v)
}

fn is_symmetric(h: &Mat) -> bool {
    if !h.is_square() {
        return false;
    }
    let scale = h.amax().max(1.0);
    let n = h.nrows();
    for i in 0..n {
        for j in 0..i {
            if (h[(i, j)] - h[(j, i)]).abs() > 1e-12 * scale {
                return false;
            }
        }
    }
    true
}

/// Solves `(H + ρI) X = rhs`.
///
/// Symmetric input is factorised with Cholesky first; indefinite or
/// non-symmetric input falls back to partial-pivot LU.
pub fn solve_regularized(h: &Mat, rhs: &Mat, rho: f64) -> Result<Mat, LinalgError> {
    if !h.is_square() || h.nrows() != rhs.nrows() {
        return Err(LinalgError::Dimension(format!(
            "H is {:?}, rhs is {:?}",
            h.shape(),
            rhs.shape()
        )));
    }
    let n = h.nrows();
    let a = h + Mat::identity(n, n) * rho;
    if n == 0 {
        return Ok(Mat::zeros(0, rhs.ncols()));
    }
    if is_symmetric(&a) {
        if let Some(ch) = a.clone().cholesky() {
            return Ok(ch.solve(rhs));
        }
    }
    let lu = a.lu();
    let u = lu.u();
    let pivots = u.diagonal().map(f64::abs);
    let pmin = pivots.min();
    let pmax = pivots.max();
    if !(pmin > f64::EPSILON * n as f64 * pmax) || !pmin.is_finite() {
        return Err(LinalgError::Singular { pivot: pmin });
    }
    lu.solve(rhs).ok_or(LinalgError::Singular { pivot: pmin })
}

/// Vector right-hand-side convenience for [`solve_regularized`].
pub fn solve_vec(h: &Mat, rhs: &Vector, rho: f64) -> Result<Vector, LinalgError> {
    let m = Mat::from_column_slice(rhs.len(), 1, rhs.as_slice());
    solve_regularized(h, &m, rho).map(|x| x.column(0).into_owned())
}

/// Cholesky factor of `H + ρI`, or `None` when it is not positive definite.
pub fn cholesky_regularized(h: &Mat, rho: f64) -> Option<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
    let n = h.nrows();
    let a = (h + h.transpose()) * 0.5 + Mat::identity(n, n) * rho;
    a.cholesky()
}

/// Numerical rank with threshold `σ_max · max(rows, cols) · rel`.
pub fn numerical_rank(m: &Mat, rel: f64) -> (usize, Vector) {
    if m.nrows() == 0 || m.ncols() == 0 {
        return (0, Vector::zeros(0));
    }
    let sv = m.clone().svd(false, false).singular_values;
    let smax = sv.max();
    let tol = smax * m.nrows().max(m.ncols()) as f64 * rel;
    let rank = sv.iter().filter(|s| **s > tol).count();
    (rank, sv)
}

/// Minimum-norm least-squares solution of `A x ≈ b` via SVD.
pub fn lstsq(a: &Mat, b: &Vector, rel: f64) -> Vector {
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let tol = smax * a.nrows().max(a.ncols()) as f64 * rel;
    svd.solve(b, tol).expect("svd computed with both factors")
}

pub fn symmetrize(m: &mut Mat) {
    let t = m.transpose();
    *m += t;
    *m *= 0.5;
}

// Quaternions are scalar-first `[w, x, y, z]`. The helpers are generic so the
// benchmark dynamics can be differentiated through them.

pub fn quat_mul<D: Scalar>(a: &[D], b: &[D]) -> [D; 4] {
    let (aw, ax, ay, az) = (a[0], a[1], a[2], a[3]);
    let (bw, bx, by, bz) = (b[0], b[1], b[2], b[3]);
    [
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ]
}

pub fn quat_normalize<D: Scalar>(q: &[D]) -> [D; 4] {
    let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    [q[0] / n, q[1] / n, q[2] / n, q[3] / n]
}

/// Rotation matrix (row-major `[[D; 3]; 3]`) of the normalised quaternion.
pub fn quat_to_rot<D: Scalar>(q: &[D]) -> [[D; 3]; 3] {
    let [w, x, y, z] = quat_normalize(q);
    let one = D::one();
    let two = D::from(2.0);
    [
        [one - two * (y * y + z * z), two * (x * y - w * z), two * (x * z + w * y)],
        [two * (x * y + w * z), one - two * (x * x + z * z), two * (y * z - w * x)],
        [two * (x * z - w * y), two * (y * z + w * x), one - two * (x * x + y * y)],
    ]
}

/// Skew matrix with `cross_mat(a) b = a × b`.
pub fn cross_mat<D: Scalar>(a: &[D]) -> [[D; 3]; 3] {
    let z = D::zero();
    [[z, -a[2], a[1]], [a[2], z, -a[0]], [-a[1], a[0], z]]
}

pub fn cross<D: Scalar>(a: &[D], b: &[D]) -> [D; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

pub fn mat3_vec<D: Scalar>(m: &[[D; 3]; 3], v: &[D]) -> [D; 3] {
    let mut out = [D::zero(); 3];
    for i in 0..3 {
        out[i] = m[i][0] * v[0] + m[i][1] * v[1] + m[i][2] * v[2];
    }
    out
}

pub fn to_mat3(m: &[[f64; 3]; 3]) -> Mat {
    Mat::from_fn(3, 3, |i, j| m[i][j])
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn mat_strategy(r: usize, c: usize) -> impl Strategy<Value = Mat> {
        proptest::collection::vec(-3.0f64..3.0, r * c).prop_map(move |v| Mat::from_vec(r, c, v))
    }

    #[test]
    fn quadratic_form_derivative_via_commutation() {
        // d vec(AᵀVA) = (C + I)(I ⊗ AᵀV) d vec(A) for symmetric V, A n×m.
        let a = Mat::from_row_slice(3, 2, &[1.0, -0.5, 0.3, 2.0, 0.7, 0.1]);
        let da = Mat::from_row_slice(3, 2, &[0.2, 0.4, -1.0, 0.5, 0.0, 0.3]);
        let v = Mat::from_row_slice(3, 3, &[2.0, 0.5, 0.1, 0.5, 1.0, -0.2, 0.1, -0.2, 3.0]);
        let direct = vec(&(da.transpose() * &v * &a + a.transpose() * &v * &da));
        let c = commutation_matrix(2, 2);
        let via = (c + Mat::identity(4, 4)) * kron(&Mat::identity(2, 2), &(a.transpose() * &v)) * vec(&da);
        assert_relative_eq!(direct, via, epsilon = 1e-14);
    }

    #[test]
    fn vec_stacks_columns() {
        let a = Mat::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(vec(&a).as_slice(), &[1.0, 3.0, 2.0, 4.0]);
        assert_eq!(unvec(&vec(&a), 2, 2), a);
    }

    #[test]
    fn kron_small() {
        let a = Mat::from_row_slice(1, 2, &[1.0, 2.0]);
        let b = Mat::from_row_slice(2, 1, &[3.0, 4.0]);
        let k = kron(&a, &b);
        assert_eq!(k, Mat::from_row_slice(2, 2, &[3.0, 6.0, 4.0, 8.0]));
    }

    #[test]
    fn contract_weights_slices() {
        let t = Tensor3::from_slices(vec![Mat::identity(2, 2), Mat::from_element(2, 2, 1.0)], 2, 2);
        let v = Vector::from_vec(vec![2.0, -1.0]);
        assert_eq!(t.contract(&v), Mat::from_row_slice(2, 2, &[1.0, -1.0, -1.0, 1.0]));
    }

    #[test]
    fn solve_reports_singular() {
        let h = Mat::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 4.0]);
        let r = solve_regularized(&h, &Mat::identity(2, 2), 0.0);
        assert!(matches!(r, Err(LinalgError::Singular { .. })));
        assert!(solve_regularized(&h, &Mat::identity(2, 2), 1.0).is_ok());
    }

    #[test]
    fn solve_handles_indefinite_symmetric() {
        let h = Mat::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -2.0]);
        let x = solve_vec(&h, &Vector::from_vec(vec![1.0, 1.0]), 0.0).unwrap();
        assert_relative_eq!(x[1], -0.5);
    }

    #[test]
    fn quaternion_rotation_matches_sandwich() {
        let q = quat_normalize(&[0.9, 0.1, -0.3, 0.2]);
        let v = [0.3, -1.0, 2.0];
        let r = quat_to_rot(&q);
        let rv = mat3_vec(&r, &v);
        let qc = [q[0], -q[1], -q[2], -q[3]];
        let s = quat_mul(&quat_mul(&q, &[0.0, v[0], v[1], v[2]]), &qc);
        for i in 0..3 {
            assert_relative_eq!(rv[i], s[i + 1], epsilon = 1e-12);
        }
    }

    #[test]
    fn cross_mat_matches_cross() {
        let a = [1.0, -2.0, 0.5];
        let b = [0.3, 0.7, -1.1];
        let c = mat3_vec(&cross_mat(&a), &b);
        assert_eq!(c, cross(&a, &b));
    }

    proptest! {
        #[test]
        fn commutation_transposes(a in mat_strategy(3, 4)) {
            let c = commutation_matrix(3, 4);
            prop_assert_eq!(&c * vec(&a), vec(&a.transpose()));
        }

        #[test]
        fn kron_vec_identity(a in mat_strategy(2, 3), x in mat_strategy(3, 2), b in mat_strategy(2, 2)) {
            // vec(A X B) = (Bᵀ ⊗ A) vec(X)
            let lhs = vec(&(&a * &x * &b));
            let rhs = kron(&b.transpose(), &a) * vec(&x);
            prop_assert!((lhs - rhs).amax() < 1e-10);
        }

        #[test]
        fn solve_regularized_residual(a in mat_strategy(4, 4), rho in 0.5f64..5.0) {
            let h = &a * a.transpose();
            let rhs = Mat::identity(4, 4);
            let x = solve_regularized(&h, &rhs, rho).unwrap();
            let res = (&h + Mat::identity(4, 4) * rho) * x - rhs;
            prop_assert!(res.amax() < 1e-9);
        }

        #[test]
        fn rotation_is_orthonormal(q in proptest::collection::vec(-1.0f64..1.0, 4)) {
            prop_assume!(q.iter().map(|v| v * v).sum::<f64>() > 1e-2);
            let r = to_mat3(&quat_to_rot(&q));
            prop_assert!((r.transpose() * &r - Mat::identity(3, 3)).amax() < 1e-12);
            prop_assert!((r.determinant() - 1.0).abs() < 1e-12);
        }
    }
}
