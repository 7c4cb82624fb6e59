//! Scalar abstraction used by the benchmark models.
//!
//! Models are written once, generic over [`Scalar`], and evaluated either on
//! plain `f64` or on forward-mode dual numbers to obtain exact derivatives.

use num_dual::DualNum;

pub use num_dual::DualStruct;
pub use num_traits::{One, Zero};

pub trait Scalar: DualNum<Primitive = f64> + Copy {}

impl<T: DualNum<Primitive = f64> + Copy> Scalar for T {}

#[inline]
pub fn c<D: Scalar>(v: f64) -> D {
    D::from(v)
}

/// Lifts a slice of plain values into constants of type `D`.
pub fn lift<D: Scalar>(v: &[f64]) -> Vec<D> {
    v.iter().map(|x| D::from(*x)).collect()
}
