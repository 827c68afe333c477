//! Minimal reverse-mode autodiff over ndarray, sized for this project: f64
//! values, dynamic shapes, a per-sample tape that is built during the forward
//! pass and consumed once by `backward`. Tensors are `ArcArray`, so cloning a
//! value onto the tape is O(1) and copy-on-write.

mod gradcheck;
pub mod kernels;
mod ops;
mod tape;

pub use gradcheck::{check_named_gradients, GradCheckReport};
pub use ops::*;
pub use tape::{Binder, Grads, ParamSet, Tape, Var};

use ndarray::{ArrayD, ArrayViewD, IxDyn};
use rand::Rng;
use rand_distr::StandardNormal;

pub type Data = ndarray::ArcArray<f64, IxDyn>;

pub fn zeros(shape: &[usize]) -> Data {
    ArrayD::zeros(IxDyn(shape)).into_shared()
}

pub fn full(shape: &[usize], v: f64) -> Data {
    ArrayD::from_elem(IxDyn(shape), v).into_shared()
}

pub fn scalar(v: f64) -> Data {
    ArrayD::from_elem(IxDyn(&[]), v).into_shared()
}

pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Data {
    ArrayD::from_shape_vec(IxDyn(shape), data)
        .expect("element count must match shape")
        .into_shared()
}

/// Standard normal samples in row-major order.
pub fn randn(shape: &[usize], rng: &mut impl Rng) -> Data {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    from_vec(shape, data)
}

/// Standard normal vector.
pub fn randn1(len: usize, rng: &mut impl Rng) -> ndarray::Array1<f64> {
    ndarray::Array1::from_iter((0..len).map(|_| rng.sample::<f64, _>(StandardNormal)))
}

/// Uniform samples in [lo, hi).
pub fn rand_uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Data {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    from_vec(shape, data)
}

pub(crate) fn as_scalar(v: &ArrayViewD<f64>) -> f64 {
    debug_assert_eq!(v.len(), 1, "expected scalar tensor");
    *v.iter().next().expect("scalar tensor is non-empty")
}
