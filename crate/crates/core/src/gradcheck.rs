//! Central finite-difference gradient checking at 64-bit precision.
//!
//! The harness re-evaluates a caller-supplied scalar loss under elementwise
//! perturbations and compares against the gradients produced by backward.
//! It is deliberately independent of any backward rule: the numeric side
//! only ever calls the forward path inside [`no_grad`].

use crate::error::Result;
use crate::rng::StreamRng;
use crate::tensor::{no_grad, Tensor};

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_TOL: f64 = 1e-4;

/// Maximum relative error between analytic and central finite-difference
/// gradients of `f` with respect to every element of every input.
///
/// `f` must rebuild its graph on each call from the same tensor handles.
pub fn max_rel_err(
    inputs: &[Tensor<f64>],
    eps: f64,
    mut f: impl FnMut(&[Tensor<f64>]) -> Result<Tensor<f64>>,
) -> Result<f64> {
    for t in inputs {
        t.zero_grad();
    }
    let loss = f(inputs)?;
    loss.backward()?;
    let analytic: Vec<Vec<f64>> = inputs
        .iter()
        .map(|t| t.grad().unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();

    let mut worst = 0.0f64;
    for (ti, t) in inputs.iter().enumerate() {
        for j in 0..t.numel() {
            let orig = t.data()[j];
            t.data_mut()[j] = orig + eps;
            let plus = no_grad(|| f(inputs))?.item()?;
            t.data_mut()[j] = orig - eps;
            let minus = no_grad(|| f(inputs))?.item()?;
            t.data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[ti][j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3);
            if rel > worst {
                worst = rel;
            }
        }
    }
    Ok(worst)
}

/// Random tensor whose entries stay away from the kinks of abs/prelu/clamp.
pub fn rand_away_from_zero(shape: &[usize], rng: &mut StreamRng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| {
            let mag = rng.uniform(0.15, 1.0);
            if rng.uniform(0.0, 1.0) < 0.5 {
                -mag
            } else {
                mag
            }
        })
        .collect();
    Tensor::param(data, shape).expect("shape/data agree")
}

/// Random strictly positive tensor for sqrt/log domains.
pub fn rand_positive(shape: &[usize], rng: &mut StreamRng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.uniform(0.2, 1.5)).collect();
    Tensor::param(data, shape).expect("shape/data agree")
}

/// Small random shape with `ndim` dimensions, extents in [1, max_extent].
pub fn rand_shape(ndim: usize, max_extent: usize, rng: &mut StreamRng) -> Vec<usize> {
    (0..ndim).map(|_| rng.uniform_usize(max_extent) + 1).collect()
}
