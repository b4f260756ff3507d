//! Finite-difference gradient oracle.
//!
//! Central differences evaluate only forward passes, so this stays
//! independent of the backward implementation it is used to verify.

use ndarray::{Dimension, IxDyn};

use super::{Arr, Tensor};

/// Central-difference gradient of `f` (a scalar-producing forward pass)
/// with respect to `x`.
pub fn finite_diff(x: &Arr, h: f64, mut f: impl FnMut(&Arr) -> f64) -> Arr {
    let mut grad = Arr::zeros(x.raw_dim());
    let mut probe = x.clone();
    for idx in ndarray::indices(x.raw_dim()) {
        let idx = idx.into_dyn();
        let orig = probe[&idx];
        probe[&idx] = orig + h;
        let fp = f(&probe);
        probe[&idx] = orig - h;
        let fm = f(&probe);
        probe[&idx] = orig;
        grad[&idx] = (fp - fm) / (2.0 * h);
    }
    grad
}

/// Relative error between two scalars, stabilized around zero.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-12)
}

/// Relative L2 distance between two gradient arrays.
pub fn rel_err_arr(a: &Arr, b: &Arr) -> f64 {
    let num: f64 = a
        .iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let den = a.iter().map(|x| x * x).sum::<f64>().sqrt()
        + b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if den < 1e-300 {
        num
    } else {
        num / den
    }
}

/// Compare autodiff against central differences for a scalar-valued graph
/// built by `build` from a single leaf. Returns the relative L2 error.
pub fn check_grad(x: &Arr, build: impl Fn(&Tensor) -> Tensor) -> f64 {
    let leaf = Tensor::leaf(x.clone());
    let loss = build(&leaf);
    assert_eq!(loss.len(), 1, "check_grad expects a scalar loss");
    let grads = loss.backward();
    let auto = grads
        .get(&leaf)
        .cloned()
        .unwrap_or_else(|| Arr::zeros(IxDyn(x.shape())));
    let fd = finite_diff(x, 1e-5, |probe| build(&Tensor::leaf(probe.clone())).item());
    rel_err_arr(&auto, &fd)
}
