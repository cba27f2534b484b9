//! Central finite-difference utilities for verifying backward rules.
//!
//! The numeric gradient is computed purely from forward evaluations, so it is
//! independent of every backward rule it checks.

use crate::autodiff::Tensor;
use crate::error::Result;

/// Central-difference gradients of a scalar function of several tensors.
/// `f` is re-evaluated with one element perturbed by ±`step` at a time.
pub fn fd_gradients(
    inputs: &[Tensor],
    step: f64,
    mut f: impl FnMut(&[Tensor]) -> Result<f64>,
) -> Result<Vec<Tensor>> {
    let mut grads = Vec::with_capacity(inputs.len());
    let mut work: Vec<Tensor> = inputs.to_vec();
    for i in 0..inputs.len() {
        let mut g = Tensor::zeros(inputs[i].shape());
        for k in 0..inputs[i].len() {
            let orig = inputs[i].data()[k];
            work[i].data_mut()[k] = orig + step;
            let plus = f(&work)?;
            work[i].data_mut()[k] = orig - step;
            let minus = f(&work)?;
            work[i].data_mut()[k] = orig;
            g.data_mut()[k] = (plus - minus) / (2.0 * step);
        }
        grads.push(g);
    }
    Ok(grads)
}

/// Worst relative error between two gradients, with the denominator floored
/// to keep near-zero entries from dominating:
/// `max_k |a_k - b_k| / max(|a_k|, |b_k|, floor)`.
pub fn max_rel_error(analytic: &Tensor, numeric: &Tensor, floor: f64) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape(), "gradient shapes differ");
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}
