//! Gradient verification by central finite differences.

use super::{no_grad, Tensor};
use crate::error::Result;
use crate::scalar::Scalar;

/// Compare analytic gradients of `loss_fn` (a scalar-valued closure over the
/// given parameters) against central differences with step `eps`.
///
/// Returns the worst relative discrepancy over every coordinate of every
/// parameter: max |analytic - numeric| / max(1, |analytic|).
///
/// `loss_fn` is re-invoked for each probe, so it must be a pure function of
/// the parameter values.
pub fn finite_diff_check<T: Scalar, F>(loss_fn: F, params: &[Tensor<T>], eps: T) -> Result<f64>
where
    F: Fn() -> Result<Tensor<T>>,
{
    for p in params {
        p.zero_grad();
    }
    let loss = loss_fn()?;
    loss.backward()?;
    let analytic: Vec<Vec<f64>> = params
        .iter()
        .map(|p| {
            p.grad_vec()
                .map(|g| g.iter().map(|v| v.as_f64()).collect())
                .unwrap_or_else(|| vec![0.0; p.numel()])
        })
        .collect();

    let eps_f = eps.as_f64();
    let mut worst = 0.0f64;
    for (p, grads) in params.iter().zip(&analytic) {
        for i in 0..p.numel() {
            let orig = p.data_mut()[i];
            p.data_mut()[i] = orig + eps;
            let up = no_grad(&loss_fn)?.item()?.as_f64();
            p.data_mut()[i] = orig - eps;
            let down = no_grad(&loss_fn)?.item()?.as_f64();
            p.data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * eps_f);
            let a = grads[i];
            let rel = (a - numeric).abs() / a.abs().max(1.0);
            if rel > worst {
                worst = rel;
            }
        }
    }
    Ok(worst)
}
